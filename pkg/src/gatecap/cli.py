"""Command-line entry point: ``gatecap train|generate|evaluate|gradcheck|synth``.

Exit codes: 0 ok, 1 data error, 2 usage/config error, 3 gradient check failure.
"""

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from gatecap import checkpoint
from gatecap.data import (
    DataError,
    atomic_write,
    gen_synthetic,
    load_captions,
    load_features,
    prepare_dataset,
    write_captions,
    write_features,
)
from gatecap.decode import evaluate_model, greedy_decode
from gatecap.gradients import gradient_check, small_config
from gatecap.model import FeedMode, ModelConfig
from gatecap.optim import TrainConfig, TrainState, fit, history_line

log = logging.getLogger("gatecap")

EXIT_OK, EXIT_DATA, EXIT_USAGE, EXIT_CHECK = 0, 1, 2, 3

DATA_DEFAULTS = {"dev_images": 1000, "test_images": 1000, "min_count": 5, "split_seed": 0}
# derived from the data, never set by hand
_DERIVED = {"vocab_size"}


class UsageError(Exception):
    pass


def _coerce(key, raw, default):
    kind = type(default)
    if isinstance(default, FeedMode):
        return FeedMode.parse(raw)
    if kind is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return kind(raw) if kind in (int, float) else raw.strip()
    except ValueError:
        raise UsageError(f"{key}: expected {kind.__name__}, got {raw!r}") from None


def _defaults():
    model = {f.name: f.default for f in dataclasses.fields(ModelConfig) if f.name not in _DERIVED}
    train = {f.name: f.default for f in dataclasses.fields(TrainConfig)}
    return model, train, dict(DATA_DEFAULTS)


def parse_config_lines(lines, source="<config>"):
    """``key = value`` lines with ``#`` comments -> dict of raw strings."""
    out = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}: line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = (value, f"{source}: line {lineno}")
    return out


def resolve_config(base=None, file_entries=(), overrides=()):
    """Layer defaults (or a checkpoint's configs), config file, then flags.

    Returns ``(model_kw, train_kw, data_kw)``; unknown keys are fatal.
    """
    model, train, data = _defaults()
    if base is not None:
        model.update({k: v for k, v in base[0].items() if k not in _DERIVED})
        train.update(base[1])
        data.update(base[2])
    for entries in (*file_entries, *overrides):
        for key, (raw, where) in entries.items():
            for group in (model, train, data):
                if key in group:
                    group[key] = _coerce(key, raw, group[key])
                    break
            else:
                raise UsageError(f"{where}: unknown config key {key!r}")
    return model, train, data


def _flag_overrides(args):
    out = {}
    for item in args.set or ():
        if "=" not in item:
            raise UsageError(f"--set {item!r}: expected key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = (v.strip(), f"--set {item}")
    for flag in ("epochs", "seed", "feed_mode", "hidden_dim", "batch_size", "learning_rate"):
        val = getattr(args, flag, None)
        if val is not None:
            out[flag] = (str(val), f"--{flag.replace('_', '-')}")
    return out


def _read_inputs(captions_path, features_path):
    for p in (captions_path, features_path):
        if not Path(p).is_file():
            raise DataError(f"{p}: no such file")
    return load_captions(captions_path), load_features(features_path)


def _feature_dim(features):
    dims = {v.shape[0] for v in features.values()}
    if not dims:
        raise DataError("feature store is empty")
    return dims.pop()


def _build_dataset(groups, features, data_cfg, vocab=None):
    return prepare_dataset(
        groups,
        features,
        data_cfg["dev_images"],
        data_cfg["test_images"],
        data_cfg["split_seed"],
        data_cfg["min_count"],
        vocab=vocab,
    )


# -- subcommands ----------------------------------------------------------------


def cmd_train(args):
    files = []
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"{path}: no such config file")
        files.append(parse_config_lines(path.read_text().splitlines(), str(path)))
    overrides = [_flag_overrides(args)]

    prior = None
    if args.resume:
        prior = checkpoint.load(args.resume)
        base = (prior.model_cfg.to_dict(), prior.train_cfg.to_dict(), prior.data_cfg)
        model_kw, train_kw, data_kw = resolve_config(base, files, overrides)
    else:
        model_kw, train_kw, data_kw = resolve_config(None, files, overrides)
    try:
        train_cfg = TrainConfig(**train_kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    if prior is not None and prior.state.epoch >= train_cfg.epochs:
        print(f"nothing to do: checkpoint already at epoch {prior.state.epoch}")
        return EXIT_OK

    groups, features = _read_inputs(args.captions, args.features)
    F = _feature_dim(features)
    vocab = prior.vocab if prior is not None else None
    dataset, vocab = _build_dataset(groups, features, data_kw, vocab)
    if not dataset.train or not dataset.dev:
        raise DataError("train and dev splits must both be non-empty")
    # the 4096 default means "take it from the feature file"
    if prior is None and model_kw["feature_dim"] not in (F, ModelConfig.feature_dim):
        raise DataError(f"feature_dim = {model_kw['feature_dim']} but {args.features} has {F}")
    model_kw["feature_dim"] = F
    try:
        model_cfg = ModelConfig(vocab_size=len(vocab), **model_kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if prior is not None and (
        model_cfg.vocab_size != prior.model_cfg.vocab_size
        or model_cfg.feature_dim != prior.model_cfg.feature_dim
    ):
        raise DataError("data does not match the checkpoint being resumed")

    out = Path(args.out)
    history_path = Path(args.history) if args.history else out.with_name(out.name + ".history")
    state = prior.state if prior is not None else TrainState.fresh(model_cfg, train_cfg)
    if state.rms is None:
        raise DataError(f"{args.resume}: checkpoint has no optimizer state to resume from")
    log.info(
        "train %d images (%d pairs), dev %d images, V=%d, F=%d",
        len(dataset.train), len(dataset.train_pairs()), len(dataset.dev), len(vocab), F,
    )

    def on_epoch(st, rec):
        print(history_line(rec), flush=True)
        atomic_write(history_path, "".join(history_line(r) + "\n" for r in st.history))
        checkpoint.save(out, checkpoint.Checkpoint(model_cfg, train_cfg, vocab, st, data_kw))

    fit(dataset, model_cfg, train_cfg, state=state, on_epoch=on_epoch)
    if train_cfg.epochs == 0:
        checkpoint.save(out, checkpoint.Checkpoint(model_cfg, train_cfg, vocab, state, data_kw))
        atomic_write(history_path, "".join(history_line(r) + "\n" for r in state.history))
    return EXIT_OK


def cmd_generate(args):
    ckpt = checkpoint.load(args.ckpt)
    if not Path(args.features).is_file():
        raise DataError(f"{args.features}: no such file")
    features = load_features(args.features)
    if args.ids:
        ids = [ln.strip() for ln in Path(args.ids).read_text().splitlines() if ln.strip()]
        missing = [i for i in ids if i not in features]
        if missing:
            raise DataError(f"unknown image ids: {' '.join(missing)}")
    else:
        ids = sorted(features)
    lines = []
    for image_id in ids:
        toks, _ = greedy_decode(ckpt.params, ckpt.model_cfg, features[image_id])
        lines.append(f"{image_id}\t{' '.join(ckpt.vocab.decode(toks))}\n")
    sys.stdout.write("".join(lines))
    return EXIT_OK


def cmd_evaluate(args):
    ckpt = checkpoint.load(args.ckpt)
    groups, features = _read_inputs(args.captions, args.features)
    dataset, vocab = _build_dataset(groups, features, ckpt.data_cfg or DATA_DEFAULTS, ckpt.vocab)
    items = dataset.split(args.split)
    if not items:
        raise DataError(f"split {args.split!r} has no images")
    report, captions = evaluate_model(ckpt.params, ckpt.model_cfg, items, vocab)
    print("# corpus BLEU, uniform weights, no smoothing, closest-reference brevity penalty")
    print(report.line())
    if args.dump:
        atomic_write(
            args.dump,
            "".join(f"{i}\t{' '.join(t)}\n" for i, t, _ in sorted(captions)),
        )
    return EXIT_OK


def cmd_gradcheck(args):
    modes = [FeedMode.parse(args.feed_mode)] if args.feed_mode else list(FeedMode)
    ok = True
    for mode in modes:
        cfg = small_config(args.activation, mode, depth=args.depth)
        report = gradient_check(cfg, args.seed, n_coords=args.coords, corrupt=args.corrupt)
        for line in report.lines():
            print(line)
        ok = ok and report.passed(args.tol)
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_synth(args):
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        rows, features = gen_synthetic(args.images, args.feature_dim, args.seed)
        write_captions(out / "captions.tsv", rows)
        name = "features.bin" if args.format == "binary" else "features.tsv"
        write_features(out / name, features, args.format)
    except OSError as exc:
        raise DataError(f"{out}: cannot write ({exc.strerror})") from None
    print(f"wrote {len(rows)} captions for {args.images} images to {out}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="gatecap", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--captions", required=True)
    t.add_argument("--features", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--config", help="file of 'key = value' lines")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--history", help="history file (default <out>.history)")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--feed-mode", dest="feed_mode", choices=[m.value for m in FeedMode])
    t.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--learning-rate", dest="learning_rate", type=float)
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="greedy captions for images")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--features", required=True)
    g.add_argument("--ids", help="file with one image id per line")
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="BLEU of greedy captions on a split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--features", required=True)
    e.add_argument("--captions", required=True)
    e.add_argument("--split", choices=["train", "dev", "test"], default="test")
    e.add_argument("--dump", help="write image_id<TAB>caption lines here")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    c.add_argument("--activation", choices=["tanh", "relu"], default="tanh")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--feed-mode", dest="feed_mode", choices=[m.value for m in FeedMode])
    c.add_argument("--depth", type=int, default=2)
    c.add_argument("--coords", type=int, default=600)
    c.add_argument("--tol", type=float, default=1e-5)
    c.add_argument("--corrupt", type=float, default=0.0, help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="write a synthetic captions/features corpus")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--images", type=int, default=250)
    s.add_argument("--feature-dim", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--format", choices=["binary", "tsv"], default="binary")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"gatecap: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, checkpoint.CheckpointError, OSError) as exc:
        print(f"gatecap: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
