import struct

import numpy as np
import pytest

from gatecap import checkpoint
from gatecap.cli import main, parse_config_lines, resolve_config, UsageError
from gatecap.data import Vocabulary, load_captions, load_features
from gatecap.gradients import small_config
from gatecap.model import FeedMode, init_params
from gatecap.optim import RmsPropState, TrainConfig, TrainState

SMALL = [
    "--set", "dev_images=4", "--set", "test_images=4", "--set", "min_count=1",
    "--set", "embed_dim=8", "--hidden-dim", "12", "--batch-size", "16",
]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out-dir", str(d), "--images", "24", "--feature-dim", "16", "--seed", "1"]) == 0
    return d


def _train(corpus, out, *extra):
    return main([
        "train", "--captions", str(corpus / "captions.tsv"), "--features",
        str(corpus / "features.bin"), "--out", str(out), *SMALL, *extra,
    ])


def test_checkpoint_round_trip_bit_exact(tmp_path):
    cfg = small_config("relu", FeedMode.FIRST_STEP)
    params = init_params(cfg, 4)
    rms = RmsPropState({k: np.abs(v) * 0.1 for k, v in params.items()})
    state = TrainState(params, rms, params.copy(), best_dev=1.25, epoch=3, lr=2e-4,
                       history=[{"epoch": 1, "train_loss": 0.1 / 3, "dev_loss": 2 / 7, "lr": 1e-3}])
    vocab = Vocabulary(["<start>", "<end>", "<unk>"] + [f"w{i}" for i in range(17)], 2)
    ck = checkpoint.Checkpoint(cfg, TrainConfig(seed=9), vocab, state, {"dev_images": 3})
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, ck)
    raw = path.read_bytes()
    assert raw[:4] == b"GCRN" and struct.unpack_from("<I", raw, 4) == (1,)
    back = checkpoint.load(path)
    assert back.model_cfg == cfg and back.train_cfg == ck.train_cfg
    assert back.vocab.itos == vocab.itos and back.vocab.min_count == 2
    assert back.state.params.equals(params) and back.params.equals(params)
    for k, v in rms.cache.items():
        assert back.state.rms.cache[k].tobytes() == v.tobytes()
    assert back.state.history == state.history
    assert (back.state.epoch, back.state.lr, back.state.best_dev) == (3, 2e-4, 1.25)
    assert checkpoint.to_bytes(back) == raw


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"nope")
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(p)


def test_config_parsing_layers_and_unknown_keys():
    entries = parse_config_lines(["# comment", "hidden_dim = 64  # inline", "feed_mode = none", ""])
    model, train, data = resolve_config(None, [entries], [{"hidden_dim": ("32", "--hidden-dim")}])
    assert model["hidden_dim"] == 32 and model["feed_mode"] is FeedMode.NONE
    assert train["batch_size"] == 100 and data["min_count"] == 5
    with pytest.raises(UsageError, match="hidden_dimm"):
        resolve_config(None, [parse_config_lines(["hidden_dimm = 3"], "cfg")])
    with pytest.raises(UsageError):
        parse_config_lines(["just words"])


def test_synth_outputs(corpus, tmp_path):
    groups = load_captions(corpus / "captions.tsv")
    feats = load_features(corpus / "features.bin")
    assert len(groups) == 24 and set(groups) == set(feats)
    assert all(len(c) == 5 for c in groups.values())
    other = tmp_path / "again"
    assert main(["synth", "--out-dir", str(other), "--images", "24", "--feature-dim", "16", "--seed", "1"]) == 0
    for name in ("captions.tsv", "features.bin"):
        assert (other / name).read_bytes() == (corpus / name).read_bytes()


def test_synth_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["synth", "--out-dir", str(blocker / "sub"), "--images", "2"]) == 1


def test_train_generate_evaluate(corpus, tmp_path, capsys):
    out = tmp_path / "m.ckpt"
    assert _train(corpus, out, "--epochs", "2") == 0
    lines = capsys.readouterr().out.splitlines()
    assert [ln.split()[0:2] for ln in lines] == [["epoch", "1"], ["epoch", "2"]]
    history = (tmp_path / "m.ckpt.history").read_text().splitlines()
    assert history == lines

    assert main(["generate", "--ckpt", str(out), "--features", str(corpus / "features.bin")]) == 0
    gen = capsys.readouterr().out
    ids = [ln.split("\t")[0] for ln in gen.splitlines()]
    assert ids == sorted(load_features(corpus / "features.bin"))
    assert main(["generate", "--ckpt", str(out), "--features", str(corpus / "features.bin")]) == 0
    assert capsys.readouterr().out == gen

    empty = tmp_path / "ids"
    empty.write_text("")
    assert main(["generate", "--ckpt", str(out), "--features", str(corpus / "features.bin"), "--ids", str(empty)]) == 0
    assert capsys.readouterr().out == ""
    empty.write_text("img00\nmissing1\nmissing2\n")
    assert main(["generate", "--ckpt", str(out), "--features", str(corpus / "features.bin"), "--ids", str(empty)]) == 1
    assert "missing1 missing2" in capsys.readouterr().err

    dump = tmp_path / "dump.tsv"
    args = ["evaluate", "--ckpt", str(out), "--features", str(corpus / "features.bin"),
            "--captions", str(corpus / "captions.tsv"), "--split", "dev", "--dump", str(dump)]
    assert main(args) == 0
    report = capsys.readouterr().out.splitlines()[-1]
    assert report.split()[0::2] == ["B-1", "B-2", "B-3", "B-4", "BP", "c", "r"]
    assert len(dump.read_text().splitlines()) == 4


def test_evaluate_empty_split(corpus, tmp_path, capsys):
    out = tmp_path / "m.ckpt"
    assert _train(corpus, out, "--epochs", "1", "--set", "test_images=0") == 0
    args = ["evaluate", "--ckpt", str(out), "--features", str(corpus / "features.bin"),
            "--captions", str(corpus / "captions.tsv"), "--split", "test"]
    assert main(args) == 1


def test_train_is_deterministic_and_resumable(corpus, tmp_path, capsys):
    a, b, c = tmp_path / "a.ckpt", tmp_path / "b.ckpt", tmp_path / "c.ckpt"
    assert _train(corpus, a, "--epochs", "3", "--seed", "5") == 0
    assert _train(corpus, b, "--epochs", "3", "--seed", "5") == 0
    ha = (tmp_path / "a.ckpt.history").read_bytes()
    assert ha == (tmp_path / "b.ckpt.history").read_bytes()
    assert a.read_bytes() == b.read_bytes()

    assert _train(corpus, c, "--epochs", "1", "--seed", "5") == 0
    assert main(["train", "--captions", str(corpus / "captions.tsv"), "--features",
                 str(corpus / "features.bin"), "--out", str(c), "--resume", str(c),
                 "--epochs", "3"]) == 0
    assert (tmp_path / "c.ckpt.history").read_bytes() == ha
    assert checkpoint.load(c).state.params.equals(checkpoint.load(a).state.params)

    before = a.read_bytes()
    capsys.readouterr()
    assert main(["train", "--captions", "nowhere.tsv", "--features", "nowhere.bin",
                 "--out", str(a), "--resume", str(a)]) == 0
    assert "nothing to do" in capsys.readouterr().out
    assert a.read_bytes() == before


def test_train_errors(corpus, tmp_path, capsys):
    missing = tmp_path / "absent.bin"
    rc = main(["train", "--captions", str(corpus / "captions.tsv"), "--features", str(missing),
               "--out", str(tmp_path / "m")])
    assert rc == 1 and str(missing) in capsys.readouterr().err
    cfg = tmp_path / "cfg"
    cfg.write_text("hidden_dim = 8\nbogus_key = 1\n")
    assert _train(corpus, tmp_path / "m", "--config", str(cfg)) == 2
    assert "bogus_key" in capsys.readouterr().err
    assert _train(corpus, tmp_path / "m", "--set", "dropout_p=1.5") == 2
    with pytest.raises(SystemExit) as exc:
        main(["train", "--captions", "x"])
    assert exc.value.code == 2


def test_train_with_config_file(corpus, tmp_path):
    cfg = tmp_path / "cfg"
    cfg.write_text("feed_mode = first_step\nepochs = 1\nactivation = tanh\n")
    out = tmp_path / "m.ckpt"
    assert _train(corpus, out, "--config", str(cfg)) == 0
    ck = checkpoint.load(out)
    assert ck.model_cfg.feed_mode is FeedMode.FIRST_STEP and ck.model_cfg.activation == "tanh"
    assert ck.model_cfg.hidden_dim == 12  # flag beats config file beats default


def test_gradcheck_cli(capsys):
    assert main(["gradcheck", "--activation", "tanh", "--seed", "0", "--feed-mode", "learned", "--coords", "100"]) == 0
    out = capsys.readouterr().out
    assert out.strip().endswith("PASS") and "tensor Wg " in out
    rc = main(["gradcheck", "--feed-mode", "none", "--coords", "60", "--corrupt", "1e-3"])
    assert rc == 3
    assert "worst " in capsys.readouterr().out
