"""Captions, features, vocabulary, splits and a synthetic toy corpus."""

import logging
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gatecap.model import END, START, UNK

log = logging.getLogger(__name__)

SPECIALS = ("<start>", "<end>", "<unk>")
FEATURE_MAGIC = b"IMGF"
FEATURE_VERSION = 1


class DataError(ValueError):
    """Malformed or inconsistent input data."""


def tokenize(text):
    return text.lower().split()


@dataclass
class Vocabulary:
    itos: list
    min_count: int = 1

    def __post_init__(self):
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def id(self, token):
        # special surface forms in text never map to reserved ids
        i = self.stoi.get(token, UNK)
        return UNK if i < len(SPECIALS) else i

    def token(self, idx):
        return self.itos[idx]

    def decode(self, ids, strip=True):
        toks = [self.itos[i] for i in ids]
        if strip:
            toks = [t for i, t in zip(ids, toks) if i not in (START, END)]
        return toks


def build_vocab(caption_lines, min_count=5):
    """Ids 0..2 are START/END/UNK; words by descending count, then alphabetically."""
    counts = Counter()
    n = 0
    for line in caption_lines:
        n += 1
        counts.update(tokenize(line))
    if n == 0:
        raise DataError("cannot build a vocabulary from an empty corpus")
    for tok in SPECIALS:
        counts.pop(tok, None)
    words = sorted((w for w, c in counts.items() if c >= min_count), key=lambda w: (-counts[w], w))
    return Vocabulary(list(SPECIALS) + words, min_count)


def encode_sentence(vocab, text):
    return [START, *(vocab.id(tok) for tok in tokenize(text)), END]


# -- features ---------------------------------------------------------------


def _check_finite(vec, where):
    if not np.all(np.isfinite(vec)):
        raise DataError(f"non-finite feature value at {where}")


def load_features(path, fmt=None):
    """Read an ``image_id -> vector`` store (TSV or the IMGF binary format).

    The format is sniffed from the magic bytes when ``fmt`` is None.
    Vectors are widened to float64.
    """
    path = Path(path)
    raw = path.read_bytes()
    if fmt is None:
        fmt = "binary" if raw[:4] == FEATURE_MAGIC else "tsv"
    store = {}
    dim = None

    def put(image_id, vec, where):
        nonlocal dim
        if dim is None:
            dim = vec.shape[0]
        elif vec.shape[0] != dim:
            raise DataError(f"{path}: {where}: expected {dim} values, got {vec.shape[0]}")
        _check_finite(vec, f"{path}: {where}")
        if image_id in store:
            log.warning("%s: %s: duplicate image id %r, keeping the last", path, where, image_id)
        store[image_id] = vec

    if fmt == "tsv":
        for lineno, line in enumerate(raw.decode("utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            if "\t" not in line:
                raise DataError(f"{path}: line {lineno}: missing TAB")
            image_id, values = line.split("\t", 1)
            try:
                vec = np.array(values.split(), dtype=np.float64)
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
            put(image_id, vec, f"line {lineno}")
    elif fmt == "binary":
        if raw[:4] != FEATURE_MAGIC:
            raise DataError(f"{path}: bad magic {raw[:4]!r}")
        try:
            version, count, F = struct.unpack_from("<III", raw, 4)
            if version != FEATURE_VERSION:
                raise DataError(f"{path}: unsupported version {version}")
            off = 16
            for rec in range(1, count + 1):
                (n,) = struct.unpack_from("<I", raw, off)
                off += 4
                image_id = raw[off : off + n].decode("utf-8")
                off += n
                vec = np.frombuffer(raw, dtype="<f4", count=F, offset=off).astype(np.float64)
                off += 4 * F
                put(image_id, vec, f"record {rec}")
        except struct.error as exc:
            raise DataError(f"{path}: truncated file ({exc})") from None
        except ValueError as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"{path}: truncated file ({exc})") from None
    else:
        raise ValueError(f"unknown feature format {fmt!r}")
    return store


def features_to_bytes(store, fmt="binary"):
    if fmt == "tsv":
        lines = [
            f"{k}\t" + " ".join(repr(float(x)) for x in np.asarray(v, dtype=np.float32))
            for k, v in store.items()
        ]
        return ("\n".join(lines) + "\n").encode("utf-8")
    dims = {len(v) for v in store.values()}
    if len(dims) > 1:
        raise DataError(f"ragged feature store: lengths {sorted(dims)}")
    F = dims.pop() if dims else 0
    out = [FEATURE_MAGIC, struct.pack("<III", FEATURE_VERSION, len(store), F)]
    for k, v in store.items():
        kid = k.encode("utf-8")
        out.append(struct.pack("<I", len(kid)))
        out.append(kid)
        out.append(np.asarray(v, dtype="<f4").tobytes())
    return b"".join(out)


def write_features(path, store, fmt="binary"):
    atomic_write(path, features_to_bytes(store, fmt))


def atomic_write(path, data):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, str):
        data = data.encode("utf-8")
    tmp.write_bytes(data)
    tmp.replace(path)


# -- captions ---------------------------------------------------------------


def strip_caption_index(image_id):
    head, sep, tail = image_id.rpartition("#")
    if sep and tail.isdigit():
        return head
    return image_id


def load_captions(path):
    """``image_id<TAB>caption`` lines grouped by id (``#k`` suffix stripped)."""
    path = Path(path)
    groups = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            if "\t" not in line:
                raise DataError(f"{path}: line {lineno}: missing TAB")
            image_id, text = line.split("\t", 1)
            if not text.strip():
                log.warning("%s: line %d: empty caption", path, lineno)
            groups.setdefault(strip_caption_index(image_id), []).append(text)
    return groups


@dataclass
class CaptionedImage:
    image_id: str
    captions: list  # token-id sequences, each START ... END
    feature: np.ndarray
    references: list = field(default_factory=list)  # lowercased raw tokens per caption


@dataclass
class Dataset:
    train: list
    dev: list
    test: list

    def split(self, name):
        if name not in ("train", "dev", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    @staticmethod
    def _pairs(items):
        return [(ids, img.feature) for img in items for ids in img.captions]

    def train_pairs(self):
        return self._pairs(self.train)

    def dev_pairs(self):
        return self._pairs(self.dev)

    def test_pairs(self):
        return self._pairs(self.test)


def split_ids(image_ids, dev_n, test_n, seed, explicit=None):
    """Partition ids into ``(train, dev, test)`` lists.

    ``explicit`` may map "dev"/"test" (and optionally "train") to id lists,
    which then replace the seeded shuffle.
    """
    ids = sorted(image_ids)
    if explicit:
        known = set(ids)
        parts = {}
        for name in ("dev", "test", "train"):
            if name in explicit:
                missing = [i for i in explicit[name] if i not in known]
                if missing:
                    raise DataError(f"{name} list names unknown ids: {missing[:5]}")
                parts[name] = list(explicit[name])
        taken = set(parts.get("dev", [])) | set(parts.get("test", []))
        if "train" not in parts:
            parts["train"] = [i for i in ids if i not in taken]
        sets = [set(parts.get(n, [])) for n in ("train", "dev", "test")]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise DataError("explicit split lists overlap")
        return parts["train"], parts.get("dev", []), parts.get("test", [])
    if dev_n + test_n >= len(ids):
        raise DataError(f"need more than {dev_n + test_n} images for dev+test, have {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return shuffled[dev_n + test_n :], shuffled[:dev_n], shuffled[dev_n : dev_n + test_n]


def split_dataset(items, dev_n, test_n, seed, explicit=None):
    by_id = {it.image_id: it for it in items}
    train, dev, test = split_ids(by_id, dev_n, test_n, seed, explicit)
    return Dataset([by_id[i] for i in train], [by_id[i] for i in dev], [by_id[i] for i in test])


def assemble(groups, features, vocab):
    """Join grouped caption text with features into ``CaptionedImage`` items."""
    missing = sorted(set(groups) - set(features))
    if missing:
        raise DataError(f"{len(missing)} captioned images have no features, e.g. {missing[:3]}")
    return [
        CaptionedImage(
            image_id=i,
            captions=[encode_sentence(vocab, t) for t in texts],
            feature=features[i],
            references=[tokenize(t) for t in texts],
        )
        for i, texts in groups.items()
    ]


def prepare_dataset(groups, features, dev_n, test_n, seed, min_count=5, vocab=None, explicit=None):
    """Split by image, build the vocabulary on training captions only, encode.

    Pass ``vocab`` to reuse an existing vocabulary (e.g. from a checkpoint).
    """
    train_ids, dev_ids, test_ids = split_ids(list(groups), dev_n, test_n, seed, explicit)
    if vocab is None:
        vocab = build_vocab([t for i in train_ids for t in groups[i]], min_count)
    items = {it.image_id: it for it in assemble(groups, features, vocab)}
    ds = Dataset(
        [items[i] for i in train_ids], [items[i] for i in dev_ids], [items[i] for i in test_ids]
    )
    return ds, vocab


# -- synthetic corpus -------------------------------------------------------

COLORS = ("red", "blue", "green", "yellow")
OBJECTS = ("dog", "cat", "car", "ball")
SCENES = ("park", "street", "beach", "house")
N_ATTRIBUTE_DIMS = len(COLORS) + len(OBJECTS) + len(SCENES)

TEMPLATES = (
    "a {color} {obj} {prep} the {scene}",
    "the {color} {obj} is {prep} the {scene}",
    "there is a {color} {obj} {prep} the {scene}",
    "{det} {color} {obj} {verb} {prep} the {scene}",
    "{det} {obj} that is {color} {verb} {prep} the {scene}",
)
PREPOSITIONS = ("in", "at", "near")
DETERMINERS = ("a", "one")
VERBS = ("sits", "waits", "stays")


def gen_synthetic(n_images, feature_dim, seed, noise=0.1):
    """Toy corpus whose captions are a function of one-hot image attributes.

    Returns ``(captions, features)``: captions is a list of
    ``(image_id#k, text)`` rows (5 per image), features maps image id to a
    float32 vector whose first 12 coordinates one-hot encode colour, object
    and scene.
    """
    if feature_dim < 8:
        raise ValueError("feature_dim must be >= 8")
    rng = np.random.default_rng(seed)
    width = int(math.log10(max(n_images, 1))) + 1
    captions, features = [], {}
    for n in range(n_images):
        image_id = f"img{n:0{width}d}"
        c, o, s = (int(x) for x in rng.integers(0, 4, size=3))
        vec = (noise * rng.standard_normal(feature_dim)).astype(np.float32)
        for offset, a in ((0, c), (4, o), (8, s)):
            block = vec[offset : offset + 4]  # shorter than 4 when feature_dim < 12
            block[:] = 0.0
            if a < block.shape[0]:
                block[a] = 1.0
        features[image_id] = vec
        for k, template in enumerate(TEMPLATES):
            text = template.format(
                color=COLORS[c],
                obj=OBJECTS[o],
                scene=SCENES[s],
                prep=PREPOSITIONS[int(rng.integers(len(PREPOSITIONS)))],
                det=DETERMINERS[int(rng.integers(len(DETERMINERS)))],
                verb=VERBS[int(rng.integers(len(VERBS)))],
            )
            captions.append((f"{image_id}#{k}", text))
    return captions, features


def attributes_of(vec):
    """Recover (colour, object, scene) indices from a synthetic feature."""
    v = np.asarray(vec)
    return tuple(int(np.argmax(v[o : o + 4])) for o in (0, 4, 8))


def write_captions(path, rows):
    atomic_write(path, "".join(f"{i}\t{t}\n" for i, t in rows))
