"""Binary checkpoint format.

Layout (little-endian)::

    b"GCRN"  u32 version=1
    u32 n    n bytes of UTF-8 JSON metadata (configs, vocabulary, epoch, lr, history)
    u32 k    k tensor records: u32 name_len, name, u32 rank, rank * u32 dims,
             prod(dims) float64 values

Tensor names are prefixed ``best/`` (best-dev parameters), ``last/``
(parameters after the last epoch, for resuming) and ``rms/`` (RMSprop
accumulators).
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gatecap.data import Vocabulary, atomic_write
from gatecap.model import ModelConfig, ModelParams
from gatecap.optim import RmsPropState, TrainConfig, TrainState

MAGIC = b"GCRN"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    vocab: Vocabulary
    state: TrainState
    data_cfg: dict = field(default_factory=dict)

    @property
    def params(self):
        return self.state.best_params


def _pack_tensor(name, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    raw = name.encode("utf-8")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def to_bytes(ckpt):
    st = ckpt.state
    meta = {
        "model_config": ckpt.model_cfg.to_dict(),
        "train_config": ckpt.train_cfg.to_dict(),
        "data_config": ckpt.data_cfg,
        "vocab": {"itos": ckpt.vocab.itos, "min_count": ckpt.vocab.min_count},
        "epoch": st.epoch,
        "lr": st.lr,
        "best_dev": st.best_dev,
        "history": st.history,
    }
    body = json.dumps(meta, sort_keys=True).encode("utf-8")
    tensors = []
    for prefix, group in (("best/", st.best_params.tensors), ("last/", st.params.tensors)):
        tensors += [(prefix + k, v) for k, v in group.items()]
    if st.rms is not None:
        tensors += [("rms/" + k, v) for k, v in st.rms.cache.items()]
    out = [MAGIC, struct.pack("<II", VERSION, len(body)), body, struct.pack("<I", len(tensors))]
    out += [_pack_tensor(k, v) for k, v in tensors]
    return b"".join(out)


def save(path, ckpt):
    atomic_write(path, to_bytes(ckpt))


def from_bytes(raw, source="<bytes>"):
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (magic {raw[:4]!r})")
    try:
        version, n = struct.unpack_from("<II", raw, 4)
        if version != VERSION:
            raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
        off = 12
        meta = json.loads(raw[off : off + n].decode("utf-8"))
        off += n
        (k,) = struct.unpack_from("<I", raw, off)
        off += 4
        groups = {"best": {}, "last": {}, "rms": {}}
        for _ in range(k):
            (ln,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off : off + ln].decode("utf-8")
            off += ln
            (rank,) = struct.unpack_from("<I", raw, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(dims)
            off += 8 * count
            prefix, _, key = name.partition("/")
            if prefix not in groups:
                raise CheckpointError(f"{source}: unexpected tensor {name!r}")
            groups[prefix][key] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{source}: corrupt checkpoint ({exc})") from None

    model_cfg = ModelConfig(**meta["model_config"])
    train_cfg = TrainConfig(**meta["train_config"])
    shared = model_cfg.share_transition_weights
    state = TrainState(
        params=ModelParams(groups["last"], shared),
        rms=RmsPropState(groups["rms"]) if groups["rms"] else None,
        best_params=ModelParams(groups["best"], shared),
        best_dev=meta["best_dev"],
        epoch=meta["epoch"],
        lr=meta["lr"],
        history=meta["history"],
    )
    vocab = Vocabulary(meta["vocab"]["itos"], meta["vocab"]["min_count"])
    return Checkpoint(model_cfg, train_cfg, vocab, state, meta.get("data_config", {}))


def load(path):
    path = Path(path)
    return from_bytes(path.read_bytes(), str(path))
