"""Parameters and forward recurrence of the gated deep-transition captioner.

Per timestep t, with h_prev the last hidden layer of the previous step::

    g(t)   = sigmoid(Wg h_prev + bg)
    h_1(t) = f(Ws x(t) + Wh_rec h_prev + g(t) * p + bh[1])
    h_k(t) = f(Wh_trans[k] h_{k-1}(t) + bh[k])           k = 2..N
    y(t)   = softmax(Wd h_N(t) + bd)

where p = Wi feature + bi is the projected image, computed once per sequence.
"""

import enum
import math
from dataclasses import dataclass, field, fields

import numpy as np

from gatecap import tensor as T

START, END, UNK = 0, 1, 2


class FeedMode(str, enum.Enum):
    LEARNED = "learned"
    FIRST_STEP = "first_step"
    ALWAYS = "always"
    NONE = "none"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            choices = ", ".join(m.value for m in cls)
            raise ValueError(f"unknown feed mode {value!r} (choose from {choices})") from None


@dataclass
class ModelConfig:
    vocab_size: int
    embed_dim: int = 256
    hidden_dim: int = 512
    depth: int = 2
    feature_dim: int = 4096
    activation: str = "relu"
    feed_mode: FeedMode = FeedMode.LEARNED
    max_decode_len: int = 50
    share_transition_weights: bool = False

    def __post_init__(self):
        self.feed_mode = FeedMode.parse(self.feed_mode)
        self.activation = str(self.activation).lower()
        if self.activation not in T.ACTIVATIONS:
            raise ValueError(f"activation must be relu or tanh, got {self.activation!r}")
        if self.vocab_size < 4:
            raise ValueError(f"vocab_size must be >= 4, got {self.vocab_size}")
        for name in ("embed_dim", "hidden_dim", "depth", "feature_dim", "max_decode_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["feed_mode"] = self.feed_mode.value
        return d


def tensor_shapes(config):
    """Ordered mapping of parameter name -> shape for ``config``."""
    V, D, H, F = config.vocab_size, config.embed_dim, config.hidden_dim, config.feature_dim
    shapes = {"E": (V, D), "Ws": (H, D), "Wh_rec": (H, H)}
    if not config.share_transition_weights:
        for k in range(2, config.depth + 1):
            shapes[f"Wh_trans.{k}"] = (H, H)
    shapes.update({"Wd": (V, H), "Wi": (H, F), "Wg": (H, H)})
    for k in range(1, config.depth + 1):
        shapes[f"bh.{k}"] = (H,)
    shapes.update({"bd": (V,), "bi": (H,), "bg": (H,)})
    return shapes


def is_weight(name):
    return name.startswith("W")


def penalized(name, config):
    """Weight matrices the model actually uses carry the L2 penalty.

    Biases and the embedding never do; the gate weights are unused unless the
    gate is learned, and the image projection is unused with no image feed.
    """
    if not is_weight(name):
        return False
    if name == "Wg":
        return config.feed_mode is FeedMode.LEARNED
    if name == "Wi":
        return config.feed_mode is not FeedMode.NONE
    return True


@dataclass
class ModelParams:
    """Named float64 tensors.  Also used to hold gradients of the same shapes."""

    tensors: dict
    shared: bool = False

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name] = value

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def transition(self, k):
        return self.tensors["Wh_rec"] if self.shared else self.tensors[f"Wh_trans.{k}"]

    def transition_name(self, k):
        return "Wh_rec" if self.shared else f"Wh_trans.{k}"

    def astype(self, dtype):
        return ModelParams({k: v.astype(dtype) for k, v in self.tensors.items()}, self.shared)

    def copy(self):
        return ModelParams({k: v.copy() for k, v in self.tensors.items()}, self.shared)

    def zeros_like(self):
        return ModelParams({k: np.zeros_like(v) for k, v in self.tensors.items()}, self.shared)

    @classmethod
    def zeros(cls, config):
        return cls(
            {k: np.zeros(s, dtype=T.DTYPE) for k, s in tensor_shapes(config).items()},
            config.share_transition_weights,
        )

    def equals(self, other):
        return self.tensors.keys() == other.tensors.keys() and all(
            np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items()
        )


def init_params(config, seed):
    """Xavier-uniform weights from a seeded generator; all biases zero."""
    rng = np.random.default_rng(seed)
    params = ModelParams.zeros(config)
    for name, arr in params.items():
        if arr.ndim == 2:
            fan_out, fan_in = arr.shape
            s = math.sqrt(6.0 / (fan_in + fan_out))
            arr[...] = rng.uniform(-s, s, size=arr.shape)
    return params


@dataclass
class DropoutMasks:
    """Inverted-dropout masks: one row per timestep for x(t), one for the image."""

    inputs: np.ndarray = None
    image: np.ndarray = None


@dataclass
class ForwardTrace:
    input_ids: list
    feature: np.ndarray
    projected_image: np.ndarray
    masks: DropoutMasks = None
    x: list = field(default_factory=list)
    h_prev: list = field(default_factory=list)
    gates: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    hidden: list = field(default_factory=list)
    probs: list = field(default_factory=list)

    @property
    def steps(self):
        return len(self.probs)


def compute_gate(params, h_prev, mode, t):
    mode = FeedMode.parse(mode)
    H = h_prev.shape[0]
    if mode is FeedMode.LEARNED:
        return T.sigmoid(T.matvec(params["Wg"], h_prev) + params["bg"])
    if mode is FeedMode.ALWAYS or (mode is FeedMode.FIRST_STEP and t == 1):
        return np.ones(H, dtype=h_prev.dtype)
    return np.zeros(H, dtype=h_prev.dtype)


def project_image(params, feature):
    return T.matvec(params["Wi"], feature) + params["bi"]


def _step(params, config, x_t, h_prev, projected_image, t):
    act = T.ACTIVATIONS[config.activation]
    g = compute_gate(params, h_prev, config.feed_mode, t)
    a = (
        T.matvec(params["Ws"], x_t)
        + T.matvec(params["Wh_rec"], h_prev)
        + T.elemwise_mul(g, projected_image)
        + params["bh.1"]
    )
    pres, hs = [a], [act(a)]
    for k in range(2, config.depth + 1):
        a = T.matvec(params.transition(k), hs[-1]) + params[f"bh.{k}"]
        pres.append(a)
        hs.append(act(a))
    y = T.softmax(T.matvec(params["Wd"], hs[-1]) + params["bd"])
    return pres, hs, g, y


def step(params, config, x_t, h_prev, projected_image, t):
    """One timestep; returns (hidden layers h_1..h_N, gate, output distribution)."""
    H = config.hidden_dim
    if x_t.shape != (config.embed_dim,) or h_prev.shape != (H,) or projected_image.shape != (H,):
        raise T.ShapeError(
            f"step: got x {x_t.shape}, h_prev {h_prev.shape}, image {projected_image.shape}"
        )
    _, hs, g, y = _step(params, config, x_t, h_prev, projected_image, t)
    return hs, g, y


def forward_sequence(params, config, token_ids, feature, masks=None):
    """Teacher-forced pass: inputs are token_ids[:-1], targets token_ids[1:]."""
    if len(token_ids) < 2:
        raise ValueError(f"sequence needs at least START and END, got {list(token_ids)}")
    feature = T.as_vector(feature)
    if feature.shape[0] != config.feature_dim:
        raise T.ShapeError(f"feature length {feature.shape[0]} != feature_dim {config.feature_dim}")
    proj = project_image(params, feature)
    if masks is not None and masks.image is not None:
        proj = proj * masks.image
    inputs = list(token_ids[:-1])
    trace = ForwardTrace(input_ids=inputs, feature=feature, projected_image=proj, masks=masks)
    h_prev = np.zeros(config.hidden_dim, dtype=params["Wd"].dtype)
    E = params["E"]
    for t, tok in enumerate(inputs, start=1):
        x = E[tok]
        if masks is not None and masks.inputs is not None:
            x = x * masks.inputs[t - 1]
        pres, hs, g, y = _step(params, config, x, h_prev, proj, t)
        trace.x.append(x)
        trace.h_prev.append(h_prev)
        trace.gates.append(g)
        trace.pre.append(pres)
        trace.hidden.append(hs)
        trace.probs.append(y)
        h_prev = hs[-1]
    return trace


def cross_entropy_loss(trace, target_ids):
    """Mean over timesteps of -ln y(t)[target]."""
    if len(target_ids) != trace.steps:
        raise ValueError(f"{len(target_ids)} targets for {trace.steps} timesteps")
    total = 0.0
    for y, tgt in zip(trace.probs, target_ids):
        if not 0 <= tgt < y.shape[0]:
            raise ValueError(f"target id {tgt} outside vocabulary of size {y.shape[0]}")
        total = total - np.log(max(y[tgt], np.finfo(y.dtype).tiny))
    return total / trace.steps


def sequence_loss(params, config, token_ids, feature, masks=None):
    trace = forward_sequence(params, config, token_ids, feature, masks)
    return cross_entropy_loss(trace, token_ids[1:])


def l2_penalty(params, config, coeff):
    if coeff == 0:
        return 0.0
    return coeff * sum(T.sum_squares(v) for k, v in params.items() if penalized(k, config))
