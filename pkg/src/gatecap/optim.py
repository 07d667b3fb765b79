"""Minibatch RMSprop training with element-wise clipping, L2 and inverted dropout."""

import logging
from dataclasses import dataclass, field, fields

import numpy as np

from gatecap import tensor as T
from gatecap.gradients import backward_sequence
from gatecap.model import (
    DropoutMasks,
    cross_entropy_loss,
    forward_sequence,
    init_params,
    penalized,
    sequence_loss,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 100
    epochs: int = 50
    learning_rate: float = 1e-3
    rms_decay: float = 0.99
    rms_eps: float = 1e-8
    clip_bound: float = 5.0
    l2_coeff: float = 1e-4
    dropout_p: float = 0.5
    dropout_inputs: bool = True
    dropout_image: bool = True
    lr_decay_per_epoch: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.dropout_p < 1:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if not 0 < self.rms_decay < 1:
            raise ValueError(f"rms_decay must be in (0, 1), got {self.rms_decay}")
        if not self.clip_bound > 0:
            raise ValueError(f"clip_bound must be positive, got {self.clip_bound}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class RmsPropState:
    cache: dict

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(v) for k, v in params.items()})

    def copy(self):
        return RmsPropState({k: v.copy() for k, v in self.cache.items()})


def dropout_masks(model_cfg, train_cfg, seed, timesteps):
    """Inverted-dropout masks for the word inputs and the projected image.

    Hidden layers are never dropped.  With ``dropout_p == 0`` the masks are
    all ones.
    """
    p = train_cfg.dropout_p
    rng = np.random.default_rng(seed)
    keep = 1.0 - p

    def draw(shape):
        if p == 0:
            return np.ones(shape, dtype=T.DTYPE)
        return (rng.random(shape) < keep).astype(T.DTYPE) / keep

    inputs = draw((timesteps, model_cfg.embed_dim)) if train_cfg.dropout_inputs else None
    image = draw(model_cfg.hidden_dim) if train_cfg.dropout_image else None
    return DropoutMasks(inputs=inputs, image=image)


def rmsprop_update(params, grads, state, train_cfg, lr=None):
    """In-place RMSprop step; returns ``(params, state)``."""
    lr = train_cfg.learning_rate if lr is None else lr
    rho, eps = train_cfg.rms_decay, train_cfg.rms_eps
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in tensor {name}")
    for name, g in grads.items():
        cache = state.cache[name]
        cache *= rho
        cache += (1.0 - rho) * g * g
        params[name] -= lr * g / (np.sqrt(cache) + eps)
    return params, state


def pair_seed(seed, epoch, batch, index):
    return np.random.SeedSequence([seed, epoch, batch, index])


def batch_gradients(params, batch, model_cfg, train_cfg, mask_seeds=None):
    """Mean data loss and mean gradient (plus L2) over ``batch``, before clipping.

    ``batch`` is a list of ``(token_ids, feature)``.  ``mask_seeds`` gives one
    dropout seed per pair; without it (or with ``dropout_p == 0``) no dropout
    is applied.  Pairs are reduced in list order.
    """
    if not batch:
        raise ValueError("empty minibatch")
    use_dropout = train_cfg.dropout_p > 0 and mask_seeds is not None
    total = params.zeros_like()
    loss = 0.0
    for i, (ids, feature) in enumerate(batch):
        masks = None
        if use_dropout:
            masks = dropout_masks(model_cfg, train_cfg, mask_seeds[i], len(ids) - 1)
        trace = forward_sequence(params, model_cfg, ids, feature, masks)
        loss += cross_entropy_loss(trace, ids[1:])
        g = backward_sequence(params, model_cfg, trace, ids[1:])
        for name, arr in g.items():
            total[name] += arr
    n = len(batch)
    for name, arr in total.items():
        arr /= n
        if train_cfg.l2_coeff and penalized(name, model_cfg):
            arr += 2.0 * train_cfg.l2_coeff * params[name]
    return float(loss / n), total


def train_minibatch(params, state, batch, model_cfg, train_cfg, mask_seeds=None, lr=None):
    """One update: batch-mean gradient with L2, element-wise clip, RMSprop.

    Returns the mean data loss before the update.
    """
    loss, grads = batch_gradients(params, batch, model_cfg, train_cfg, mask_seeds)
    for name, arr in grads.items():
        grads[name] = T.clip_elementwise(arr, train_cfg.clip_bound)
    rmsprop_update(params, grads, state, train_cfg, lr)
    return loss


def mean_loss(params, model_cfg, pairs):
    """Mean per-sequence cross-entropy without dropout."""
    if not pairs:
        raise ValueError("no pairs to evaluate")
    return float(sum(sequence_loss(params, model_cfg, ids, f) for ids, f in pairs) / len(pairs))


@dataclass
class TrainState:
    params: object
    rms: RmsPropState
    best_params: object
    best_dev: float = float("inf")
    epoch: int = 0
    lr: float = 0.0
    history: list = field(default_factory=list)

    @classmethod
    def fresh(cls, model_cfg, train_cfg):
        params = init_params(model_cfg, train_cfg.seed)
        return cls(
            params=params,
            rms=RmsPropState.zeros_like(params),
            best_params=params.copy(),
            lr=train_cfg.learning_rate,
        )


def history_line(rec):
    return (
        f"epoch {rec['epoch']} train_loss {rec['train_loss']:.10f} "
        f"dev_loss {rec['dev_loss']:.10f} lr {rec['lr']:.6e}"
    )


def fit(dataset, model_cfg, train_cfg, state=None, on_epoch=None):
    """Train until ``train_cfg.epochs`` epochs are complete.

    Resumes from ``state`` when given.  ``on_epoch(state, record)`` is called
    after every epoch.  The best-dev parameters are kept in
    ``state.best_params``.
    """
    train_pairs = dataset.train_pairs()
    dev_pairs = dataset.dev_pairs()
    if not train_pairs:
        raise ValueError("training split is empty")
    if not dev_pairs:
        raise ValueError("dev split is empty")
    if state is None:
        state = TrainState.fresh(model_cfg, train_cfg)
    seed = train_cfg.seed
    bs = train_cfg.batch_size

    while state.epoch < train_cfg.epochs:
        epoch = state.epoch + 1
        order = np.random.default_rng([seed, epoch]).permutation(len(train_pairs))
        losses = []
        for b, start in enumerate(range(0, len(order), bs)):
            idx = order[start : start + bs]
            batch = [train_pairs[i] for i in idx]
            seeds = [pair_seed(seed, epoch, b, int(i)) for i in idx]
            losses.append(
                train_minibatch(state.params, state.rms, batch, model_cfg, train_cfg, seeds, state.lr)
            )
        dev = mean_loss(state.params, model_cfg, dev_pairs)
        rec = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "dev_loss": dev,
            "lr": state.lr,
        }
        state.history.append(rec)
        if dev < state.best_dev:
            state.best_dev = dev
            state.best_params = state.params.copy()
        state.epoch = epoch
        state.lr *= train_cfg.lr_decay_per_epoch
        log.debug(history_line(rec))
        if on_epoch is not None:
            on_epoch(state, rec)
    return state


def train(dataset, model_cfg, train_cfg):
    """Returns ``(best-dev params, per-epoch history)``."""
    state = fit(dataset, model_cfg, train_cfg)
    return state.best_params, state.history
