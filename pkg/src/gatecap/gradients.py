"""Backpropagation through time for the gated captioner, and its numeric check."""

from dataclasses import dataclass, field

import numpy as np

from gatecap import tensor as T
from gatecap.model import (
    FeedMode,
    ModelConfig,
    ModelParams,
    cross_entropy_loss,
    forward_sequence,
    init_params,
    penalized,
    l2_penalty,
    sequence_loss,
)


def backward_sequence(params, config, trace, target_ids, l2_coeff=0.0):
    """Gradient of mean cross-entropy + ``l2_coeff`` * sum of squared weights."""
    n = trace.steps
    if len(target_ids) != n:
        raise ValueError(f"{len(target_ids)} targets for {n} timesteps")
    grads = params.zeros_like()
    learned = config.feed_mode is FeedMode.LEARNED
    proj = trace.projected_image
    d_proj = np.zeros_like(proj)
    dh_next = np.zeros_like(proj)
    masks = trace.masks

    for t in range(n - 1, -1, -1):
        hs, pres = trace.hidden[t], trace.pre[t]
        dz = trace.probs[t].copy()
        dz[target_ids[t]] -= 1.0
        dz /= n
        grads["Wd"] += np.outer(dz, hs[-1])
        grads["bd"] += dz
        dh = params["Wd"].T @ dz + dh_next

        for k in range(config.depth, 1, -1):
            da = dh * T.activation_grad(config.activation, pres[k - 1], hs[k - 1])
            grads[params.transition_name(k)] += np.outer(da, hs[k - 2])
            grads[f"bh.{k}"] += da
            dh = params.transition(k).T @ da

        da = dh * T.activation_grad(config.activation, pres[0], hs[0])
        h_prev, g = trace.h_prev[t], trace.gates[t]
        grads["Ws"] += np.outer(da, trace.x[t])
        grads["Wh_rec"] += np.outer(da, h_prev)
        grads["bh.1"] += da
        dx = params["Ws"].T @ da
        if masks is not None and masks.inputs is not None:
            dx = dx * masks.inputs[t]
        grads["E"][trace.input_ids[t]] += dx
        d_proj += da * g
        dh_prev = params["Wh_rec"].T @ da
        if learned:
            dgate = da * proj * g * (1.0 - g)
            grads["Wg"] += np.outer(dgate, h_prev)
            grads["bg"] += dgate
            dh_prev += params["Wg"].T @ dgate
        dh_next = dh_prev

    if masks is not None and masks.image is not None:
        d_proj = d_proj * masks.image
    grads["Wi"] += np.outer(d_proj, trace.feature)
    grads["bi"] += d_proj

    if l2_coeff:
        for name, w in params.items():
            if penalized(name, config):
                grads[name] += 2.0 * l2_coeff * w
    return grads


def loss_and_grads(params, config, token_ids, feature, l2_coeff=0.0, masks=None):
    trace = forward_sequence(params, config, token_ids, feature, masks)
    targets = token_ids[1:]
    loss = cross_entropy_loss(trace, targets)
    return loss, backward_sequence(params, config, trace, targets, l2_coeff)


def regularized_loss(params, config, token_ids, feature, l2_coeff=0.0):
    data = sequence_loss(params, config, token_ids, feature)
    return data + l2_penalty(params, config, l2_coeff)


def finite_difference_grad(loss_fn, params, coord, eps=1e-5):
    """Central difference of ``loss_fn(params)`` along one coordinate.

    ``coord`` is ``(tensor_name, index)``.  The coordinate is restored
    afterwards, so ``params`` is unchanged on return.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    name, idx = coord
    arr = params[name]
    orig = arr[idx]
    try:
        arr[idx] = orig + eps
        up = loss_fn(params)
        arr[idx] = orig - eps
        down = loss_fn(params)
    finally:
        arr[idx] = orig
    return (up - down) / (2.0 * eps)


def relu_kink(params, config, token_ids, feature, coord, eps):
    """True if any ReLU pre-activation crosses, or sits within 10*eps of, zero
    between the two perturbed evaluations of ``coord``."""
    name, idx = coord
    arr = params[name]
    orig = arr[idx]
    try:
        arr[idx] = orig + eps
        up = forward_sequence(params, config, token_ids, feature).pre
        arr[idx] = orig - eps
        down = forward_sequence(params, config, token_ids, feature).pre
    finally:
        arr[idx] = orig
    for step_up, step_down in zip(up, down):
        for a, b in zip(step_up, step_down):
            moved = a != b
            if not moved.any():
                continue
            near = np.minimum(np.abs(a), np.abs(b)) < 10 * eps
            if np.any(moved & ((np.sign(a) != np.sign(b)) | near)):
                return True
    return False


def relative_error(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


@dataclass
class TensorReport:
    checked: int = 0
    skipped: int = 0
    max_rel_err: float = 0.0
    all_zero: bool = True


@dataclass
class GradCheckReport:
    feed_mode: str
    activation: str
    n_checked: int = 0
    n_skipped: int = 0
    max_rel_err: float = 0.0
    worst: tuple = None  # (tensor, index, analytic, numeric)
    tensors: dict = field(default_factory=dict)

    def passed(self, tol=1e-5):
        return self.max_rel_err < tol

    def lines(self):
        out = []
        for name, r in self.tensors.items():
            zero = " zero" if r.all_zero and r.checked else ""
            out.append(
                f"tensor {name} checked {r.checked} skipped {r.skipped} "
                f"max_rel_err {r.max_rel_err:.3e}{zero}"
            )
        out.append(
            f"feed_mode {self.feed_mode} activation {self.activation} "
            f"n_checked {self.n_checked} n_skipped {self.n_skipped} "
            f"max_rel_err {self.max_rel_err:.3e}"
        )
        if self.worst is not None:
            name, idx, a, n = self.worst
            out.append(f"worst {name} {list(idx)} analytic {a:.10e} numeric {n:.10e}")
        return out


def small_config(activation="tanh", feed_mode=FeedMode.LEARNED, depth=2, **kw):
    kw = {"vocab_size": 20, "embed_dim": 8, "hidden_dim": 10, "feature_dim": 16, **kw}
    return ModelConfig(activation=activation, feed_mode=feed_mode, depth=depth, **kw)


def gradient_check(
    config,
    seed,
    n_coords=600,
    max_len=6,
    l2_coeff=1e-3,
    eps=1e-5,
    corrupt=0.0,
    precision=np.longdouble,
):
    """Compare analytic gradients with central differences on random coordinates.

    Biases are randomised (init leaves them at zero) so every tensor gets a
    generic check.  ``corrupt`` adds a constant to every analytic gradient
    entry and exists only as a negative control.
    """
    rng = np.random.default_rng(seed)
    params = init_params(config, seed)
    for name, arr in params.items():
        if arr.ndim == 1:
            arr[...] = rng.uniform(-0.5, 0.5, size=arr.shape)
    length = int(rng.integers(max(2, max_len - 2), max_len + 1))
    body = rng.integers(3, config.vocab_size, size=length - 2).tolist()
    token_ids = [0, *body, 1]
    feature = rng.normal(size=config.feature_dim)

    _, grads = loss_and_grads(params, config, token_ids, feature, l2_coeff)
    if corrupt:
        for arr in grads.tensors.values():
            arr += corrupt

    # the oracle runs in extended precision on a copy of the same float64
    # values; float64 round-off alone (~1e-11 here) would swamp the relative
    # error of coordinates whose gradient is below ~1e-6
    wide = params.astype(precision)
    wide_feature = feature.astype(precision)

    def loss_fn(p):
        return regularized_loss(p, config, token_ids, wide_feature, l2_coeff)

    names = list(params.tensors)
    sizes = np.array([params[n].size for n in names], dtype=float)
    # every tensor gets at least a few coordinates, the rest proportional to size
    per_tensor = np.maximum(4, np.round(n_coords * sizes / sizes.sum())).astype(int)

    report = GradCheckReport(feed_mode=config.feed_mode.value, activation=config.activation)
    for name, count in zip(names, per_tensor):
        arr = params[name]
        tr = report.tensors.setdefault(name, TensorReport())
        flat = rng.choice(arr.size, size=min(count, arr.size), replace=False)
        for f in flat:
            idx = np.unravel_index(int(f), arr.shape)
            if config.activation == "relu" and relu_kink(
                params, config, token_ids, feature, (name, idx), eps
            ):
                tr.skipped += 1
                report.n_skipped += 1
                continue
            a = float(grads[name][idx])
            n = float(finite_difference_grad(loss_fn, wide, (name, idx), eps))
            err = relative_error(a, n)
            tr.checked += 1
            tr.all_zero = tr.all_zero and a == 0.0 and n == 0.0
            tr.max_rel_err = max(tr.max_rel_err, err)
            report.n_checked += 1
            if report.worst is None or err > report.max_rel_err:
                report.max_rel_err = err
                report.worst = (name, tuple(int(i) for i in idx), a, n)
    return report
