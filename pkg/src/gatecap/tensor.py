"""Dense kernels shared by the model, the gradients and the optimizer.

Matrices and vectors are plain float64 numpy arrays (row-major).  The
functions here only add shape validation and the numerically safe variants
(softmax with max subtraction, saturating sigmoid) on top of numpy.
Floating inputs keep their dtype, so the same code also runs in
``np.longdouble`` for the finite-difference oracle.
"""

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


def _floating(x):
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(DTYPE)
    return x


def as_vector(v):
    v = _floating(v)
    if v.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {v.shape}")
    return v


def as_matrix(m):
    m = _floating(m)
    if m.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {m.shape}")
    return m


def matvec(m, v):
    m = as_matrix(m)
    v = as_vector(v)
    if m.shape[1] != v.shape[0]:
        raise ShapeError(f"matvec: matrix {m.shape} incompatible with vector {v.shape}")
    return m @ v


def _check_same(a, b, op):
    a = as_vector(a)
    b = as_vector(b)
    if a.shape != b.shape:
        raise ShapeError(f"{op}: length mismatch {a.shape[0]} vs {b.shape[0]}")
    return a, b


def add(a, b):
    a, b = _check_same(a, b, "add")
    return a + b


def elemwise_mul(a, b):
    a, b = _check_same(a, b, "elemwise_mul")
    return a * b


def sigmoid(v):
    v = _floating(v)
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ez = np.exp(v[~pos])
    out[~pos] = ez / (1.0 + ez)
    # never exactly 0 or 1 for finite input
    one = out.dtype.type(1)
    return np.clip(out, np.nextafter(0 * one, one), np.nextafter(one, 0 * one))


def relu(v):
    return np.maximum(_floating(v), 0)


def tanh_act(v):
    return np.tanh(_floating(v))


def softmax(v):
    v = as_vector(v)
    if v.shape[0] < 1:
        raise ShapeError("softmax of an empty vector")
    e = np.exp(v - v.max())
    return e / e.sum()


def clip_elementwise(v, bound):
    if not bound > 0:
        raise ValueError(f"clip bound must be positive, got {bound}")
    return np.clip(_floating(v), -bound, bound)


def sum_squares(m):
    m = _floating(m).ravel()
    return m @ m


ACTIVATIONS = {
    "relu": relu,
    "tanh": tanh_act,
}


def activation_grad(name, pre, out):
    """Derivative of the activation given its pre-activation and output."""
    if name == "relu":
        return (pre > 0).astype(pre.dtype)
    if name == "tanh":
        return 1.0 - out * out
    raise ValueError(f"unknown activation {name!r}")
