"""Differentiable operations over :class:`Tensor`.

Each op computes its forward value with numpy (matrix products go through the
fixed-order kernel) and, when a tape is active and an input requires a
gradient, records a closure mapping the output gradient to input gradients.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import kernels
from .tensor import NonFiniteError, ShapeError, Tensor, current_tape

LN_EPS = 1e-5
BN_EPS = 1e-5


def _emit(op: str, arr: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    out = Tensor._wrap(arr)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, backward)
    return out


emit = _emit  # hook for ops defined outside this module


def _need(t: Tensor) -> bool:
    return t.requires_grad


def _check_2d(name: str, x: Tensor) -> None:
    if len(x.shape) != 2:
        raise ShapeError(f"{name} expects a 2-D tensor, got shape {x.shape}")


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def back(g):
        ga = kernels.matmul(g, B.T) if _need(a) else None
        gb = kernels.matmul(A.T, g) if _need(b) else None
        return ga, gb

    return _emit("matmul", kernels.matmul(A, B), (a, b), back)


def pointwise_conv(x: Tensor, w: Tensor) -> Tensor:
    """1x1 convolution over time: a per-frame linear map ``x @ w``."""
    return matmul(x, w)


def transpose(x: Tensor) -> Tensor:
    _check_2d("transpose", x)
    return _emit("transpose", np.ascontiguousarray(x.data.T), (x,),
                 lambda g: (np.ascontiguousarray(g.T),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if math.prod(shape) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    src = x.shape
    return _emit("reshape", x.data.reshape(shape).copy(), (x,), lambda g: (g.reshape(src),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(len(x.shape))):
        raise ShapeError(f"invalid axes {axes} for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return _emit("permute", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(len(p.shape) != 2 for p in parts):
        raise ShapeError(f"concat_cols needs 2-D parts with equal rows, got {[p.shape for p in parts]}")
    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def back(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]].copy() for i in range(len(parts)))

    return _emit("concat_cols", np.concatenate([p.data for p in parts], axis=1), tuple(parts), back)


def take_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Embedding lookup: rows of ``table`` selected by integer ids."""
    _check_2d("take_rows", table)
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"row id out of range [0, {table.shape[0]})")

    def back(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, idx, g)
        return (gt,)

    return _emit("take_rows", table.data[idx].copy(), (table,), back)


def select(x: Tensor, rows: Sequence[int], cols: Sequence[int]) -> Tensor:
    """Gather ``x[rows[i], cols[i]]`` into a 1-D tensor."""
    _check_2d("select", x)
    r = np.asarray(rows, dtype=np.int64)
    c = np.asarray(cols, dtype=np.int64)

    def back(g):
        gx = np.zeros(x.shape)
        np.add.at(gx, (r, c), g)
        return (gx,)

    return _emit("select", x.data[r, c].copy(), (x,), back)


# -- elementwise -------------------------------------------------------------

def _broadcast_pair(op: str, a: Tensor, b: Tensor) -> bool:
    if a.shape == b.shape:
        return False
    if len(b.shape) == 1 and a.shape[-1] == b.shape[0]:
        return True
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match (only row-vector broadcast is supported)")


def _reduce_to_row(g: np.ndarray) -> np.ndarray:
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def add(a: Tensor, b: Tensor) -> Tensor:
    bc = _broadcast_pair("add", a, b)

    def back(g):
        return g, (_reduce_to_row(g) if bc else g)

    return _emit("add", a.data + b.data, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    bc = _broadcast_pair("sub", a, b)

    def back(g):
        return g, -(_reduce_to_row(g) if bc else g)

    return _emit("sub", a.data - b.data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    bc = _broadcast_pair("mul", a, b)
    A, B = a.data, b.data

    def back(g):
        ga = g * B if _need(a) else None
        gb = None
        if _need(b):
            gb = _reduce_to_row(g * A) if bc else g * A
        return ga, gb

    return _emit("mul", A * B, (a, b), back)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", x.data * c, (x,), lambda g: (g * c,))


def add_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Add a constant (non-differentiable) array of the same shape."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape != x.shape:
        raise ShapeError(f"add_const: {x.shape} vs {c.shape}")
    return _emit("add_const", x.data + c, (x,), lambda g: (g,))


def mask_rows(x: Tensor, keep: np.ndarray) -> Tensor:
    """Zero the rows of a 2-D tensor where ``keep`` is False."""
    _check_2d("mask_rows", x)
    k = np.asarray(keep, dtype=bool).reshape(-1, 1)
    if k.shape[0] != x.shape[0]:
        raise ShapeError(f"row mask of length {k.shape[0]} for {x.shape[0]} rows")
    return _emit("mask_rows", np.where(k, x.data, 0.0), (x,), lambda g: (np.where(k, g, 0.0),))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum", np.array([x.data.sum()]), (x,), lambda g: (np.full(shape, g[0]),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    shape = x.shape
    return _emit("mean", np.array([x.data.sum() / n]), (x,), lambda g: (np.full(shape, g[0] / n),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _emit("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def swish(x: Tensor) -> Tensor:
    z = x.data
    s = _sigmoid(z)
    return _emit("swish", z * s, (x,), lambda g: (g * (s + z * s * (1.0 - s)),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _emit("relu", np.where(pos, x.data, 0.0), (x,), lambda g: (np.where(pos, g, 0.0),))


def glu(x: Tensor) -> Tensor:
    """Split the last axis in half: ``first * sigmoid(second)``."""
    c2 = x.shape[-1]
    if c2 % 2:
        raise ShapeError(f"glu needs an even last dimension, got {c2}")
    c = c2 // 2
    a = x.data[..., :c]
    s = _sigmoid(x.data[..., c:])

    def back(g):
        return (np.concatenate([g * s, g * a * s * (1.0 - s)], axis=-1),)

    return _emit("glu", a * s, (x,), back)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None (evaluation) or rate is 0."""
    if rng is None or rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _emit("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# -- softmax family ----------------------------------------------------------

def _softmax(z: np.ndarray, axis: int, mask: np.ndarray | None) -> np.ndarray:
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != z.shape:
            raise ShapeError(f"mask shape {mask.shape} does not match logits {z.shape}")
        if not mask.any(axis=axis).all():
            raise ValueError("softmax mask leaves a slice with no valid entry")
        z = np.where(mask, z, -np.inf)
    # in place after the first subtraction: keeps scratch at one extra buffer
    e = z - z.max(axis=axis, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=axis, keepdims=True)
    return e


def _softmax_op(name: str, x: Tensor, axis: int, mask) -> Tensor:
    _check_2d(name, x)
    y = _softmax(x.data, axis, mask)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit(name, y, (x,), back)


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along each row; ``mask`` False entries get probability 0."""
    return _softmax_op("softmax_rows", x, 1, mask)


def softmax_cols(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax down each column; ``mask`` False entries get probability 0."""
    return _softmax_op("softmax_cols", x, 0, mask)


def log_softmax_rows(x: Tensor) -> Tensor:
    _check_2d("log_softmax_rows", x)
    z = x.data
    m = z.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _emit("log_softmax_rows", out, (x,), back)


# -- normalisation -----------------------------------------------------------

def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    _check_2d("layernorm", x)
    d = x.shape[1]
    if d < 2:
        raise ShapeError("layernorm needs at least 2 features")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm affine shapes {gain.shape}, {bias.shape} for width {d}")
    z = x.data
    mu = z.mean(axis=1, keepdims=True)
    xc = z - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G = gain.data

    def back(g):
        gg = (g * xhat).sum(axis=0) if _need(gain) else None
        gb = g.sum(axis=0) if _need(bias) else None
        gx = None
        if _need(x):
            dxhat = g * G
            gx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return gx, gg, gb

    return _emit("layernorm", xhat * G + bias.data, (x, gain, bias), back)


def batchnorm_infer(x: Tensor, mean: Tensor, var: Tensor, gain: Tensor, bias: Tensor,
                    eps: float = BN_EPS) -> Tensor:
    """Per-channel normalisation with supplied statistics (columns are channels)."""
    _check_2d("batchnorm_infer", x)
    if (var.data < 0).any():
        raise ValueError("batchnorm variance must be non-negative")
    inv = 1.0 / np.sqrt(var.data + eps)
    xhat = (x.data - mean.data) * inv
    G = gain.data

    def back(g):
        gx = g * G * inv if _need(x) else None
        gg = (g * xhat).sum(axis=0) if _need(gain) else None
        gb = g.sum(axis=0) if _need(bias) else None
        gm = -(g * G * inv).sum(axis=0) if _need(mean) else None
        gv = (g * G * (x.data - mean.data)).sum(axis=0) * (-0.5) * inv ** 3 if _need(var) else None
        return gx, gm, gv, gg, gb

    return _emit("batchnorm_infer", xhat * G + bias.data, (x, mean, var, gain, bias), back)


def batchnorm_train(x: Tensor, gain: Tensor, bias: Tensor, eps: float = BN_EPS) -> Tensor:
    """Per-channel normalisation with statistics of the current input over time."""
    _check_2d("batchnorm_train", x)
    z = x.data
    n = z.shape[0]
    mu = z.mean(axis=0)
    xc = z - mu
    var = (xc * xc).mean(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G = gain.data

    def back(g):
        gg = (g * xhat).sum(axis=0) if _need(gain) else None
        gb = g.sum(axis=0) if _need(bias) else None
        gx = None
        if _need(x):
            dxhat = g * G
            gx = inv * (dxhat - dxhat.sum(axis=0) / n - xhat * (dxhat * xhat).sum(axis=0) / n)
        return gx, gg, gb

    return _emit("batchnorm_train", xhat * G + bias.data, (x, gain, bias), back)


# -- convolutions ------------------------------------------------------------

def _im2col(z: np.ndarray, stride: int, ho: int, wo: int) -> np.ndarray:
    c, _, _ = z.shape
    s0, s1, s2 = z.strides
    win = np.lib.stride_tricks.as_strided(
        z, shape=(ho, wo, c, 3, 3), strides=(s1 * stride, s2 * stride, s0, s1, s2))
    return win.reshape(ho * wo, c * 9)


def conv2d(x: Tensor, kernels_: Tensor, stride: int) -> Tensor:
    """Valid 3x3 cross-correlation of a ``c_in x H x W`` input."""
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if len(x.shape) != 3 or len(kernels_.shape) != 4 or kernels_.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d expects c_in x H x W input and c_out x c_in x 3 x 3 kernels, "
                         f"got {x.shape} and {kernels_.shape}")
    c_in, h, w = x.shape
    c_out = kernels_.shape[0]
    if kernels_.shape[1] != c_in:
        raise ShapeError(f"conv2d channel mismatch: input {c_in}, kernels {kernels_.shape[1]}")
    if h < 3 or w < 3:
        raise ShapeError(f"conv2d input {h}x{w} is smaller than the 3x3 kernel")
    ho = (h - 3) // stride + 1
    wo = (w - 3) // stride + 1
    cols = np.ascontiguousarray(_im2col(x.data, stride, ho, wo))
    kmat = kernels_.data.reshape(c_out, c_in * 9)
    out = kernels.matmul(cols, np.ascontiguousarray(kmat.T))  # (ho*wo) x c_out

    def back(g):
        gk = gx = None
        gm = np.ascontiguousarray(g.reshape(c_out, ho * wo).T)
        if _need(kernels_):
            gk = kernels.matmul(np.ascontiguousarray(gm.T), cols).reshape(kernels_.shape)
        if _need(x):
            gcols = kernels.matmul(gm, np.ascontiguousarray(kmat)).reshape(ho, wo, c_in, 3, 3)
            gx = np.zeros(x.shape)
            for di in range(3):
                for dj in range(3):
                    gx[:, di:di + stride * (ho - 1) + 1:stride, dj:dj + stride * (wo - 1) + 1:stride] += \
                        gcols[:, :, :, di, dj].transpose(2, 0, 1)
        return gx, gk

    return _emit("conv2d", out.T.reshape(c_out, ho, wo), (x, kernels_), back)


def depthwise_conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel 1-D cross-correlation over time with zero SAME padding.

    ``x`` is ``T x c``; ``kernel`` is ``c x k`` with ``k`` odd.
    """
    _check_2d("depthwise_conv1d", x)
    t, c = x.shape
    if len(kernel.shape) != 2 or kernel.shape[0] != c:
        raise ShapeError(f"depthwise kernel {kernel.shape} for {c} channels")
    k = kernel.shape[1]
    if k % 2 == 0:
        raise ValueError(f"depthwise kernel width must be odd, got {k}")
    r = k // 2
    xp = np.zeros((t + 2 * r, c))
    xp[r:r + t] = x.data
    K = kernel.data
    out = np.zeros((t, c))
    for j in range(k):
        out += xp[j:j + t] * K[:, j]

    def back(g):
        gx = gk = None
        if _need(x):
            gp = np.zeros((t + 2 * r, c))
            for j in range(k):
                gp[j:j + t] += g * K[:, j]
            gx = gp[r:r + t]
        if _need(kernel):
            gk = np.stack([(g * xp[j:j + t]).sum(axis=0) for j in range(k)], axis=1)
        return gx, gk

    return _emit("depthwise_conv1d", out, (x, kernel), back)


__all__ = [
    "NonFiniteError", "add", "add_const", "batchnorm_infer", "batchnorm_train", "concat_cols",
    "conv2d", "depthwise_conv1d", "dropout", "glu", "layernorm", "log_softmax_rows", "mask_rows",
    "matmul", "mean_all", "mul", "permute", "pointwise_conv", "relu", "reshape", "scale", "select",
    "sigmoid", "softmax_cols", "softmax_rows", "sub", "sum_all", "swish", "take_rows",
    "transpose",
]
