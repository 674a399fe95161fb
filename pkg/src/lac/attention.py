"""Multi-head dot-product attention and multi-head linear self-attention.

Both share :class:`AttentionParams`: ``H`` separate per-head projections of
shape ``d_m x d_k`` for queries, keys and values, plus a ``d_m x d_m`` output
projection. Linear attention normalises queries along rows and keys along
columns, then contracts ``keys^T @ values`` first so no ``T x T`` matrix ever
exists.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ops
from .core.tensor import ShapeError, Tensor


@dataclass
class AttentionParams:
    wq: list[Tensor]
    wk: list[Tensor]
    wv: list[Tensor]
    wo: Tensor

    def __post_init__(self) -> None:
        h = len(self.wq)
        if h == 0 or len(self.wk) != h or len(self.wv) != h:
            raise ShapeError("attention needs the same positive number of Q, K and V projections")
        d_m, d_k = self.wq[0].shape
        for w in (*self.wq, *self.wk, *self.wv):
            if w.shape != (d_m, d_k):
                raise ShapeError(f"head projection {w.shape}, expected {(d_m, d_k)}")
        if d_k * h != d_m:
            raise ShapeError(f"d_k * H must equal d_m: {d_k} * {h} != {d_m}")
        if self.wo.shape != (d_m, d_m):
            raise ShapeError(f"output projection {self.wo.shape}, expected {(d_m, d_m)}")

    @property
    def heads(self) -> int:
        return len(self.wq)

    @property
    def d_model(self) -> int:
        return self.wo.shape[0]

    @property
    def d_k(self) -> int:
        return self.wq[0].shape[1]

    def tensors(self) -> list[Tensor]:
        return [*self.wq, *self.wk, *self.wv, self.wo]

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, heads: int) -> "AttentionParams":
        if d_model % heads:
            raise ShapeError(f"d_model {d_model} not divisible by {heads} heads")
        d_k = d_model // heads
        bound = 1.0 / np.sqrt(d_model)

        def u(shape):
            return Tensor(rng.uniform(-bound, bound, shape))

        return cls([u((d_model, d_k)) for _ in range(heads)],
                   [u((d_model, d_k)) for _ in range(heads)],
                   [u((d_model, d_k)) for _ in range(heads)],
                   u((d_model, d_model)))


def _dot_head(xq: Tensor, xkv: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
              mask: np.ndarray | None) -> Tensor:
    d_k = wq.shape[1]
    q = ops.scale(ops.matmul(xq, wq), d_k ** -0.5)
    k = ops.matmul(xkv, wk)
    v = ops.matmul(xkv, wv)
    weights = ops.softmax_rows(ops.matmul(q, ops.transpose(k)), mask)
    return ops.matmul(weights, v)


def _attention_mask(mask, t_q: int, t_k: int) -> np.ndarray | None:
    if mask is None:
        return None
    m = np.asarray(mask, dtype=bool)
    if m.ndim == 1:
        if m.shape[0] != t_k:
            raise ShapeError(f"key padding mask of length {m.shape[0]} for {t_k} keys")
        m = np.broadcast_to(m, (t_q, t_k))
    if m.shape != (t_q, t_k):
        raise ShapeError(f"attention mask shape {m.shape}, expected {(t_q, t_k)}")
    return m


def _mha(xq: Tensor, xkv: Tensor, p: AttentionParams, mask) -> Tensor:
    if len(xq.shape) != 2 or xq.shape[1] != p.d_model:
        raise ShapeError(f"attention input {xq.shape} for model width {p.d_model}")
    if len(xkv.shape) != 2 or xkv.shape[1] != p.d_model:
        raise ShapeError(f"attention memory {xkv.shape} for model width {p.d_model}")
    if xkv.shape[0] == 0:
        raise ValueError("attention needs at least one key/value position")
    m = _attention_mask(mask, xq.shape[0], xkv.shape[0])
    heads = [_dot_head(xq, xkv, p.wq[h], p.wk[h], p.wv[h], m) for h in range(p.heads)]
    return ops.matmul(ops.concat_cols(heads), p.wo)


def mhsa(x: Tensor, params: AttentionParams, mask=None) -> Tensor:
    """Dot-product self-attention; ``mask`` is ``T x T`` or a length-``T`` key mask (True = visible)."""
    return _mha(x, x, params, mask)


def causal_mask(t: int) -> np.ndarray:
    return np.tril(np.ones((t, t), dtype=bool))


def masked_mhsa(x: Tensor, params: AttentionParams) -> Tensor:
    """Self-attention where position t only sees positions <= t."""
    return _mha(x, x, params, causal_mask(x.shape[0]))


def cross_mha(queries_from: Tensor, keys_values_from: Tensor, params: AttentionParams,
              memory_mask=None) -> Tensor:
    return _mha(queries_from, keys_values_from, params, memory_mask)


def linear_att(q: Tensor, k: Tensor, v: Tensor, pad_mask: np.ndarray | None = None) -> Tensor:
    """``softmax_rows(q / d_k^(1/4)) @ (softmax_cols(k / d_k^(1/4))^T @ v)``.

    ``pad_mask`` (length ``T``, True = valid) drops padded keys from the column
    softmax. Peak scratch is ``O(T * d_k + d_k^2)``.
    """
    if not (q.shape == k.shape and k.shape[0] == v.shape[0]) or len(q.shape) != 2:
        raise ShapeError(f"linear_att shapes q={q.shape} k={k.shape} v={v.shape}")
    d_k = q.shape[1]
    c = d_k ** -0.25
    col_mask = None
    if pad_mask is not None:
        pm = np.asarray(pad_mask, dtype=bool)
        if pm.shape != (k.shape[0],):
            raise ShapeError(f"padding mask of length {pm.shape} for {k.shape[0]} positions")
        col_mask = np.broadcast_to(pm[:, None], k.shape)
    a = ops.softmax_rows(ops.scale(q, c))
    b = ops.softmax_cols(ops.scale(k, c), col_mask)
    context = ops.matmul(ops.transpose(b), v)
    return ops.matmul(a, context)


def _linear_head(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, pad_mask) -> Tensor:
    return linear_att(ops.matmul(x, wq), ops.matmul(x, wk), ops.matmul(x, wv), pad_mask)


def mhlsa(x: Tensor, params: AttentionParams, pad_mask: np.ndarray | None = None) -> Tensor:
    """Multi-head linear self-attention; padded rows of the output are zeroed."""
    if len(x.shape) != 2 or x.shape[1] != params.d_model:
        raise ShapeError(f"attention input {x.shape} for model width {params.d_model}")
    heads = [_linear_head(x, params.wq[h], params.wk[h], params.wv[h], pad_mask)
             for h in range(params.heads)]
    out = ops.matmul(ops.concat_cols(heads), params.wo)
    if pad_mask is not None:
        out = ops.mask_rows(out, pad_mask)
    return out


# Analytic cost model: one unit per multiply-accumulate in a matrix product and
# one unit per element for each scaling or softmax pass.

def mhsa_flops(t: int, d_model: int, heads: int) -> int:
    d_k = d_model // heads
    per_head = 3 * t * d_model * d_k + t * d_k + t * t * d_k + t * t + t * t * d_k
    return heads * per_head + t * d_model * d_model


def mhlsa_flops(t: int, d_model: int, heads: int) -> int:
    d_k = d_model // heads
    per_head = 3 * t * d_model * d_k + 2 * t * d_k + 2 * t * d_k + 2 * t * d_k * d_k
    return heads * per_head + t * d_model * d_model
