"""Connectionist temporal classification: loss, best-path decoding, joint scores."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import ops
from .core.tensor import ShapeError, Tensor


@dataclass(frozen=True)
class CtcConfig:
    blank_id: int = 3
    train_weight: float = 0.3
    decode_weight: float = 0.6

    def __post_init__(self) -> None:
        for name in ("train_weight", "decode_weight"):
            w = getattr(self, name)
            if not 0.0 <= w <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {w}")


def min_frames(labels: Sequence[int]) -> int:
    """Shortest input that can emit ``labels``: one frame each plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _extend(labels: Sequence[int], blank: int) -> np.ndarray:
    ext = np.full(2 * len(labels) + 1, blank, dtype=np.int64)
    ext[1::2] = labels
    return ext


def _can_skip(ext: np.ndarray, blank: int) -> np.ndarray:
    # state s may be entered from s-2
    skip = np.zeros(ext.size, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    return skip


def _forward(lp: np.ndarray, ext: np.ndarray, skip: np.ndarray) -> np.ndarray:
    t_len = lp.shape[0]
    s_len = ext.size
    alpha = np.full((t_len, s_len), -np.inf)
    alpha[0, 0] = lp[0, ext[0]]
    if s_len > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + lp[t, ext]
    return alpha


def _backward(lp: np.ndarray, ext: np.ndarray, skip: np.ndarray) -> np.ndarray:
    # beta[t, s]: log prob of emitting frames t+1.. given state s at t
    t_len = lp.shape[0]
    s_len = ext.size
    beta = np.full((t_len, s_len), -np.inf)
    beta[-1, -1] = 0.0
    if s_len > 1:
        beta[-1, -2] = 0.0
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1] + lp[t + 1, ext]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc
    return beta


def _validate(log_probs: Tensor, labels: Sequence[int], blank: int) -> list[int]:
    if len(log_probs.shape) != 2:
        raise ShapeError(f"log_probs must be T x V, got {log_probs.shape}")
    t_len, v = log_probs.shape
    if not 0 <= blank < v:
        raise ValueError(f"blank id {blank} outside vocabulary of size {v}")
    labels = [int(x) for x in labels]
    if any(x == blank for x in labels):
        raise ValueError("labels must not contain the blank id")
    if any(not 0 <= x < v for x in labels):
        raise IndexError(f"label ids must lie in [0, {v})")
    need = min_frames(labels)
    if t_len < need:
        raise ValueError(f"{t_len} frames cannot align {len(labels)} labels; at least {need} needed")
    return labels


def ctc_loss(log_probs: Tensor, labels: Sequence[int], blank: int = 3) -> Tensor:
    """Negative log-likelihood of ``labels`` summed over all CTC alignments.

    ``log_probs`` rows are per-frame log scores; they need not be normalised,
    the recursion works with any finite values.
    """
    labels = _validate(log_probs, labels, blank)
    lp = log_probs.data
    ext = _extend(labels, blank)
    skip = _can_skip(ext, blank)
    alpha = _forward(lp, ext, skip)
    last = alpha[-1, -1] if ext.size == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    nll = -float(last)

    def back(g):
        beta = _backward(lp, ext, skip)
        occ = np.exp(alpha + beta + nll)
        grad = np.zeros(lp.shape)
        for s, k in enumerate(ext):
            grad[:, k] -= occ[:, s]
        return (g[0] * grad,)

    return ops.emit("ctc_loss", np.array([nll]), (log_probs,), back)


def ctc_greedy_decode(log_probs: Tensor | np.ndarray, blank: int = 3) -> list[int]:
    """Best path: per-frame argmax, merge repeats, drop blanks."""
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    out: list[int] = []
    prev = None
    for k in np.argmax(lp, axis=1):
        k = int(k)
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


def joint_loss(att_nll, ctc_nll, cfg: CtcConfig = CtcConfig()):
    """``w * ctc + (1 - w) * att`` with the training weight; works on floats or Tensors."""
    w = cfg.train_weight
    if isinstance(att_nll, Tensor):
        return ops.add(ops.scale(ctc_nll, w), ops.scale(att_nll, 1.0 - w))
    return w * ctc_nll + (1.0 - w) * att_nll


def joint_score(att_lp: float, ctc_lp: float, cfg: CtcConfig = CtcConfig()) -> float:
    """Decoding score ``w * ctc + (1 - w) * att`` with the decoding weight."""
    w = cfg.decode_weight
    return w * ctc_lp + (1.0 - w) * att_lp
