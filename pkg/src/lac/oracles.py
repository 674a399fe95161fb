"""Slow, obviously-correct reference implementations.

These share no code with the production path: plain Python loops and
exhaustive enumeration only. Keep them small-input only.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def matmul_loop(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += float(a[i, p]) * float(b[p, j])
            out[i, j] = s
    return out


def _softmax_list(xs: list[float]) -> list[float]:
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    z = sum(e)
    return [v / z for v in e]


def dot_attention_loop(x, wq, wk, wv, wo, mask=None):
    """Multi-head dot-product attention with scalar loops; ``mask[t][s]`` True = visible."""
    x = np.asarray(x)
    t_len = x.shape[0]
    heads = len(wq)
    d_k = wq[0].shape[1]
    concat = np.zeros((t_len, heads * d_k))
    for h in range(heads):
        q = matmul_loop(x, wq[h])
        k = matmul_loop(x, wk[h])
        v = matmul_loop(x, wv[h])
        for t in range(t_len):
            keys = [s for s in range(t_len) if mask is None or mask[t][s]]
            logits = [sum(q[t, c] * k[s, c] for c in range(d_k)) / math.sqrt(d_k) for s in keys]
            w = _softmax_list(logits)
            for c in range(d_k):
                concat[t, h * d_k + c] = sum(wi * v[s, c] for wi, s in zip(w, keys))
    return matmul_loop(concat, wo)


def linear_attention_explicit(q, k, v):
    """Materialises the ``T x T`` implicit attention matrix, then multiplies V."""
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    d_k = q.shape[1]
    c = d_k ** -0.25
    a = np.exp(q * c - (q * c).max(axis=1, keepdims=True))
    a /= a.sum(axis=1, keepdims=True)
    b = np.exp(k * c - (k * c).max(axis=0, keepdims=True))
    b /= b.sum(axis=0, keepdims=True)
    implicit = a @ b.T
    return implicit @ v, implicit


def ctc_brute_force(log_probs: np.ndarray, labels, blank: int) -> float:
    """-log sum of path probabilities over every V^T path that collapses to ``labels``."""
    t_len, v = log_probs.shape
    target = tuple(labels)
    total = -math.inf
    for path in itertools.product(range(v), repeat=t_len):
        out = []
        prev = None
        for k in path:
            if k != prev and k != blank:
                out.append(k)
            prev = k
        if tuple(out) == target:
            score = sum(log_probs[t, k] for t, k in enumerate(path))
            total = np.logaddexp(total, score)
    return -float(total)


def ctc_brute_force_all(log_probs: np.ndarray, blank: int) -> dict[tuple[int, ...], float]:
    """Same enumeration, bucketed by collapsed label: ``{labels: nll}`` for every reachable label."""
    t_len, v = log_probs.shape
    buckets: dict[tuple[int, ...], float] = {}
    for path in itertools.product(range(v), repeat=t_len):
        out = []
        prev = None
        for k in path:
            if k != prev and k != blank:
                out.append(k)
            prev = k
        key = tuple(out)
        score = sum(log_probs[t, k] for t, k in enumerate(path))
        buckets[key] = np.logaddexp(buckets.get(key, -math.inf), score)
    return {k: -float(s) for k, s in buckets.items()}


def depthwise_loop(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    t_len, c = x.shape
    k = kernel.shape[1]
    r = k // 2
    out = np.zeros((t_len, c))
    for t in range(t_len):
        for ch in range(c):
            s = 0.0
            for j in range(k):
                src = t + j - r
                if 0 <= src < t_len:
                    s += x[src, ch] * kernel[ch, j]
            out[t, ch] = s
    return out


def conv2d_loop(x: np.ndarray, kern: np.ndarray, stride: int) -> np.ndarray:
    c_in, h, w = x.shape
    c_out = kern.shape[0]
    ho = (h - 3) // stride + 1
    wo = (w - 3) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                s = 0.0
                for c in range(c_in):
                    for di in range(3):
                        for dj in range(3):
                            s += x[c, i * stride + di, j * stride + dj] * kern[o, c, di, dj]
                out[o, i, j] = s
    return out


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Numeric gradient of scalar ``f`` at ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g
