"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from . import ops
from .tensor import Tape, Tensor, no_grad

DEFAULT_STEP = 1e-5


@dataclass
class GradcheckResult:
    max_rel_err: float
    per_tensor: list[float] = field(default_factory=list)
    coords_checked: int = 0

    def ok(self, tol: float) -> bool:
        return self.max_rel_err < tol


def rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max-norm relative error ``|a - n|_inf / max(|a|_inf, |n|_inf, floor)``."""
    a = np.asarray(analytic).ravel()
    n = np.asarray(numeric).ravel()
    if a.size == 0:
        return 0.0
    denom = max(np.abs(a).max(), np.abs(n).max(), floor)
    return float(np.abs(a - n).max() / denom)


@contextmanager
def _nudged(t: Tensor, flat_index: int, delta: float) -> Iterator[None]:
    buf = t.data
    buf.flags.writeable = True
    view = buf.reshape(-1)
    old = view[flat_index]
    view[flat_index] = old + delta
    buf.flags.writeable = False
    try:
        yield
    finally:
        buf.flags.writeable = True
        view[flat_index] = old
        buf.flags.writeable = False


def check_loss(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = DEFAULT_STEP,
               max_coords: int | None = None, seed: int = 0, floor: float = 1e-6) -> GradcheckResult:
    """Compare tape gradients of a scalar ``loss_fn()`` with central differences.

    ``params`` are leaf tensors read by ``loss_fn``. When ``max_coords`` is set,
    at most that many coordinates per tensor are sampled for the numeric side.
    """
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = True
    try:
        with Tape() as tape:
            loss = loss_fn()
        grads = tape.backward(loss)
    finally:
        for p, s in zip(params, saved):
            p.requires_grad = s

    rng = np.random.default_rng(seed)
    errs = []
    n_coords = 0
    with no_grad():
        for p in params:
            analytic = grads.get(p, np.zeros(p.shape)).reshape(-1)
            if max_coords is not None and p.size > max_coords:
                idx = np.sort(rng.choice(p.size, size=max_coords, replace=False))
            else:
                idx = np.arange(p.size)
            numeric = np.empty(idx.size)
            for k, i in enumerate(idx):
                with _nudged(p, int(i), h):
                    up = loss_fn().item()
                with _nudged(p, int(i), -h):
                    down = loss_fn().item()
                numeric[k] = (up - down) / (2.0 * h)
            errs.append(rel_err(analytic[idx], numeric, floor))
            n_coords += idx.size
    return GradcheckResult(max(errs) if errs else 0.0, errs, n_coords)


def check_op(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = DEFAULT_STEP,
             seed: int = 0, max_coords: int | None = None, floor: float = 1e-6) -> GradcheckResult:
    """Gradient check of a tensor-valued op through a fixed random projection."""
    leaves = [Tensor(t.data) for t in inputs]
    with no_grad():
        out_shape = fn(*leaves).shape
    proj = Tensor(np.random.default_rng(seed + 7919).standard_normal(out_shape))

    def loss():
        return ops.sum_all(ops.mul(fn(*leaves), proj))

    return check_loss(loss, leaves, h=h, max_coords=max_coords, seed=seed, floor=floor)
