"""Feed-forward modules: the dense FFN and its low-rank factorisation (LFFN).

Neither has bias terms, so the closed-form counts below equal the number of
stored scalars exactly. Flop counts are multiply-accumulates per the whole
``T x d`` input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ops
from .core.tensor import ShapeError, Tensor


def _uniform(rng: np.random.Generator, shape: tuple[int, int]) -> Tensor:
    bound = 1.0 / np.sqrt(shape[0])
    return Tensor(rng.uniform(-bound, bound, shape))


@dataclass
class FfnParams:
    w1: Tensor
    w2: Tensor

    def __post_init__(self) -> None:
        d, d_ff = self.w1.shape
        if self.w2.shape != (d_ff, d):
            raise ShapeError(f"FFN shapes {self.w1.shape}, {self.w2.shape}")

    def tensors(self) -> list[Tensor]:
        return [self.w1, self.w2]

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, d_ff: int) -> "FfnParams":
        return cls(_uniform(rng, (d, d_ff)), _uniform(rng, (d_ff, d)))


@dataclass
class LffnParams:
    e1: Tensor
    d1: Tensor
    e2: Tensor
    d2: Tensor

    def __post_init__(self) -> None:
        d, d_bn = self.e1.shape
        d_ff = self.d1.shape[1]
        expected = [(d, d_bn), (d_bn, d_ff), (d_ff, d_bn), (d_bn, d)]
        got = [t.shape for t in self.tensors()]
        if got != expected:
            raise ShapeError(f"LFFN factor shapes {got}, expected {expected}")

    @property
    def bottleneck(self) -> int:
        return self.e1.shape[1]

    def tensors(self) -> list[Tensor]:
        return [self.e1, self.d1, self.e2, self.d2]

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, d_ff: int, d_bn: int) -> "LffnParams":
        return cls(_uniform(rng, (d, d_bn)), _uniform(rng, (d_bn, d_ff)),
                   _uniform(rng, (d_ff, d_bn)), _uniform(rng, (d_bn, d)))


def ffn(x: Tensor, p: FfnParams, dropout_rate: float = 0.0,
        rng: np.random.Generator | None = None) -> Tensor:
    h = ops.dropout(ops.swish(ops.matmul(x, p.w1)), dropout_rate, rng)
    return ops.matmul(h, p.w2)


def lffn(x: Tensor, p: LffnParams, dropout_rate: float = 0.0,
         rng: np.random.Generator | None = None) -> Tensor:
    # (x E1) D1, never x (E1 D1): the thin product first is the cheap order
    h = ops.matmul(ops.matmul(x, p.e1), p.d1)
    h = ops.dropout(ops.swish(h), dropout_rate, rng)
    return ops.matmul(ops.matmul(h, p.e2), p.d2)


def count_params_ffn(d: int, d_ff: int) -> int:
    return 2 * d * d_ff


def count_params_lffn(d: int, d_ff: int, d_bn: int) -> int:
    return 2 * d_bn * (d + d_ff)


def count_flops_ffn(d: int, d_ff: int, t: int) -> int:
    return t * count_params_ffn(d, d_ff)


def count_flops_lffn(d: int, d_ff: int, d_bn: int, t: int) -> int:
    return t * count_params_lffn(d, d_ff, d_bn)


def check_bottleneck(d: int, d_ff: int, d_bn: int) -> None:
    if not 0 < d_bn < min(d, d_ff):
        raise ValueError(f"d_bn={d_bn} must be in (0, min(d, d_ff)={min(d, d_ff)}) "
                         "or the factorisation stops saving parameters")
