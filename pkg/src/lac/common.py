"""Small containers shared across modules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ops
from .core.tensor import Tensor


@dataclass
class NormParams:
    gain: Tensor
    bias: Tensor

    def tensors(self) -> list[Tensor]:
        return [self.gain, self.bias]

    @classmethod
    def identity(cls, d: int) -> "NormParams":
        return cls(Tensor(np.ones(d)), Tensor(np.zeros(d)))


def layer_norm(x: Tensor, p: NormParams) -> Tensor:
    return ops.layernorm(x, p.gain, p.bias)


@dataclass
class RunMode:
    """Evaluation vs training behaviour.

    In evaluation mode dropout is the identity. ``batch_stats`` makes batch
    norm use statistics of the current utterance instead of stored ones.
    """

    train: bool = False
    dropout: float = 0.1
    rng: np.random.Generator | None = None
    batch_stats: bool = False

    @property
    def drop_rng(self) -> np.random.Generator | None:
        return self.rng if self.train else None

    def drop(self, x: Tensor) -> Tensor:
        return ops.dropout(x, self.dropout, self.drop_rng)


EVAL = RunMode()
