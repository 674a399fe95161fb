"""Transformer decoder: causal self-attention, cross-attention, one feed-forward.

Decoder attention is always dot-product attention. The feed-forward module is
a full-step residual branch (coefficient 1), low-rank by default.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .attention import AttentionParams, cross_mha, masked_mhsa
from .common import EVAL, NormParams, RunMode, layer_norm
from .core import ops
from .core.tensor import ShapeError, Tensor
from .encoder import feed_forward
from .feedforward import FfnParams, LffnParams
from .frontend import positional_encoding

PAD, UNK, EOS, BLANK = 0, 1, 2, 3
N_RESERVED = 4


@dataclass
class DecoderBlockParams:
    self_att: AttentionParams
    cross_att: AttentionParams
    ff: Union[LffnParams, FfnParams]
    norm_self: NormParams
    norm_cross: NormParams
    norm_ff: NormParams

    def tensors(self) -> list[Tensor]:
        return [*self.norm_self.tensors(), *self.self_att.tensors(),
                *self.norm_cross.tensors(), *self.cross_att.tensors(),
                *self.norm_ff.tensors(), *self.ff.tensors()]

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, heads: int, d_ff: int,
             d_bn: int | None) -> "DecoderBlockParams":
        self_att = AttentionParams.init(rng, d, heads)
        cross_att = AttentionParams.init(rng, d, heads)
        ff = FfnParams.init(rng, d, d_ff) if d_bn is None else LffnParams.init(rng, d, d_ff, d_bn)
        return cls(self_att, cross_att, ff, NormParams.identity(d), NormParams.identity(d),
                   NormParams.identity(d))


@dataclass
class TokenEmbedding:
    table: Tensor
    out_proj: Tensor

    def __post_init__(self) -> None:
        v, d = self.table.shape
        if self.out_proj.shape != (d, v):
            raise ShapeError(f"output projection {self.out_proj.shape}, expected {(d, v)}")

    @property
    def vocab(self) -> int:
        return self.table.shape[0]

    def tensors(self) -> list[Tensor]:
        return [self.table, self.out_proj]


@dataclass
class Decoder:
    embedding: TokenEmbedding
    blocks: list[DecoderBlockParams]
    norm_out: NormParams


def decoder_block(y: Tensor, enc: Tensor, p: DecoderBlockParams, mode: RunMode = EVAL,
                  memory_mask: np.ndarray | None = None) -> Tensor:
    y = ops.add(y, mode.drop(masked_mhsa(layer_norm(y, p.norm_self), p.self_att)))
    y = ops.add(y, mode.drop(cross_mha(layer_norm(y, p.norm_cross), enc, p.cross_att, memory_mask)))
    return ops.add(y, feed_forward(layer_norm(y, p.norm_ff), p.ff, mode))


def decode_logits(tokens: Sequence[int], enc: Tensor, dec: Decoder, mode: RunMode = EVAL) -> Tensor:
    """Teacher-forced log-probabilities, one row of size V per input token."""
    ids = [int(t) for t in tokens]
    v = dec.embedding.vocab
    bad = [t for t in ids if not 0 <= t < v]
    if bad:
        raise IndexError(f"token ids {bad} outside vocabulary of size {v}")
    if not ids:
        raise ValueError("decoder needs at least one input token")
    d = dec.embedding.table.shape[1]
    y = ops.take_rows(dec.embedding.table, ids)
    y = mode.drop(ops.add_const(y, positional_encoding(len(ids), d).data))
    for block in dec.blocks:
        y = decoder_block(y, enc, block, mode)
    y = layer_norm(y, dec.norm_out)
    return ops.log_softmax_rows(ops.matmul(y, dec.embedding.out_proj))
