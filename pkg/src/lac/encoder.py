"""Conformer-style encoder block with linear attention and low-rank FFNs.

    X~  = X   + 1/2 FF(X)
    X'  = X~  + Attn(X~)
    X'' = X'  + Conv(X')
    Y   = LayerNorm(X'' + 1/2 FF(X''))

With ``prenorm`` (the default) each sub-module also sees a layer-normalised
copy of its input, as in the Conformer baseline.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .attention import AttentionParams, mhlsa, mhsa
from .common import EVAL, NormParams, RunMode, layer_norm
from .core import ops
from .core.tensor import ShapeError, Tensor
from .feedforward import FfnParams, LffnParams, ffn, lffn

FeedForward = Union[LffnParams, FfnParams]
HALF_STEP = 0.5


@dataclass
class ConvModuleParams:
    pw_in: Tensor
    depthwise: Tensor
    bn_mean: Tensor
    bn_var: Tensor
    bn_gain: Tensor
    bn_bias: Tensor
    pw_out: Tensor
    norm: NormParams | None = None

    def __post_init__(self) -> None:
        d = self.pw_out.shape[0]
        if self.pw_in.shape != (d, 2 * d) or self.pw_out.shape != (d, d):
            raise ShapeError(f"conv module pointwise shapes {self.pw_in.shape}, {self.pw_out.shape}")
        if self.depthwise.shape[0] != d or self.depthwise.shape[1] % 2 == 0:
            raise ShapeError(f"depthwise kernel {self.depthwise.shape} must be d x odd")

    def tensors(self) -> list[Tensor]:
        out = [] if self.norm is None else self.norm.tensors()
        return out + [self.pw_in, self.depthwise, self.bn_mean, self.bn_var,
                      self.bn_gain, self.bn_bias, self.pw_out]

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, k_conv: int, prenorm: bool = True) -> "ConvModuleParams":
        def u(shape, fan_in):
            b = 1.0 / np.sqrt(fan_in)
            return Tensor(rng.uniform(-b, b, shape))

        return cls(u((d, 2 * d), d), u((d, k_conv), k_conv),
                   Tensor(np.zeros(d)), Tensor(np.ones(d)), Tensor(np.ones(d)), Tensor(np.zeros(d)),
                   u((d, d), d), NormParams.identity(d) if prenorm else None)


def conv_module(x: Tensor, p: ConvModuleParams, mode: RunMode = EVAL) -> Tensor:
    """[LayerNorm] -> pointwise d->2d -> GLU -> depthwise -> BatchNorm -> Swish -> pointwise d->d."""
    h = layer_norm(x, p.norm) if p.norm is not None else x
    h = ops.glu(ops.pointwise_conv(h, p.pw_in))
    h = ops.depthwise_conv1d(h, p.depthwise)
    if mode.batch_stats:
        h = ops.batchnorm_train(h, p.bn_gain, p.bn_bias)
    else:
        h = ops.batchnorm_infer(h, p.bn_mean, p.bn_var, p.bn_gain, p.bn_bias)
    h = ops.pointwise_conv(ops.swish(h), p.pw_out)
    return mode.drop(h)


def feed_forward(x: Tensor, p: FeedForward, mode: RunMode = EVAL) -> Tensor:
    if isinstance(p, LffnParams):
        return lffn(x, p, mode.dropout, mode.drop_rng)
    return ffn(x, p, mode.dropout, mode.drop_rng)


@dataclass
class BlockParams:
    ff_a: FeedForward
    att: AttentionParams
    conv: ConvModuleParams
    ff_b: FeedForward
    norm_final: NormParams
    norm_ff_a: NormParams | None = None
    norm_att: NormParams | None = None
    norm_ff_b: NormParams | None = None

    @property
    def prenorm(self) -> bool:
        return self.norm_att is not None

    def tensors(self) -> list[Tensor]:
        out: list[Tensor] = []
        for part in (self.norm_ff_a, self.ff_a, self.norm_att, self.att, self.conv,
                     self.norm_ff_b, self.ff_b, self.norm_final):
            if part is not None:
                out += part.tensors()
        return out

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, heads: int, d_ff: int, d_bn: int | None,
             k_conv: int = 15, prenorm: bool = True) -> "BlockParams":
        """``d_bn=None`` builds dense FFNs instead of low-rank ones."""
        def ff():
            return FfnParams.init(rng, d, d_ff) if d_bn is None else LffnParams.init(rng, d, d_ff, d_bn)

        def pre():
            return NormParams.identity(d) if prenorm else None

        norm_ff_a = pre()
        ff_a = ff()
        norm_att = pre()
        att = AttentionParams.init(rng, d, heads)
        conv = ConvModuleParams.init(rng, d, k_conv, prenorm)
        norm_ff_b = pre()
        ff_b = ff()
        return cls(ff_a, att, conv, ff_b, NormParams.identity(d), norm_ff_a, norm_att, norm_ff_b)


def _pre(x: Tensor, norm: NormParams | None) -> Tensor:
    return x if norm is None else layer_norm(x, norm)


def encoder_block(x: Tensor, p: BlockParams, attention: str = "linear", mode: RunMode = EVAL,
                  pad_mask: np.ndarray | None = None) -> Tensor:
    """One encoder block; ``attention`` is ``"linear"`` (MHLSA) or ``"dot"`` (MHSA)."""
    if attention not in ("linear", "dot"):
        raise ValueError(f"unknown attention kind {attention!r}")
    x1 = ops.add(x, ops.scale(feed_forward(_pre(x, p.norm_ff_a), p.ff_a, mode), HALF_STEP))
    h = _pre(x1, p.norm_att)
    a = mhlsa(h, p.att, pad_mask) if attention == "linear" else mhsa(h, p.att, pad_mask)
    x2 = ops.add(x1, mode.drop(a))
    x3 = ops.add(x2, conv_module(x2, p.conv, mode))
    x4 = ops.add(x3, ops.scale(feed_forward(_pre(x3, p.norm_ff_b), p.ff_b, mode), HALF_STEP))
    return layer_norm(x4, p.norm_final)
