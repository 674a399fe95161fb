"""Full LAC model: frontend, encoder stack, CTC head and attention decoder.

Parameters are described once by :func:`param_layout` (ordered names, shapes
and initialisers). Building, counting without allocating, checkpoint loading
and serialisation all walk that same layout, so counts always equal the number
of stored scalars.
"""

from __future__ import annotations

import dataclasses
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .attention import AttentionParams
from .common import EVAL, NormParams, RunMode
from .core import ops
from .core.tensor import Tensor
from .ctc import CtcConfig, ctc_loss, joint_loss
from .decoder import BLANK, EOS, N_RESERVED, PAD, Decoder, DecoderBlockParams, TokenEmbedding, decode_logits
from .encoder import BlockParams, ConvModuleParams, encoder_block
from .feedforward import FfnParams, LffnParams
from .frontend import FrontendParams, embed_input_width, frontend

# variant -> (encoder attention kind, low-rank feed-forward?)
VARIANTS = {
    "LAC": ("linear", True),
    "Conformer": ("dot", False),
    "LAC-LFFN+FFN": ("linear", False),
    "LAC-MHLSA+MHSA": ("dot", True),
}

CHECKPOINT_MAGIC = b"LACC"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def normalize_variant(name: str) -> str:
    key = name.strip().replace("−", "-").replace(" ", "")
    for v in VARIANTS:
        if v.lower() == key.lower():
            return v
    raise ConfigError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}")


@dataclass(frozen=True)
class ModelConfig:
    n_enc: int = 12
    n_dec: int = 6
    heads: int = 4
    d_model: int = 256
    d_ff: int = 2048
    d_bn: int = 100
    k_conv: int = 15
    vocab: int = 4231
    dropout: float = 0.1
    prenorm: bool = True
    variant: str = "LAC"
    frontend_channels: int = 256
    n_mels: int = 80
    ctc_train_weight: float = 0.3
    ctc_decode_weight: float = 0.6

    @property
    def attention(self) -> str:
        return VARIANTS[normalize_variant(self.variant)][0]

    @property
    def low_rank(self) -> bool:
        return VARIANTS[normalize_variant(self.variant)][1]

    @property
    def ctc(self) -> CtcConfig:
        return CtcConfig(BLANK, self.ctc_train_weight, self.ctc_decode_weight)

    def problems(self) -> list[str]:
        out = []
        for name in ("n_enc", "n_dec", "heads", "d_model", "d_ff", "d_bn", "k_conv",
                     "frontend_channels"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be positive")
        if self.heads > 0 and self.d_model % self.heads:
            out.append(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.d_model % 2:
            out.append("d_model must be even for the positional encoding")
        if self.k_conv % 2 == 0:
            out.append(f"k_conv={self.k_conv} must be odd")
        if self.vocab <= N_RESERVED:
            out.append(f"vocab={self.vocab} must exceed the {N_RESERVED} reserved ids")
        if self.n_mels < 7:
            out.append("n_mels must be at least 7")
        if not 0.0 <= self.dropout < 1.0:
            out.append(f"dropout={self.dropout} must be in [0, 1)")
        for w in ("ctc_train_weight", "ctc_decode_weight"):
            if not 0.0 <= getattr(self, w) <= 1.0:
                out.append(f"{w} must be in [0, 1]")
        try:
            low_rank = self.low_rank
        except ConfigError as e:
            out.append(str(e))
        else:
            if low_rank and not self.d_bn < min(self.d_model, self.d_ff):
                out.append(f"d_bn={self.d_bn} must be below min(d_model, d_ff)={min(self.d_model, self.d_ff)}")
        return out

    def validate(self) -> "ModelConfig":
        probs = self.problems()
        if probs:
            raise ConfigError("invalid model config: " + "; ".join(probs))
        return self

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    # canonical text: one ``key = value`` per line in field order
    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        aliases = {"d_m": "d_model", "H": "heads", "vocab_size": "vocab"}
        kw = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            key = aliases.get(key, key)
            if key not in kinds:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            kind = kinds[key]
            try:
                if kind in ("bool", bool):
                    if val.lower() not in ("true", "false", "1", "0", "yes", "no"):
                        raise ValueError(val)
                    kw[key] = val.lower() in ("true", "1", "yes")
                elif kind in ("int", int):
                    kw[key] = int(val)
                elif kind in ("float", float):
                    kw[key] = float(val)
                else:
                    kw[key] = normalize_variant(val.strip("\"'")) if key == "variant" else val
            except ValueError:
                raise ConfigError(f"line {lineno}: bad value {val!r} for {key}") from None
        return cls(**kw)

    @classmethod
    def from_file(cls, path: str | Path) -> "ModelConfig":
        return cls.from_text(Path(path).read_text())


# -- layout ------------------------------------------------------------------

@dataclass(frozen=True)
class Slot:
    name: str
    shape: tuple[int, ...]
    init: str  # "uniform", "ones" or "zeros"
    fan_in: int = 1

    @property
    def size(self) -> int:
        return math.prod(self.shape)


def _u(name, shape, fan_in):
    return Slot(name, tuple(shape), "uniform", fan_in)


def _norm(prefix, d):
    return [Slot(f"{prefix}.gain", (d,), "ones"), Slot(f"{prefix}.bias", (d,), "zeros")]


def _att(prefix, d, heads):
    d_k = d // heads
    return ([_u(f"{prefix}.wq.{h}", (d, d_k), d) for h in range(heads)]
            + [_u(f"{prefix}.wk.{h}", (d, d_k), d) for h in range(heads)]
            + [_u(f"{prefix}.wv.{h}", (d, d_k), d) for h in range(heads)]
            + [_u(f"{prefix}.wo", (d, d), d)])


def _ff(prefix, cfg):
    d, d_ff, b = cfg.d_model, cfg.d_ff, cfg.d_bn
    if cfg.low_rank:
        return [_u(f"{prefix}.e1", (d, b), d), _u(f"{prefix}.d1", (b, d_ff), b),
                _u(f"{prefix}.e2", (d_ff, b), d_ff), _u(f"{prefix}.d2", (b, d), b)]
    return [_u(f"{prefix}.w1", (d, d_ff), d), _u(f"{prefix}.w2", (d_ff, d), d_ff)]


def _conv(prefix, cfg):
    d, k = cfg.d_model, cfg.k_conv
    out = _norm(f"{prefix}.norm", d) if cfg.prenorm else []
    return out + [
        _u(f"{prefix}.pw_in", (d, 2 * d), d),
        _u(f"{prefix}.depthwise", (d, k), k),
        Slot(f"{prefix}.bn_mean", (d,), "zeros"),
        Slot(f"{prefix}.bn_var", (d,), "ones"),
        Slot(f"{prefix}.bn_gain", (d,), "ones"),
        Slot(f"{prefix}.bn_bias", (d,), "zeros"),
        _u(f"{prefix}.pw_out", (d, d), d),
    ]


def param_layout(cfg: ModelConfig) -> list[Slot]:
    cfg.validate()
    d, c, v = cfg.d_model, cfg.frontend_channels, cfg.vocab
    width = embed_input_width(c, cfg.n_mels)
    slots = [
        _u("frontend.conv1", (c, 1, 3, 3), 9),
        _u("frontend.conv2", (c, c, 3, 3), 9 * c),
        _u("frontend.embed_w", (width, d), width),
        _u("frontend.embed_b", (d,), width),
    ]
    ff_name = "lffn" if cfg.low_rank else "ffn"
    for i in range(cfg.n_enc):
        p = f"enc.{i}"
        if cfg.prenorm:
            slots += _norm(f"{p}.norm_{ff_name}_a", d)
        slots += _ff(f"{p}.{ff_name}_a", cfg)
        if cfg.prenorm:
            slots += _norm(f"{p}.norm_att", d)
        slots += _att(f"{p}.att", d, cfg.heads)
        slots += _conv(f"{p}.conv", cfg)
        if cfg.prenorm:
            slots += _norm(f"{p}.norm_{ff_name}_b", d)
        slots += _ff(f"{p}.{ff_name}_b", cfg)
        slots += _norm(f"{p}.norm_final", d)
    slots.append(_u("ctc.proj", (d, v), d))
    slots.append(_u("dec.embed.table", (v, d), d))
    for i in range(cfg.n_dec):
        p = f"dec.{i}"
        slots += _norm(f"{p}.norm_self", d) + _att(f"{p}.self_att", d, cfg.heads)
        slots += _norm(f"{p}.norm_cross", d) + _att(f"{p}.cross_att", d, cfg.heads)
        slots += _norm(f"{p}.norm_{ff_name}", d) + _ff(f"{p}.{ff_name}", cfg)
    slots += _norm("dec.norm_out", d)
    slots.append(_u("dec.embed.out_proj", (d, v), d))
    return slots


# -- model -------------------------------------------------------------------

@dataclass
class Model:
    cfg: ModelConfig
    frontend: FrontendParams
    encoder: list[BlockParams]
    ctc_proj: Tensor
    decoder: Decoder
    names: list[str] = field(default_factory=list, repr=False)

    def tensors(self) -> list[Tensor]:
        out = list(self.frontend.tensors())
        for b in self.encoder:
            out += b.tensors()
        out.append(self.ctc_proj)
        out.append(self.decoder.embedding.table)
        for b in self.decoder.blocks:
            out += b.tensors()
        out += self.decoder.norm_out.tensors()
        out.append(self.decoder.embedding.out_proj)
        return out

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(zip(self.names, self.tensors()))


def _take(it, n=None):
    if n is None:
        return next(it)
    return [next(it) for _ in range(n)]


def assemble(cfg: ModelConfig, tensors: Sequence[Tensor]) -> Model:
    """Structure a flat, layout-ordered tensor list into a :class:`Model`."""
    layout = param_layout(cfg)
    if len(tensors) != len(layout):
        raise ValueError(f"expected {len(layout)} tensors, got {len(tensors)}")
    for slot, t in zip(layout, tensors):
        if t.shape != slot.shape:
            raise ValueError(f"{slot.name}: shape {t.shape}, layout says {slot.shape}")
    it = iter(tensors)
    h = cfg.heads

    def norm():
        return NormParams(_take(it), _take(it))

    def att():
        return AttentionParams(_take(it, h), _take(it, h), _take(it, h), _take(it))

    def ff():
        return LffnParams(*_take(it, 4)) if cfg.low_rank else FfnParams(*_take(it, 2))

    fe = FrontendParams(*_take(it, 4))
    blocks = []
    for _ in range(cfg.n_enc):
        n_a = norm() if cfg.prenorm else None
        ff_a = ff()
        n_att = norm() if cfg.prenorm else None
        a = att()
        cn = norm() if cfg.prenorm else None
        conv = ConvModuleParams(*_take(it, 7), norm=cn)
        n_b = norm() if cfg.prenorm else None
        ff_b = ff()
        blocks.append(BlockParams(ff_a, a, conv, ff_b, norm(), n_a, n_att, n_b))
    ctc_proj = _take(it)
    table = _take(it)
    dec_blocks = []
    for _ in range(cfg.n_dec):
        ns, sa = norm(), att()
        nc, ca = norm(), att()
        nf, f = norm(), ff()
        dec_blocks.append(DecoderBlockParams(sa, ca, f, ns, nc, nf))
    norm_out = norm()
    out_proj = _take(it)
    dec = Decoder(TokenEmbedding(table, out_proj), dec_blocks, norm_out)
    for slot, t in zip(layout, tensors):
        t.name = slot.name
    return Model(cfg, fe, blocks, ctc_proj, dec, [s.name for s in layout])


def build(cfg: ModelConfig, seed: int = 0) -> Model:
    """Initialise every parameter from one seeded generator, in layout order."""
    layout = param_layout(cfg)
    rng = np.random.default_rng(seed)
    tensors = []
    for slot in layout:
        if slot.init == "uniform":
            b = 1.0 / math.sqrt(slot.fan_in)
            arr = rng.uniform(-b, b, slot.shape)
        elif slot.init == "ones":
            arr = np.ones(slot.shape)
        else:
            arr = np.zeros(slot.shape)
        tensors.append(Tensor._wrap(arr))
    return assemble(cfg, tensors)


# -- parameter accounting ----------------------------------------------------

GROUPS = ("frontend", "encoder.ff", "encoder.attention", "encoder.conv", "encoder.norm", "ctc",
          "decoder.embedding", "decoder.attention", "decoder.ff", "decoder.norm", "decoder.output")


def _group(name: str) -> str:
    parts = name.split(".")
    if parts[0] == "frontend":
        return "frontend"
    if parts[0] == "ctc":
        return "ctc"
    if parts[0] == "enc":
        sub = parts[2]
        if sub == "att":
            return "encoder.attention"
        if sub == "conv":
            return "encoder.conv"
        if sub.startswith("norm"):
            return "encoder.norm"
        return "encoder.ff"
    if parts[1] == "embed":
        return "decoder.embedding" if parts[2] == "table" else "decoder.output"
    if parts[1] == "norm_out":
        return "decoder.norm"
    sub = parts[2]
    if sub.endswith("_att"):
        return "decoder.attention"
    if sub.startswith("norm"):
        return "decoder.norm"
    return "decoder.ff"


@dataclass
class ParamCount:
    total: int
    breakdown: dict[str, int]


def _tally(items: Iterable[tuple[str, int]]) -> ParamCount:
    groups = OrderedDict((g, 0) for g in GROUPS)
    total = 0
    for name, n in items:
        groups[_group(name)] += n
        total += n
    return ParamCount(total, dict(groups))


def count_params(m: Model) -> ParamCount:
    return _tally((n, t.size) for n, t in m.named_parameters())


def count_params_config(cfg: ModelConfig) -> ParamCount:
    """Same numbers as ``count_params(build(cfg))`` without allocating anything."""
    return _tally((s.name, s.size) for s in param_layout(cfg))


def n_feedforward_modules(cfg: ModelConfig) -> int:
    return 2 * cfg.n_enc + cfg.n_dec


# -- forward -----------------------------------------------------------------

@dataclass
class ForwardResult:
    att_nll: Tensor
    ctc_nll: Tensor
    joint: Tensor
    ctc_log_probs: Tensor
    enc: Tensor


def encode(m: Model, feats: Tensor, mode: RunMode = EVAL) -> Tensor:
    x = frontend(feats, m.frontend, mode)
    for block in m.encoder:
        x = encoder_block(x, block, m.cfg.attention, mode)
    return x


def check_tokens(tokens: Sequence[int], vocab: int) -> list[int]:
    ids = [int(t) for t in tokens]
    for t in ids:
        if not 0 <= t < vocab:
            raise IndexError(f"token id {t} outside vocabulary of size {vocab}")
        if t in (PAD, EOS, BLANK):
            raise ValueError(f"token id {t} is reserved (PAD={PAD}, EOS={EOS}, blank={BLANK})")
    return ids


def forward(m: Model, feats: Tensor, tokens: Sequence[int], mode: RunMode | None = None) -> ForwardResult:
    """Teacher-forced attention NLL, CTC NLL and their joint combination."""
    mode = mode or RunMode(dropout=m.cfg.dropout)
    ids = check_tokens(tokens, m.cfg.vocab)
    enc = encode(m, feats, mode)
    ctc_lp = ops.log_softmax_rows(ops.matmul(enc, m.ctc_proj))
    ctc_nll = ctc_loss(ctc_lp, ids, BLANK)
    dec_in = [EOS] + ids
    targets = ids + [EOS]
    lp = decode_logits(dec_in, enc, m.decoder, mode)
    att_nll = ops.scale(ops.sum_all(ops.select(lp, range(len(targets)), targets)), -1.0)
    joint = joint_loss(att_nll, ctc_nll, m.cfg.ctc)
    return ForwardResult(att_nll, ctc_nll, joint, ctc_lp, enc)


# -- checkpoints -------------------------------------------------------------

def save(m: Model, path: str | Path) -> None:
    cfg_bytes = m.cfg.to_text().encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(cfg_bytes)))
        fh.write(cfg_bytes)
        for name, t in m.named_parameters():
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack(f"<I{len(t.shape)}I", len(t.shape), *t.shape))
            fh.write(t.data.astype("<f8").tobytes())


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated at byte {len(self.raw)} (wanted {n} more)")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    @property
    def done(self) -> bool:
        return self.pos == len(self.raw)


def load(path: str | Path) -> Model:
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (missing LACC magic)")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    try:
        cfg = ModelConfig.from_text(r.take(r.u32()).decode())
        layout = param_layout(cfg)
    except (UnicodeDecodeError, ConfigError) as e:
        raise CheckpointError(f"{path}: bad config header: {e}") from None
    tensors = []
    for slot in layout:
        if r.done:
            raise CheckpointError(f"{path}: truncated, missing parameter {slot.name}")
        try:
            name = r.take(r.u32()).decode()
        except UnicodeDecodeError:
            raise CheckpointError(f"{path}: corrupt parameter name") from None
        if name != slot.name:
            raise CheckpointError(f"{path}: parameter {name!r} where {slot.name!r} expected")
        rank = r.u32()
        if rank > 4:
            raise CheckpointError(f"{path}: {name} has rank {rank}")
        dims = tuple(r.u32() for _ in range(rank))
        if dims != slot.shape:
            raise CheckpointError(f"{path}: {name} has shape {dims}, config implies {slot.shape}")
        arr = np.frombuffer(r.take(8 * slot.size), dtype="<f8").astype(np.float64).reshape(dims)
        try:
            tensors.append(Tensor._wrap(arr))
        except FloatingPointError:
            raise CheckpointError(f"{path}: {name} contains non-finite values") from None
    if not r.done:
        raise CheckpointError(f"{path}: {len(raw) - r.pos} trailing bytes after last parameter")
    return assemble(cfg, tensors)
