"""CNN subsampling frontend, sinusoidal positional encoding and feature files.

Two valid-padded 3x3 stride-2 convolutions map ``T_raw x 80`` fbank frames to
``T = subsampled_length(T_raw)`` steps; the ``channels x freq'`` maps are
flattened per step and embedded to the model width. With 80 mel bins the
frequency axis shrinks 80 -> 39 -> 19, so the embedding input is ``256 * 19 = 4864``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .common import EVAL, RunMode
from .core import ops
from .core.tensor import ShapeError, Tensor

N_MELS = 80
MIN_FRAMES = 7
FEATURE_MAGIC = b"LACF"


def conv_out_len(n: int, stride: int = 2) -> int:
    return (n - 3) // stride + 1


def subsampled_length(t_raw: int) -> int:
    if t_raw < MIN_FRAMES:
        raise ValueError(f"need at least {MIN_FRAMES} frames for two stride-2 3x3 convolutions, got {t_raw}")
    return conv_out_len(conv_out_len(t_raw))


def embed_input_width(channels: int, n_mels: int = N_MELS) -> int:
    return channels * conv_out_len(conv_out_len(n_mels))


def positional_encoding(t: int, d_e: int) -> Tensor:
    """``p[i, 2j] = sin(i / 10000^(2j/d_e))``, ``p[i, 2j+1] = cos(...)``."""
    if d_e % 2:
        raise ValueError(f"positional encoding width must be even, got {d_e}")
    pos = np.arange(t, dtype=np.float64)[:, None]
    rate = 10000.0 ** (np.arange(0, d_e, 2, dtype=np.float64) / d_e)
    ang = pos / rate
    p = np.empty((t, d_e))
    p[:, 0::2] = np.sin(ang)
    p[:, 1::2] = np.cos(ang)
    return Tensor._wrap(p)


@dataclass
class FrontendParams:
    conv1: Tensor
    conv2: Tensor
    embed_w: Tensor
    embed_b: Tensor

    def __post_init__(self) -> None:
        c = self.conv1.shape[0]
        if self.conv1.shape != (c, 1, 3, 3) or self.conv2.shape != (c, c, 3, 3):
            raise ShapeError(f"frontend kernels {self.conv1.shape}, {self.conv2.shape}")
        if self.embed_b.shape != (self.embed_w.shape[1],):
            raise ShapeError(f"embedding bias {self.embed_b.shape} for width {self.embed_w.shape[1]}")

    @property
    def channels(self) -> int:
        return self.conv1.shape[0]

    @property
    def d_model(self) -> int:
        return self.embed_w.shape[1]

    def tensors(self) -> list[Tensor]:
        return [self.conv1, self.conv2, self.embed_w, self.embed_b]

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, channels: int = 256,
             n_mels: int = N_MELS) -> "FrontendParams":
        def u(shape, fan_in):
            b = 1.0 / np.sqrt(fan_in)
            return Tensor(rng.uniform(-b, b, shape))

        width = embed_input_width(channels, n_mels)
        return cls(u((channels, 1, 3, 3), 9), u((channels, channels, 3, 3), 9 * channels),
                   u((width, d_model), width), u((d_model,), width))


def frontend(feats: Tensor, p: FrontendParams, mode: RunMode = EVAL) -> Tensor:
    """conv -> ReLU -> conv -> ReLU -> flatten -> linear -> + positional encoding."""
    if len(feats.shape) != 2:
        raise ShapeError(f"features must be T_raw x n_mels, got {feats.shape}")
    t_raw, n_mels = feats.shape
    if t_raw < MIN_FRAMES or n_mels < MIN_FRAMES:
        raise ValueError(f"feature matrix {t_raw}x{n_mels} too short: need at least "
                         f"{MIN_FRAMES} frames (and mel bins)")
    expected = p.embed_w.shape[0]
    if embed_input_width(p.channels, n_mels) != expected:
        raise ShapeError(f"{n_mels} mel bins do not match embedding input width {expected}")
    h = ops.reshape(feats, (1, t_raw, n_mels))
    h = ops.relu(ops.conv2d(h, p.conv1, stride=2))
    h = ops.relu(ops.conv2d(h, p.conv2, stride=2))
    c, t, f = h.shape
    flat = ops.reshape(ops.permute(h, (1, 0, 2)), (t, c * f))
    emb = ops.add(ops.matmul(flat, p.embed_w), p.embed_b)
    x = ops.add_const(emb, positional_encoding(t, p.d_model).data)
    return mode.drop(x)


# -- feature files -----------------------------------------------------------

class FeatureFileError(ValueError):
    pass


def write_features(path: str | Path, feats: np.ndarray) -> None:
    """Write ``T_raw x n_mels`` features as ``LACF`` + u32 T + u32 n_mels + f32 LE data."""
    arr = np.asarray(feats, dtype="<f4")
    if arr.ndim != 2:
        raise ShapeError(f"features must be 2-D, got {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_features(path: str | Path) -> Tensor:
    path = Path(path)
    if path.suffix.lower() in (".csv", ".txt"):
        return read_features_csv(path)
    raw = path.read_bytes()
    if raw[:4] != FEATURE_MAGIC:
        raise FeatureFileError(f"{path}: not a feature file (missing LACF magic)")
    if len(raw) < 12:
        raise FeatureFileError(f"{path}: truncated header")
    t_raw, n_mels = struct.unpack("<II", raw[4:12])
    need = 12 + 4 * t_raw * n_mels
    if len(raw) != need:
        raise FeatureFileError(f"{path}: expected {need} bytes for {t_raw}x{n_mels}, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=12).reshape(t_raw, n_mels)
    return Tensor(data.astype(np.float64))


def read_features_csv(path: str | Path) -> Tensor:
    """One frame per non-empty line, comma separated."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                rows.append([float(v) for v in line.split(",")])
            except ValueError as e:
                raise FeatureFileError(f"{path}:{lineno}: {e}") from None
    if not rows or len({len(r) for r in rows}) != 1:
        raise FeatureFileError(f"{path}: frames must be non-empty with equal width")
    return Tensor(np.array(rows))
