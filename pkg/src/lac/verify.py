"""Self-check suites runnable from the command line.

Each suite returns a list of :class:`Check` records; ``run`` collects them and
the CLI turns the result into a JSON report and an exit status.
"""

from __future__ import annotations

import itertools
import json
import math
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import model as lac_model
from . import oracles
from .attention import (AttentionParams, causal_mask, linear_att, masked_mhsa, mhlsa,
                        mhlsa_flops, mhsa, mhsa_flops)
from .common import NormParams
from .core import kernels, ops
from .core.gradcheck import check_loss, check_op
from .core.tensor import Tape, TapeError, Tensor, no_grad, track_workspace
from .ctc import ctc_loss
from .decoder import DecoderBlockParams, decoder_block
from .encoder import BlockParams, encoder_block
from .feedforward import FfnParams, LffnParams, ffn, lffn
from .frontend import positional_encoding, read_features, subsampled_length, write_features

OP_TOL = 1e-5
BLOCK_TOL = 1e-4
E2E_TOL = 1e-3

TINY_CONFIG = lac_model.ModelConfig(n_enc=2, n_dec=1, heads=2, d_model=8, d_ff=16, d_bn=4,
                                    k_conv=3, vocab=5, dropout=0.0, frontend_channels=2, n_mels=9)
TINY_FRAMES = 11


@dataclass
class Check:
    name: str
    suite: str
    tolerance: float
    observed: float
    passed: bool
    detail: str = ""


SUITES: dict[str, Callable[[], list[Check]]] = {}


def suite(name: str):
    def register(fn):
        SUITES[name] = fn
        return fn
    return register


def _below(suite_name: str, name: str, observed: float, tol: float, detail: str = "") -> Check:
    return Check(name, suite_name, tol, float(observed), bool(observed < tol), detail)


def _at_most(suite_name: str, name: str, observed: float, tol: float, detail: str = "") -> Check:
    return Check(name, suite_name, tol, float(observed), bool(observed <= tol), detail)


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-300))


def _t(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape))


def _raises(fn, exc) -> bool:
    try:
        fn()
    except exc:
        return True
    return False


# -- suites ------------------------------------------------------------------

@suite("tensor")
def _tensor() -> list[Check]:
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((7, 13)), rng.standard_normal((13, 5))
    out = [_at_most("tensor", "matmul_bit_equal_scalar_loop",
                    np.abs(kernels.matmul(a, b) - oracles.matmul_loop(a, b)).max(), 0.0)]
    cases = {
        "matmul": (ops.matmul, [_t(rng, 4, 3), _t(rng, 3, 5)]),
        "add_row": (ops.add, [_t(rng, 4, 3), _t(rng, 3)]),
        "sub": (ops.sub, [_t(rng, 4, 3), _t(rng, 4, 3)]),
        "pointwise_conv": (ops.pointwise_conv, [_t(rng, 4, 3), _t(rng, 3, 6)]),
        "mul": (ops.mul, [_t(rng, 4, 3), _t(rng, 4, 3)]),
        "transpose": (ops.transpose, [_t(rng, 4, 3)]),
        "softmax_rows": (ops.softmax_rows, [_t(rng, 4, 5)]),
        "softmax_cols": (ops.softmax_cols, [_t(rng, 4, 5)]),
        "log_softmax_rows": (ops.log_softmax_rows, [_t(rng, 4, 5)]),
        "layernorm": (lambda x, g, b: ops.layernorm(x, g, b), [_t(rng, 4, 6), _t(rng, 6), _t(rng, 6)]),
        "swish": (ops.swish, [_t(rng, 4, 3)]),
        "sigmoid": (ops.sigmoid, [_t(rng, 4, 3)]),
        "glu": (ops.glu, [_t(rng, 4, 6)]),
        "relu": (ops.relu, [Tensor(rng.uniform(0.1, 1, (4, 3)) * rng.choice([-1, 1], (4, 3)))]),
        "depthwise_conv1d": (ops.depthwise_conv1d, [_t(rng, 6, 3), _t(rng, 3, 5)]),
        "conv2d_stride2": (lambda x, k: ops.conv2d(x, k, 2), [_t(rng, 2, 7, 7), _t(rng, 3, 2, 3, 3)]),
        "batchnorm_infer": (ops.batchnorm_infer, [_t(rng, 5, 3), _t(rng, 3),
                                                  Tensor(rng.uniform(0.5, 2, 3)), _t(rng, 3), _t(rng, 3)]),
        "batchnorm_train": (ops.batchnorm_train, [_t(rng, 5, 3), _t(rng, 3), _t(rng, 3)]),
    }
    for name, (fn, inputs) in cases.items():
        out.append(_below("tensor", f"gradcheck_{name}", check_op(fn, inputs).max_rel_err, OP_TOL))

    x = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum_all(ops.mul(x, x))
    tape.backward(loss)
    rejected = _raises(lambda: tape.backward(loss), TapeError)
    out.append(Check("double_backward_rejected", "tensor", 0.0, 0.0 if rejected else 1.0, rejected))
    return out


@suite("attention")
def _attention() -> list[Check]:
    rng = np.random.default_rng(2)
    x = rng.standard_normal((6, 8))
    p = AttentionParams.init(rng, 8, 2)
    get = lambda ts: [t.data for t in ts]  # noqa: E731
    ref = oracles.dot_attention_loop(x, get(p.wq), get(p.wk), get(p.wv), p.wo.data)
    out = [_below("attention", "mhsa_vs_scalar_loop", _rel(mhsa(Tensor(x), p).data, ref), 1e-12)]
    ref_c = oracles.dot_attention_loop(x, get(p.wq), get(p.wk), get(p.wv), p.wo.data, causal_mask(6))
    out.append(_below("attention", "masked_mhsa_vs_scalar_loop",
                      _rel(masked_mhsa(Tensor(x), p).data, ref_c), 1e-12))

    worst_reorder = worst_rows = 0.0
    for _ in range(20):
        t, d_k = int(rng.integers(1, 129)), int(rng.integers(1, 33))
        q, k, v = (rng.standard_normal((t, d_k)) for _ in range(3))
        explicit, implicit = oracles.linear_attention_explicit(q, k, v)
        got = linear_att(Tensor(q), Tensor(k), Tensor(v)).data
        worst_reorder = max(worst_reorder, _rel(got, explicit))
        worst_rows = max(worst_rows, float(np.abs(implicit.sum(axis=1) - 1).max()))
    out.append(_below("attention", "linear_reordering_equivalence", worst_reorder, 1e-10))
    out.append(_below("attention", "implicit_rows_stochastic", worst_rows, 1e-10))

    pl = AttentionParams.init(rng, 16, 2)
    ws = []
    for t in (64, 128):
        xt = Tensor(rng.standard_normal((t, 16)))
        with no_grad(), track_workspace() as w:
            mhlsa(xt, pl)
        ws.append(w.peak)
    out.append(_at_most("attention", "mhlsa_workspace_ratio", ws[1] / ws[0], 2.5))
    out.append(_below("attention", "gradcheck_mhlsa",
                      check_op(lambda xx: mhlsa(xx, p), [_t(rng, 5, 8)]).max_rel_err, OP_TOL))
    out.append(_below("attention", "gradcheck_mhsa",
                      check_op(lambda xx: mhsa(xx, p), [_t(rng, 5, 8)]).max_rel_err, OP_TOL))
    return out


@suite("feedforward")
def _feedforward() -> list[Check]:
    rng = np.random.default_rng(3)
    d, d_ff = 12, 20
    w1, w2 = rng.standard_normal((d, d_ff)), rng.standard_normal((d_ff, d))
    # full rank: W1 = W1 @ I, W2 = I @ W2
    lp = LffnParams(Tensor(w1), Tensor(np.eye(d_ff)), Tensor(np.eye(d_ff)), Tensor(w2))
    x = Tensor(rng.standard_normal((9, d)))
    dense = ffn(x, FfnParams(Tensor(w1), Tensor(w2))).data
    out = [_below("feedforward", "lffn_full_rank_matches_ffn", _rel(lffn(x, lp).data, dense), 1e-12)]
    p = LffnParams.init(rng, d, d_ff, 4)
    out.append(_at_most("feedforward", "lffn_param_count",
                        abs(sum(t.size for t in p.tensors()) - 2 * 4 * (d + d_ff)), 0))
    out.append(_below("feedforward", "gradcheck_lffn",
                      check_op(lambda xx: lffn(xx, p), [_t(rng, 3, d)]).max_rel_err, OP_TOL))
    return out


@suite("encoder")
def _encoder() -> list[Check]:
    rng = np.random.default_rng(4)
    out = []
    for kind in ("linear", "dot"):
        p = BlockParams.init(rng, 8, 2, 12, 4, k_conv=3)
        x = _t(rng, 5, 8)
        proj = _t(rng, 5, 8)
        res = check_loss(lambda: ops.sum_all(ops.mul(encoder_block(x, p, kind), proj)),
                         [x, *p.tensors()], max_coords=6)
        out.append(_below("encoder", f"gradcheck_block_{kind}", res.max_rel_err, BLOCK_TOL))
    return out


@suite("frontend")
def _frontend() -> list[Check]:
    pe = positional_encoding(4, 6).data
    row0 = np.array([0.0, 1.0] * 3)
    out = [_at_most("frontend", "pe_row0_alternating", np.abs(pe[0] - row0).max(), 0.0),
           _at_most("frontend", "pe_1_0_is_sin1", abs(pe[1, 0] - math.sin(1.0)), 2 ** -52)]
    out.append(_at_most("frontend", "subsampled_length_11", abs(subsampled_length(11) - 2), 0))
    feats = np.random.default_rng(5).standard_normal((13, 80))
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "f.lacf"
        write_features(path, feats)
        err = np.abs(read_features(path).data - feats.astype(np.float32)).max()
    out.append(_at_most("frontend", "feature_file_round_trip", err, 0.0))
    return out


@suite("decoder")
def _decoder() -> list[Check]:
    rng = np.random.default_rng(6)
    p = DecoderBlockParams.init(rng, 8, 2, 12, 4)
    y, enc, proj = _t(rng, 4, 8), _t(rng, 5, 8), _t(rng, 4, 8)
    res = check_loss(lambda: ops.sum_all(ops.mul(decoder_block(y, enc, p), proj)),
                     [y, enc, *p.tensors()], max_coords=6)
    out = [_below("decoder", "gradcheck_block", res.max_rel_err, BLOCK_TOL)]
    base = decoder_block(y, enc, p).data
    bumped = y.numpy()
    bumped[3] += 1.0
    moved = np.abs(decoder_block(Tensor(bumped), enc, p).data[:3] - base[:3]).max()
    out.append(_at_most("decoder", "causal_future_invisible", moved, 0.0))
    return out


def ctc_exhaustive(max_t: int = 6, max_l: int = 3, max_v: int = 4, seed: int = 0,
                   blank: int = 0) -> tuple[float, int]:
    """Worst absolute error of ``ctc_loss`` against enumeration, and the case count."""
    rng = np.random.default_rng(seed)
    worst, cases = 0.0, 0
    for v in range(2, max_v + 1):
        for t in range(1, max_t + 1):
            lp = rng.standard_normal((t, v))
            lp -= np.logaddexp.reduce(lp, axis=1, keepdims=True)
            brute = oracles.ctc_brute_force_all(lp, blank)
            symbols = [s for s in range(v) if s != blank]
            for n in range(max_l + 1):
                for labels in itertools.product(symbols, repeat=n):
                    if labels not in brute:
                        continue
                    got = ctc_loss(Tensor(lp), list(labels), blank).item()
                    worst = max(worst, abs(got - brute[labels]))
                    cases += 1
    return worst, cases


@suite("ctc")
def _ctc() -> list[Check]:
    worst, cases = ctc_exhaustive()
    out = [_below("ctc", "exhaustive_T6_L3_V4", worst, 1e-10, f"{cases} cases")]
    lp = Tensor(np.random.default_rng(7).standard_normal((6, 4)))
    res = check_loss(lambda: ctc_loss(lp, [1, 1, 2], 0), [lp])
    out.append(_below("ctc", "gradcheck_ctc_loss", res.max_rel_err, OP_TOL))
    return out


def tiny_batch(seed: int = 0, cfg: lac_model.ModelConfig = TINY_CONFIG):
    rng = np.random.default_rng(seed)
    return Tensor(rng.standard_normal((TINY_FRAMES, cfg.n_mels))), [4]


@suite("model")
def _model() -> list[Check]:
    m = lac_model.build(TINY_CONFIG, seed=0)
    out = [_at_most("model", "count_matches_layout",
                    abs(lac_model.count_params(m).total - lac_model.count_params_config(TINY_CONFIG).total), 0)]
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.lacc"
        lac_model.save(m, path)
        back = lac_model.load(path)
    diff = max(float(np.abs(a.data - b.data).max()) for a, b in zip(m.tensors(), back.tensors()))
    out.append(_at_most("model", "checkpoint_round_trip", diff, 0.0))
    feats, tokens = tiny_batch()
    res = check_loss(lambda: lac_model.forward(m, feats, tokens).joint,
                     [feats, *m.tensors()], max_coords=4)
    out.append(_below("model", "gradcheck_end_to_end", res.max_rel_err, E2E_TOL,
                      f"{res.coords_checked} coordinates"))
    return out


@suite("bench")
def _bench() -> list[Check]:
    out = []
    for t in (256, 1024, 4096):
        out.append(_at_most("bench", f"mhlsa_flops_linear_T{t}",
                            abs(mhlsa_flops(2 * t, 256, 4) - 2 * mhlsa_flops(t, 256, 4)), 0))
        d_k = 64
        quad = lambda tt: 4 * (2 * tt * tt * d_k + tt * tt)  # noqa: E731
        lin = lambda tt: mhsa_flops(tt, 256, 4) - quad(tt)  # noqa: E731
        out.append(_at_most("bench", f"mhsa_flops_quadratic_term_T{t}",
                            abs(lin(2 * t) - 2 * lin(t)), 0))
    return out


# -- driver ------------------------------------------------------------------

def run(suites: Sequence[str] | None = None) -> list[Check]:
    names = list(SUITES) if not suites else list(suites)
    unknown = [s for s in names if s not in SUITES]
    if unknown:
        raise KeyError(f"unknown suites {unknown}; choose from {list(SUITES)}")
    checks: list[Check] = []
    for name in names:
        checks += SUITES[name]()
    return checks


def report(checks: Sequence[Check]) -> str:
    return json.dumps({"passed": all(c.passed for c in checks),
                       "n_checks": len(checks),
                       "n_failed": sum(not c.passed for c in checks),
                       "checks": [asdict(c) for c in checks]}, indent=2)
