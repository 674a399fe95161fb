"""Attention scaling benchmarks, parameter reports and the demo forward pass."""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .attention import AttentionParams, mhlsa, mhlsa_flops, mhsa, mhsa_flops
from .core.tensor import Tensor, no_grad, track_workspace
from .ctc import ctc_greedy_decode
from .decoder import BLANK
from .frontend import read_features
from . import model as lac_model

ATTENTION_VARIANTS = {
    "MHLSA": (mhlsa, mhlsa_flops),
    "MHSA": (mhsa, mhsa_flops),
}
DEFAULT_LENGTHS = (256, 512, 1024, 2048, 4096, 8192)

# Published totals for the AISHELL-1 setup (vocabulary 4231), in parameters.
REFERENCE_TOTALS = {
    "LAC": 22.83e6,
    "LAC-LFFN+FFN": 45.10e6,
    "LAC-MHLSA+MHSA": 22.83e6,
    "Conformer": 45.15e6,
}
REFERENCE_SWEEP = {50: 17.07e6, 75: 19.95e6, 100: 22.83e6, 125: 25.71e6}
# (25.71M - 17.07M) / (125 - 50)
REFERENCE_SWEEP_SLOPE = 115_200
VARIANT_LOW_RANK = {k: v[1] for k, v in lac_model.VARIANTS.items()}


@dataclass
class BenchRecord:
    variant: str
    T: int
    wall_ns: int
    peak_workspace: int
    flops: int


@dataclass
class SlopeFit:
    variant: str
    slope: float
    r2: float
    lengths: list[int]


def fit_loglog(lengths: Sequence[int], times: Sequence[float]) -> tuple[float, float]:
    """Least-squares slope of log(time) against log(T), with R^2."""
    if len(lengths) < 4:
        raise ValueError(f"slope fit needs at least 4 points, got {len(lengths)}")
    lx = np.log(np.asarray(lengths, dtype=np.float64))
    ly = np.log(np.asarray(times, dtype=np.float64))
    slope, icpt = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + icpt)
    ss_tot = float(((ly - ly.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), r2


def fit_window(n: int) -> int:
    """Points used by the fit: the upper half of the grid, but never fewer than 4."""
    return min(n, max(4, math.ceil(n / 2)))


def measure_workspace(fn, x: Tensor, params: AttentionParams) -> int:
    with no_grad(), track_workspace() as ws:
        out = fn(x, params)
        del out
    return ws.peak


def bench_attention(variants: Sequence[str] = ("MHLSA", "MHSA"),
                    lengths: Sequence[int] = DEFAULT_LENGTHS, d_model: int = 256, heads: int = 4,
                    repeats: int = 5, warmup: int = 2, seed: int = 0,
                    progress=None) -> tuple[list[BenchRecord], list[SlopeFit]]:
    lengths = [int(t) for t in lengths]
    if len(lengths) < 6 or any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise ValueError("lengths must be strictly ascending with at least 6 points")
    if repeats < 5:
        raise ValueError("repeats must be at least 5")
    unknown = [v for v in variants if v not in ATTENTION_VARIANTS]
    if unknown:
        raise ValueError(f"unknown attention variants {unknown}; choose from {list(ATTENTION_VARIANTS)}")
    records: list[BenchRecord] = []
    fits: list[SlopeFit] = []
    for name in variants:
        fn, flop_fn = ATTENTION_VARIANTS[name]
        rows = []
        for t in lengths:
            rng = np.random.default_rng(seed + t)
            x = Tensor(rng.standard_normal((t, d_model)))
            params = AttentionParams.init(rng, d_model, heads)
            with no_grad():
                for _ in range(warmup):
                    fn(x, params)
                times = []
                for _ in range(repeats):
                    t0 = time.perf_counter_ns()
                    out = fn(x, params)
                    times.append(time.perf_counter_ns() - t0)
                    del out
            rec = BenchRecord(name, t, max(1, int(statistics.median(times))),
                              measure_workspace(fn, x, params), flop_fn(t, d_model, heads))
            rows.append(rec)
            if progress is not None:
                progress(rec)
        records += rows
        k = fit_window(len(rows))
        top = rows[-k:]
        slope, r2 = fit_loglog([r.T for r in top], [r.wall_ns for r in top])
        fits.append(SlopeFit(name, slope, r2, [r.T for r in top]))
    return records, fits


def records_csv(records: Sequence[BenchRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "T", "wall_ns", "peak_workspace", "flops"])
    for r in records:
        w.writerow([r.variant, r.T, r.wall_ns, r.peak_workspace, r.flops])
    return buf.getvalue()


def records_json(records: Sequence[BenchRecord], fits: Sequence[SlopeFit]) -> str:
    return json.dumps({"records": [asdict(r) for r in records],
                       "fits": [asdict(f) for f in fits]}, indent=2)


# -- parameter report --------------------------------------------------------

def report_params(cfg: lac_model.ModelConfig, sweep: bool = False) -> dict:
    """Counts for every variant (and optionally the d_bn sweep) without building models."""
    rows = []
    for variant in lac_model.VARIANTS:
        c = lac_model.count_params_config(cfg.replace(variant=variant))
        ref = REFERENCE_TOTALS.get(variant)
        rows.append({"variant": variant, "d_bn": cfg.d_bn if VARIANT_LOW_RANK[variant] else None,
                     "total": c.total, "reference": ref,
                     "rel_dev": None if ref is None else (c.total - ref) / ref,
                     "breakdown": c.breakdown})
    totals = {r["variant"]: r["total"] for r in rows}
    out = {"config": cfg.to_text(), "variants": rows,
           "ratio_lac_over_ffn": totals["LAC"] / totals["LAC-LFFN+FFN"]}
    if sweep:
        srows = []
        for d_bn in REFERENCE_SWEEP:
            c = lac_model.count_params_config(cfg.replace(variant="LAC", d_bn=d_bn))
            ref = REFERENCE_SWEEP[d_bn]
            srows.append({"variant": "LAC", "d_bn": d_bn, "total": c.total, "reference": ref,
                          "rel_dev": (c.total - ref) / ref, "breakdown": c.breakdown})
        out["sweep"] = srows
        out["sweep_slope"] = (srows[-1]["total"] - srows[0]["total"]) / (125 - 50)
        out["reference_sweep_slope"] = REFERENCE_SWEEP_SLOPE
    return out


def params_text(report: dict) -> str:
    lines = [f"{'variant':<16} {'d_bn':>5} {'total':>12} {'reference':>12} {'dev':>8}"]

    def row(r):
        ref = "-" if r["reference"] is None else f"{r['reference']:,.0f}"
        dev = "-" if r["rel_dev"] is None else f"{100 * r['rel_dev']:+.2f}%"
        d_bn = "-" if r["d_bn"] is None else str(r["d_bn"])
        return f"{r['variant']:<16} {d_bn:>5} {r['total']:>12,} {ref:>12} {dev:>8}"

    lines += [row(r) for r in report["variants"]]
    lines.append(f"ratio LAC / LAC-LFFN+FFN = {report['ratio_lac_over_ffn']:.4f}")
    if "sweep" in report:
        lines.append("")
        lines.append("d_bn sweep:")
        lines += [row(r) for r in report["sweep"]]
        lines.append(f"slope = {report['sweep_slope']:,.0f} params per unit d_bn "
                     f"(reference {report['reference_sweep_slope']:,})")
    lines.append("")
    lines.append("per-module breakdown (LAC):")
    for k, v in report["variants"][0]["breakdown"].items():
        lines.append(f"  {k:<20} {v:>12,}")
    return "\n".join(lines)


# -- demo --------------------------------------------------------------------

def demo(feats_path: str | Path, ckpt_path: str | Path, tokens: Sequence[int]) -> dict:
    m = lac_model.load(ckpt_path)
    feats = read_features(feats_path)
    with no_grad():
        r = lac_model.forward(m, feats, tokens)
    hyp = ctc_greedy_decode(r.ctc_log_probs, BLANK)
    return {"att_nll": r.att_nll.item(), "ctc_nll": r.ctc_nll.item(), "joint": r.joint.item(),
            "ctc_hypothesis": hyp, "frames": feats.shape[0], "encoder_steps": r.enc.shape[0]}
