"""Command-line entry point: ``lac bench | params | verify | demo | init | features``."""

from __future__ import annotations

import argparse
import json
import sys
from typing import Sequence

import numpy as np

from . import bench, model, verify
from .core import set_num_threads
from .frontend import FeatureFileError, write_features

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text: str) -> list[str]:
    return [v for v in text.replace(",", " ").split() if v]


def _load_config(path: str | None) -> model.ModelConfig:
    cfg = model.ModelConfig() if path is None else model.ModelConfig.from_file(path)
    return cfg.validate()


def cmd_bench(args) -> int:
    set_num_threads(args.threads)
    progress = None
    if args.verbose:
        def progress(rec):
            print(f"{rec.variant:<6} T={rec.T:<6} {rec.wall_ns / 1e6:10.2f} ms", file=sys.stderr)
    records, fits = bench.bench_attention(args.variants, args.lengths, args.d_model, args.heads,
                                          repeats=args.repeats, progress=progress)
    if args.out == "json":
        print(bench.records_json(records, fits))
    else:
        sys.stdout.write(bench.records_csv(records))
        for f in fits:
            print(f"# {f.variant} slope={f.slope:.4f} r2={f.r2:.4f} over T={f.lengths}", file=sys.stderr)
    return EXIT_OK


def cmd_params(args) -> int:
    report = bench.report_params(_load_config(args.config), sweep=args.sweep_dbn)
    print(json.dumps(report, indent=2) if args.format == "json" else bench.params_text(report))
    return EXIT_OK


def cmd_verify(args) -> int:
    checks = verify.run(args.suite)
    print(verify.report(checks))
    for c in checks:
        if not c.passed:
            print(f"FAIL {c.suite}/{c.name}: observed {c.observed:.3g}, tolerance {c.tolerance:.3g}",
                  file=sys.stderr)
    return EXIT_OK if all(c.passed for c in checks) else EXIT_FAIL


def cmd_demo(args) -> int:
    out = bench.demo(args.feats, args.ckpt, args.tokens)
    if args.format == "json":
        print(json.dumps(out, indent=2))
    else:
        print(f"frames {out['frames']} -> encoder steps {out['encoder_steps']}")
        print(f"attention NLL  {out['att_nll']:.6f}")
        print(f"CTC NLL        {out['ctc_nll']:.6f}")
        print(f"joint          {out['joint']:.6f}")
        print(f"CTC hypothesis {out['ctc_hypothesis']}")
    return EXIT_OK


def cmd_init(args) -> int:
    m = model.build(_load_config(args.config), seed=args.seed)
    model.save(m, args.out)
    print(f"wrote {args.out}: {model.count_params(m).total:,} parameters")
    return EXIT_OK


def cmd_features(args) -> int:
    rng = np.random.default_rng(args.seed)
    write_features(args.out, rng.standard_normal((args.frames, args.n_mels)))
    print(f"wrote {args.out}: {args.frames} x {args.n_mels}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lac", description="Linear attention conformer toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bench", help="time MHLSA vs MHSA over a grid of sequence lengths")
    b.add_argument("--variants", type=_str_list, default=list(bench.ATTENTION_VARIANTS))
    b.add_argument("--lengths", type=_int_list, default=list(bench.DEFAULT_LENGTHS))
    b.add_argument("--d-model", type=int, default=256)
    b.add_argument("--heads", type=int, default=4)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--out", choices=("csv", "json"), default="csv")
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("-v", "--verbose", action="store_true")
    b.set_defaults(fn=cmd_bench)

    q = sub.add_parser("params", help="parameter counts per variant")
    q.add_argument("--config", help="key = value config file (defaults to the reference setup)")
    q.add_argument("--sweep-dbn", action="store_true", help="add the d_bn sweep rows")
    q.add_argument("--format", choices=("text", "json"), default="text")
    q.set_defaults(fn=cmd_params)

    v = sub.add_parser("verify", help="run self-check suites; JSON report on stdout")
    v.add_argument("--suite", action="append", choices=list(verify.SUITES),
                   help="repeatable; default runs every suite")
    v.set_defaults(fn=cmd_verify)

    d = sub.add_parser("demo", help="forward one utterance through a checkpoint")
    d.add_argument("--feats", required=True)
    d.add_argument("--ckpt", required=True)
    d.add_argument("--tokens", type=_int_list, required=True)
    d.add_argument("--format", choices=("text", "json"), default="text")
    d.set_defaults(fn=cmd_demo)

    i = sub.add_parser("init", help="write a randomly initialised checkpoint")
    i.add_argument("--config")
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out", required=True)
    i.set_defaults(fn=cmd_init)

    f = sub.add_parser("features", help="write a random feature file")
    f.add_argument("--frames", type=int, default=100)
    f.add_argument("--n-mels", type=int, default=80)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True)
    f.set_defaults(fn=cmd_features)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (model.ConfigError, model.CheckpointError, FeatureFileError, FileNotFoundError,
            ValueError, IndexError) as e:
        print(f"lac {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
