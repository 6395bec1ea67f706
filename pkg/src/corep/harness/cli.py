"""Command line entry points.

Exit codes: 0 success, 2 configuration/usage error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import sys

import numpy as np

from .. import numerics as nm
from ..causal_graphs import order_compatible, sample_subenv_family, verify_mag
from ..numerics import NumericsError
from .config import ConfigError, RunConfig, load_run_config, run_config_from_mapping
from .training import TrainingAbort, ablate, degree_sweep, export_graph, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _resolve_config(args) -> RunConfig:
    overrides = _parse_overrides(args.set)
    if args.config:
        return load_run_config(args.config, overrides)
    return run_config_from_mapping(overrides)


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    result = train(cfg, args.out, resume_from=args.resume)
    print(f"finished {result.iterations} iterations / {result.env_steps} env steps")
    print(f"final return (last-quarter mean): {result.final_return:.4f}")
    print(f"metrics: {result.metrics_path}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    rows = ablate(cfg, variants, args.out)
    width = max(len(r["variant"]) for r in rows)
    print(f"{'variant'.ljust(width)}  final_return  normalized")
    for row in rows:
        print(f"{row['variant'].ljust(width)}  {row['final_return']:12.4f}  "
              f"{row['normalized']:10.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _resolve_config(args)
    try:
        degrees = [float(v) for v in args.degrees.split(",") if v.strip()]
    except ValueError as err:
        raise ConfigError(f"--degrees expects comma-separated floats: {err}") from None
    rows = degree_sweep(cfg, degrees, args.out)
    print("degree  final_return  normalized")
    for row in rows:
        print(f"{row['degree']:6g}  {row['final_return']:12.4f}  "
              f"{row['normalized']:10.4f}")
    return EXIT_OK


def cmd_graph_export(args) -> int:
    try:
        state = np.array([float(v) for v in args.state.split(",")])
    except ValueError as err:
        raise ConfigError(f"--state expects comma-separated floats: {err}") from None
    core_path, general_path = export_graph(args.checkpoint, state, args.out)
    print(f"wrote {core_path}")
    print(f"wrote {general_path}")
    return EXIT_OK


def cmd_graph_verify(args) -> int:
    from pathlib import Path

    from ..causal_graphs import graph_to_text

    rng = np.random.default_rng(args.seed)
    failures = 0
    for trial in range(args.families):
        d_s = int(rng.integers(1, 8))
        d_h = int(rng.integers(1, min(9 - d_s, 8)))
        k = int(rng.integers(1, 5))
        p = float(rng.choice([0.2, 0.5, 0.8]))
        family = sample_subenv_family(rng, d_s, d_h, k, p)
        report = verify_mag(family.union_mag())
        ordered = order_compatible(family.canonical_order(), family.mags())
        if not (report.ok() and ordered):
            failures += 1
            print(f"trial {trial}: FAIL (ancestral={report.ancestral} "
                  f"maximal={report.maximal} order={ordered})")
        if trial == 0 and args.dump:
            outdir = Path(args.dump)
            outdir.mkdir(parents=True, exist_ok=True)
            for i, dag in enumerate(family.dags()):
                (outdir / f"dag_{i}.txt").write_text(graph_to_text(dag))
            for i, mag in enumerate(family.mags()):
                (outdir / f"mag_{i}.txt").write_text(graph_to_text(mag))
            (outdir / "union.txt").write_text(graph_to_text(family.union_mag()))
            print(f"wrote first sampled family to {outdir}")
    status = "PASS" if failures == 0 else "FAIL"
    print(f"{status}: {args.families - failures}/{args.families} sampled families "
          f"verified (union graph ancestral+maximal, order compatible)")
    return EXIT_OK if failures == 0 else 1


def cmd_selfcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    cases = {
        "exp": lambda a: nm.exp(a),
        "log": lambda a: nm.log(a),
        "tanh": lambda a: nm.tanh(a),
        "relu": lambda a: nm.relu(a),
        "leaky_relu": lambda a: nm.leaky_relu(a),
        "elu": lambda a: nm.elu(a),
        "row_softmax": lambda a: nm.row_softmax(a),
        "l1_norm": lambda a: nm.l1_norm(a),
        "sq_l2_norm": lambda a: nm.sq_l2_norm(a),
        "frobenius_norm": lambda a: nm.frobenius_norm(a),
        "clip": lambda a: nm.clip(a, -1.0, 1.0),
    }
    worst_overall = 0.0
    for name, build in cases.items():
        a = nm.var("a")
        out = build(a)
        expr = out if name in ("l1_norm", "sq_l2_norm", "frobenius_norm") else \
            nm.reduce_sum(nm.mul(out, nm.const(rng.uniform(-1, 1, (3, 4)))))
        worst = 0.0
        for _ in range(args.trials):
            lo, hi = (0.1, 2.0) if name == "log" else (-2.0, 2.0)
            worst = max(worst, nm.finite_difference_check(
                expr, {"a": rng.uniform(lo, hi, (3, 4))}, eps=1e-6))
        flag = "ok" if worst <= 1e-4 else "FAIL"
        print(f"{name:16s} max rel err {worst:.3e}  {flag}")
        worst_overall = max(worst_overall, worst)
    print(f"worst over all ops: {worst_overall:.3e}")
    return EXIT_OK if worst_overall <= 1e-4 else EXIT_NUMERICAL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="corep",
        description="Train and inspect causal-origin state representations "
                    "on toy non-stationary control tasks.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="run one training configuration")
    common(p)
    p.add_argument("--resume", help="checkpoint file to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="compare component-removal variants")
    common(p)
    p.add_argument("--variants", required=True,
                   help="comma-separated variant names")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="sweep the non-stationarity degree")
    common(p)
    p.add_argument("--degrees", required=True,
                   help="comma-separated degrees, e.g. 0.5,1,2")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("graph-export",
                       help="write branch adjacencies at a probe state")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--state", required=True,
                   help="comma-separated probe state")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_graph_export)

    p = sub.add_parser("graph-verify",
                       help="verify sampled families: union graphs are "
                            "maximal ancestral and order compatible")
    p.add_argument("--families", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dump", help="directory for the first family's graphs "
                                  "in the text edge-list format")
    p.set_defaults(func=cmd_graph_verify)

    p = sub.add_parser("selfcheck", help="gradient checks on every op kind")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAbort, NumericsError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
