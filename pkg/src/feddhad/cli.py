"""Command-line entry point: ``run``, ``sweep``, ``oracle`` and ``verify``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import errors
from .config import METHODS, parse_config

log = logging.getLogger("feddhad")

EXIT_CODES = {
    "config": 2,
    "structural": 3,
    "numerical": 4,
    "capacity": 5,
    "domain": 6,
    "io": 7,
    "error": 1,
}
EXIT_VERIFY_FAILED = 8


def _setup_logging() -> None:
    level = os.environ.get("FEDDHAD_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def parse_seeds(text: str) -> list[int]:
    """``"1..5"`` or ``"1,3,7"``."""
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            seeds = list(range(int(lo), int(hi) + 1))
        else:
            seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise errors.ConfigError(f"cannot parse seeds {text!r}; use 1..5 or 1,2,3") from None
    if not seeds:
        raise errors.ConfigError(f"empty seed list {text!r}")
    return seeds


def _overrides(args, method=None, seed=None) -> list[str]:
    out = list(args.override or [])
    method = method if method is not None else getattr(args, "method", None)
    seed = seed if seed is not None else getattr(args, "seed", None)
    if method is not None:
        out.append(f"experiment.method={method}")
    if seed is not None:
        out.append(f"experiment.seed={seed}")
    return out


def _run_one(config_path, overrides, out_dir) -> dict:
    from .simulation import run_experiment

    config = parse_config(config_path, overrides)
    return run_experiment(config, out_dir).summary()


def cmd_run(args) -> int:
    summary = _run_one(args.config, _overrides(args), args.out)
    print(
        f"{summary['method']} seed {summary['seed']}: final accuracy {summary['final_accuracy']:.4f}, "
        f"{summary['total_mflops']:.1f} MFLOPs, {summary['wall_clock_s']:.1f} s simulated"
    )
    if args.out:
        print(f"outputs written to {args.out}")
    return 0


def cmd_sweep(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise errors.ConfigError(f"unknown methods {unknown}; choose from {', '.join(METHODS)}")
    seeds = parse_seeds(args.seeds)
    jobs = []
    for m in methods:
        for s in seeds:
            out = Path(args.out) / m / f"seed{s}"
            jobs.append((args.config, _overrides(args, m, s), out))
    # validate every configuration before starting any work
    for path, ov, _ in jobs:
        parse_config(path, ov)
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            summaries = list(pool.map(_run_one, *zip(*jobs)))
    else:
        summaries = [_run_one(*job) for job in jobs]
    for (_, _, out), s in zip(jobs, summaries):
        print(f"{s['method']:8s} seed {s['seed']:3d}  accuracy {s['final_accuracy']:.4f}  -> {out}")
    return 0


def cmd_oracle(args) -> int:
    from .simulation import correlation_study

    study = correlation_study(
        args.devices,
        args.concentration,
        per_class_count=args.per_class,
        cluster_spread=args.spread,
        training_budget=args.budget,
        seed=args.seed if args.seed is not None else 0,
    )
    report = {
        "devices": args.devices,
        "concentration": args.concentration,
        "pearson_r": study.r,
        "p_value": study.p,
        "converged_fraction": study.converged_fraction,
        "js": study.js.tolist(),
        "gamma": study.gamma.tolist(),
    }
    print(f"pearson r = {study.r:.4f}, p = {study.p:.3e} over {args.devices} devices")
    if args.out:
        from .simulation import _atomic_write

        path = Path(args.out) / "oracle.json"
        _atomic_write(path, json.dumps(report, indent=2) + "\n")
        print(f"report written to {path}")
    return 0


def cmd_verify(args) -> int:
    from .verify import run_checks

    results = run_checks()
    for name, ok, detail in results:
        line = f"{'PASS' if ok else 'FAIL'}  {name}"
        if detail and (args.verbose or not ok):
            line += f"  [{detail}]"
        print(line)
    failed = sum(not ok for _, ok, _ in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 0 if failed == 0 else EXIT_VERIFY_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feddhad", description="Federated learning simulator with heterogeneity-aware aggregation and adaptive dropout.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, method=True):
        p.add_argument("--config", help="TOML configuration file")
        p.add_argument("--seed", type=int, help="override experiment.seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--override", action="append", metavar="KEY=VALUE", help="set a config key (repeatable)")
        if method:
            p.add_argument("--method", choices=METHODS, help="override experiment.method")

    p = sub.add_parser("run", help="run one experiment")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a grid over methods and seeds")
    common(p, method=False)
    p.add_argument("--methods", required=True, help="comma-separated method ids")
    p.add_argument("--seeds", required=True, help="seed range like 1..5 or a list like 1,2,3")
    p.add_argument("--jobs", type=int, default=1, help="parallel processes")
    p.set_defaults(func=cmd_sweep, seed=None)

    p = sub.add_parser("oracle", help="JS divergence vs ground-truth non-IID correlation study")
    p.add_argument("--devices", type=int, default=100)
    p.add_argument("--concentration", type=float, default=0.5)
    p.add_argument("--per-class", type=int, default=3000)
    p.add_argument("--spread", type=float, default=1.0, help="cluster spread of the synthetic pool")
    p.add_argument("--budget", type=int, default=500, help="optimizer iterations per fit")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("verify", help="run the formula checks and the weighting-inequality witness")
    p.add_argument("-v", "--verbose", action="store_true", help="show details for passing checks")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "out", None) is None and args.command == "sweep":
        parser.error("sweep requires --out")
    try:
        return args.func(args)
    except errors.FedError as exc:
        print(f"feddhad: {exc.category} error: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except OSError as exc:
        where = f" ({exc.filename})" if exc.filename else ""
        print(f"feddhad: io error: {exc.strerror or exc}{where}", file=sys.stderr)
        return EXIT_CODES["io"]


if __name__ == "__main__":
    sys.exit(main())
