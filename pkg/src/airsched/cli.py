"""Command-line front end.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import engine
from .engine import ConfigError, SimulationConfig, SimulationError
from .oracle import MAX_DEVICES, check_scheduler
from .scheduler import POLICIES

log = logging.getLogger("airsched")

OUT_ENV = "AIRSCHED_OUT"


class UsageError(Exception):
    pass


def _load_config(args) -> SimulationConfig:
    text = ""
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
    try:
        return SimulationConfig.from_text(text, args.set)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def _out_dir(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV, "out"))


def _parse_policies(text: str | None, default: list[str]) -> list[str]:
    policies = [p.strip() for p in text.split(",")] if text else default
    unknown = [p for p in policies if p not in POLICIES]
    if unknown:
        raise UsageError(f"unknown policy id(s) {unknown}; expected {list(POLICIES)}")
    return policies


def cmd_run(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    summaries = []
    for i in range(args.seeds):
        run_cfg = cfg.replace(seed=cfg.seed + i)
        run_out = out if args.seeds == 1 else out / f"seed{run_cfg.seed}"
        try:
            result = engine.run(run_cfg)
        except SimulationError as exc:
            run_out.mkdir(parents=True, exist_ok=True)
            (run_out / "metrics.csv").write_text(engine.metrics_csv(exc.trace))
            log.error("run failed: %s (partial trace in %s)", exc, run_out)
            return 1
        engine.write_outputs(result, run_out)
        summaries.append({"seed": run_cfg.seed, **engine.summarize(result)})
    if args.seeds > 1:
        finals = [s.get("final_accuracy", float("nan")) for s in summaries]
        (out / "summary.json").write_text(json.dumps({
            "runs": summaries,
            "final_accuracy_mean": float(np.mean(finals)),
            "final_accuracy_std": float(np.std(finals)),
        }, indent=1))
    print(json.dumps(summaries[-1] if len(summaries) == 1 else summaries, indent=1))
    return 0


def _parse_grid(items: list[str]) -> dict[str, list]:
    grid = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"grid entry must be KEY=V1,V2,..., got {item!r}")
        key, values = item.split("=", 1)
        grid[key.strip()] = [v.strip() for v in values.split(",") if v.strip()]
    if not grid:
        raise UsageError("sweep needs at least one --grid entry")
    return grid


def _write_rows(rows: list[dict], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    grid = _parse_grid(args.grid)
    try:
        rows = engine.sweep(cfg, grid, seeds=args.seeds, workers=args.workers)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    _write_rows(rows, _out_dir(args) / "sweep.csv")
    print(f"{len(rows)} runs written to {_out_dir(args) / 'sweep.csv'}")
    return 0


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    policies = _parse_policies(args.policies, [engine.PROPOSED, "baseline1"])
    if len(policies) < 2:
        raise UsageError("compare needs at least two policies")
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    chunks = []
    summary = []
    for i in range(args.seeds):
        for policy in policies:
            run_cfg = cfg.replace(policy=policy, seed=cfg.seed + i)
            result = engine.run(run_cfg)
            text = engine.metrics_csv(result.metrics, {"policy": policy, "seed": run_cfg.seed})
            chunks.append(text if not chunks else text.split("\n", 1)[1])
            summary.append({"policy": policy, "seed": run_cfg.seed, **engine.summarize(result)})
    (out / "compare.csv").write_text("".join(chunks))
    _write_rows(summary, out / "compare_summary.csv")
    for row in summary:
        print(f"{row['policy']:>10} seed={row['seed']} final_acc={row.get('final_accuracy', float('nan')):.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    from .learner import Architecture, ModelParams, loss_and_gradient, objective

    gen = np.random.default_rng(args.seed)
    worst = 0.0
    for arch in (Architecture.logistic(6, 3, 1e-4), Architecture.mlp(6, 3, 5, 0.0)):
        for _ in range(args.probes):
            X = gen.random((8, arch.input_dim))
            y = gen.integers(0, arch.num_classes, 8)
            p = ModelParams(arch, gen.standard_normal(arch.num_params) * 0.5)
            _, g = loss_and_gradient(p, X, y)
            i = int(gen.integers(arch.num_params))
            e = np.zeros(arch.num_params)
            e[i] = 1e-5
            fd = (objective(p.with_weights(p.w + e), X, y) - objective(p.with_weights(p.w - e), X, y)) / 2e-5
            worst = max(worst, abs(fd - g[i]) / max(1e-8, abs(fd), abs(g[i])))
    ok = worst <= args.tol
    print(f"max relative error {worst:.3e} ({'PASS' if ok else 'FAIL'} at tol {args.tol:g})")
    return 0 if ok else 1


def cmd_bounds(args) -> int:
    cfg = _load_config(args)
    result = engine.run(cfg)
    report = result.bounds_report() if result.metrics else {"rounds": []}
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bounds.json").write_text(json.dumps(report, indent=1))
    brief = {k: v for k, v in report.items() if k != "rounds"}
    print(json.dumps(brief, indent=1))
    return 0


def cmd_oracle(args) -> int:
    if args.n > MAX_DEVICES or args.n < 1:
        raise UsageError(f"oracle supports 1 <= N <= {MAX_DEVICES}, got {args.n}")
    report = check_scheduler(args.n, args.instances, seed=args.seed)
    print(f"N={args.n} instances={report.instances} agreement={100 * report.rate:.2f}% "
          f"time={report.seconds:.2f}s")
    return 0 if report.agreements == report.instances else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="airsched", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat KEY=VALUE config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./out)")
        p.add_argument("--seeds", type=int, default=1, help="number of seed replicates")

    p = sub.add_parser("run", help="run one simulation")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a parameter grid")
    common(p)
    p.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="compare scheduling policies")
    common(p)
    p.add_argument("--policies", help=f"comma-separated subset of {','.join(POLICIES)}")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--probes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bounds", help="run and report convergence bounds")
    common(p)
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("oracle", help="check the scheduler against exhaustive search")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--instances", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
