"""``bros`` command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error (no output
files are written), 3 divergence (the partial trace is written).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from fractions import Fraction
from itertools import product
from pathlib import Path

import numpy as np

from bros import __version__
from bros.blockmat import dump_binary, norm
from bros.config import ConfigError, RunConfig, build_problem, load_config
from bros.estimators import expected_naive_hvp, monte_carlo_hvp_means
from bros.memproxy import METHODS as MEM_METHODS, BlockDims, proxy_table
from bros.moments import moment_table
from bros.problems import make_counterexample, make_quadratic
from bros.randsrc import RngStream, sample_gaussian_blockvar
from bros.solvers import (
    TRAJECTORY_COLUMNS,
    DivergenceError,
    SolverConfig,
    Trajectory,
    run_method,
)
from bros.tables import emit_csv, format_table, manifest_lines

log = logging.getLogger("bros")

OUTPUT_ENV = "BROS_OUTPUT_DIR"
EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3

COUNTEREXAMPLE_MODES = {
    "meanfield-naive": "naive-meanfield",
    "naive-stochastic": "naive-stochastic",
    "bros": "bros",
    "masoba": "masoba",
}


class UsageError(Exception):
    pass


def _out_dir() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "bros-out"))


def _target(arg: str | None, default_name: str) -> Path:
    path = Path(arg) if arg else _out_dir() / default_name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _parse_cases(text: str) -> list[tuple[int, int]]:
    try:
        cases = [tuple(int(v) for v in item.split(":")) for item in text.split(",") if item]
    except ValueError:
        raise UsageError(f"--cases expects m:r pairs separated by commas, got {text!r}") from None
    if not cases or any(len(c) != 2 for c in cases):
        raise UsageError(f"--cases expects m:r pairs separated by commas, got {text!r}")
    return cases


def _write_trajectory(path: Path, traj: Trajectory, subcommand: str, config: dict, seed: int, **extra) -> None:
    manifest = manifest_lines(subcommand, config, seed, method=traj.method, **extra)
    emit_csv(path, TRAJECTORY_COLUMNS, traj.records, manifest)


# -- subcommands ------------------------------------------------------------------


def cmd_verify_moments(args) -> int:
    cases = _parse_cases(args.cases)
    for m, r in cases:
        if not 2 <= r <= m:
            raise UsageError(f"case {m}:{r} needs 2 <= r <= m")
    rows = moment_table(RngStream(args.seed), cases, args.trials)
    cols = ["m", "r", "a", "b", "trials", "rel_frobenius_error"]
    config = {"cases": args.cases, "trials": args.trials}
    emit_csv(_target(args.output, "moments.csv"), cols, rows, manifest_lines("verify-moments", config, args.seed))
    print(format_table(cols, rows))
    return EXIT_OK


def cmd_verify_estimators(args) -> int:
    if not 2 <= args.rank <= args.m:
        raise UsageError("--rank must satisfy 2 <= rank <= m")
    root = RngStream(args.seed)
    problem = make_quadratic(root.child(0), args.m, args.n, 1, conditioning=args.conditioning, structure=args.structure)
    x = np.zeros(1)
    Y = problem.lower_solution(x)
    Z = sample_gaussian_blockvar(root.child(1), problem.shape, 1.0)
    means = monte_carlo_hvp_means(root.child(2), problem, x, Y, Z, (args.rank,), args.trials)
    exact = problem.hvp(x, Y, Z)
    predicted = expected_naive_hvp(problem.H, Z[0], args.rank)
    bias_pred = predicted - exact[0]
    bias_mc = (means["naive"] - exact)[0]
    rows = [
        {"estimator": "corrected", "target": "H[Z]", "rel_error": norm(means["corrected"] - exact) / norm(exact)},
        {"estimator": "naive", "target": "H[Z]", "rel_error": norm(means["naive"] - exact) / norm(exact)},
        {
            "estimator": "naive",
            "target": "predicted_bias",
            "rel_error": float(np.linalg.norm(bias_mc - bias_pred) / np.linalg.norm(bias_pred)),
        },
    ]
    cols = ["estimator", "target", "rel_error"]
    config = {k: getattr(args, k) for k in ("m", "n", "rank", "trials", "conditioning", "structure")}
    emit_csv(_target(args.output, "estimators.csv"), cols, rows, manifest_lines("verify-estimators", config, args.seed))
    print(format_table(cols, rows))
    return EXIT_OK


def _counterexample_defaults(mode: str) -> dict:
    if mode == "meanfield-naive":
        return {"K": 3000, "alpha": 0.5, "c1": 1.0, "c2": 0.4, "c3": 1.0}
    return {"K": 50000, "alpha": 0.02, "c1": 1.0, "c2": 1.0, "c3": 1.0}


def cmd_counterexample(args) -> int:
    params = _counterexample_defaults(args.mode)
    for key in ("K", "alpha"):
        if getattr(args, key) is not None:
            params[key] = getattr(args, key)
    try:
        cfg = SolverConfig(ranks=(args.rank,), seed=args.seed, eval_stride=args.eval_stride, record_time=False, **params)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    problem = make_counterexample()
    method = COUNTEREXAMPLE_MODES[args.mode]
    resolved = {"mode": args.mode, **_solver_dict(cfg)}
    path = _target(args.output, f"counterexample-{args.mode}.csv")
    try:
        traj = run_method(problem, cfg, method)
    except DivergenceError as exc:
        _write_trajectory(path, exc.trajectory, "counterexample", resolved, cfg.seed, status="diverged")
        raise
    _write_trajectory(path, traj, "counterexample", resolved, cfg.seed)
    x_final = float(traj.final_state.x[0])
    grad = abs(float(problem.exact_hypergradient(traj.final_state.x)[0]))
    print(f"mode={args.mode} K={cfg.K} x_final={x_final:.12f} grad={grad:.12f}")
    if method != "naive-meanfield":
        tail = traj.tail("grad_norm", 0.2)
        print(f"tail_mean_grad={float(np.mean(tail)):.12f}")
    print(f"trace: {path}")
    return EXIT_OK


def _solver_dict(cfg: SolverConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["ranks"] = list(d["ranks"])
    if d["x0"] is not None:
        d["x0"] = list(d["x0"])
    return d


def _write_run_outputs(out_path: Path, traj: Trajectory, rc: RunConfig, subcommand: str, status: str) -> None:
    resolved, digest = rc.as_dict(), rc.content_hash()
    stem = out_path.with_suffix("")
    _write_trajectory(out_path, traj, subcommand, resolved, rc.solver.seed, config_sha256=digest, status=status)
    sidecar = {
        "tool": f"bros {__version__}",
        "subcommand": subcommand,
        "config": resolved,
        "config_sha256": digest,
        "seed": rc.solver.seed,
        "status": status,
        "trace": out_path.name,
        "records": len(traj.records),
    }
    st = traj.final_state
    if st is not None:
        snaps = {"Y": Path(f"{stem}.Y.bin"), "Z": Path(f"{stem}.Z.bin")}
        for name, path in snaps.items():
            dump_binary(getattr(st, name), path)
        sidecar["final"] = {"k": st.k, "x": [float(v) for v in st.x], "h": [float(v) for v in st.h]}
        sidecar["snapshots"] = [p.name for p in snaps.values()]
    Path(f"{stem}.manifest.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def execute_run(rc: RunConfig, out_path: Path, subcommand: str = "run") -> Trajectory:
    """Build the problem, run the solver and write trace, sidecar and snapshots.

    On divergence the partial outputs are written before the error propagates.
    """
    problem = build_problem(rc.problem)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    try:
        traj = run_method(problem, rc.solver, rc.method)
    except DivergenceError as exc:
        _write_run_outputs(out_path, exc.trajectory, rc, subcommand, "diverged")
        raise
    _write_run_outputs(out_path, traj, rc, subcommand, "ok")
    return traj


def cmd_run(args) -> int:
    rc = load_config(args.config, args.set or [])
    out = Path(args.output) if args.output else (Path(rc.output) if rc.output else _out_dir() / f"run-{rc.method}.csv")
    traj = execute_run(rc, out)
    last = traj.records[-1]
    print(f"method={rc.method} k={last['k']} grad_norm={last['grad_norm']:.6g} upper_loss={last['upper_loss']:.6g}")
    print(f"trace: {out}")
    return EXIT_OK


def cmd_memory_proxy(args) -> int:
    methods = args.method or list(MEM_METHODS)
    rows = []
    try:
        for rho in args.rank_ratio:
            dims = BlockDims.from_ratios(args.n, Fraction(args.bs_ratio), Fraction(rho), args.batch, args.heads, not args.no_attention)
            for row in proxy_table(methods, dims, args.baseline):
                rows.append({"rank_ratio": Fraction(rho), **row})
    except (ValueError, ZeroDivisionError) as exc:
        raise UsageError(str(exc)) from None
    cols = list(rows[0].keys())
    red = f"reduction_vs_{args.baseline}"
    if args.format == "table":
        shown = [dict(r, **{red: f"{float(r[red]) * 100:.1f}%"}) for r in rows]
        print(format_table(cols, shown))
    else:
        config = {k: getattr(args, k) for k in ("n", "bs_ratio", "rank_ratio", "heads", "batch", "no_attention", "baseline")}
        config["methods"] = methods
        manifest = manifest_lines("memory-proxy", config, None)
        if args.output:
            emit_csv(_target(args.output, ""), cols, rows, manifest)
        else:
            from bros.tables import write_csv

            write_csv(sys.stdout, cols, rows, manifest)
    return EXIT_OK


def _sweep_job(job: tuple[dict, str]) -> tuple[str, str, str]:
    tree, out = job
    from bros.config import parse_config

    rc = parse_config(tree)
    try:
        traj = execute_run(rc, Path(out), "sweep")
    except DivergenceError as exc:
        return out, "diverged", str(exc)
    return out, "ok", f"{traj.records[-1]['grad_norm']:.6g}"


def sweep_jobs(rc: RunConfig, out_dir: Path) -> list[tuple[dict, str]]:
    sw = rc.sweep or {}
    base = rc.as_dict()
    base.pop("sweep", None)
    seeds = sw.get("seeds") or [rc.solver.seed]
    ranks = sw.get("ranks") or [list(rc.solver.ranks)]
    methods = sw.get("methods") or [rc.method]
    jobs = []
    for method, rank, seed in product(methods, ranks, seeds):
        tree = json.loads(json.dumps(base))
        tree["method"] = method
        tree["solver"]["seed"] = seed
        tree["solver"]["ranks"] = list(rank)
        tag = "-".join(str(v) for v in rank) or "full"
        jobs.append((tree, str(out_dir / f"{method}_r{tag}_s{seed}.csv")))
    return jobs


def cmd_sweep(args) -> int:
    rc = load_config(args.config, args.set or [])
    out_dir = Path(args.output) if args.output else _out_dir() / "sweep"
    jobs = sweep_jobs(rc, out_dir)
    from bros.config import parse_config

    for tree, _ in jobs:  # validate every member before any work starts
        parse_config(tree)
    workers = int(args.workers or (rc.sweep or {}).get("workers", 1))
    out_dir.mkdir(parents=True, exist_ok=True)
    if workers <= 1:
        results = [_sweep_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_job, jobs))
    failed = 0
    for out, status, info in results:
        print(f"{status}\t{out}\t{info}")
        failed += status != "ok"
    return EXIT_DIVERGED if failed else EXIT_OK


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bros", description="Randomized-subspace bilevel solvers and diagnostics.")
    ap.add_argument("--version", action="version", version=f"bros {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify-moments", help="closed-form vs Monte Carlo projector moments")
    p.add_argument("--cases", default="3:2,6:3,8:4", help="comma-separated m:r pairs")
    p.add_argument("--trials", type=int, default=20000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output")
    p.set_defaults(func=cmd_verify_moments)

    p = sub.add_parser("verify-estimators", help="Monte Carlo bias check of lifted and corrected HVPs")
    p.add_argument("--m", type=int, default=8)
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--rank", type=int, default=3)
    p.add_argument("--trials", type=int, default=20000)
    p.add_argument("--conditioning", type=float, default=4.0)
    p.add_argument("--structure", choices=("general", "columnwise"), default="general")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output")
    p.set_defaults(func=cmd_verify_estimators)

    p = sub.add_parser("counterexample", help="three-dimensional quadratic where the naive sketch is biased")
    p.add_argument("--mode", choices=tuple(COUNTEREXAMPLE_MODES), required=True)
    p.add_argument("--K", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--rank", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-stride", type=int, default=10)
    p.add_argument("--output")
    p.set_defaults(func=cmd_counterexample)

    p = sub.add_parser("run", help="run one solver from a YAML config")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="KEY.PATH=VALUE")
    p.add_argument("--output")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("memory-proxy", help="peak-memory proxy of one decoder block")
    p.add_argument("--method", action="append", choices=MEM_METHODS)
    p.add_argument("--n", type=int, default=1024)
    p.add_argument("--bs-ratio", default="1")
    p.add_argument("--rank-ratio", action="append", default=None)
    p.add_argument("--heads", type=int, default=16)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--no-attention", action="store_true")
    p.add_argument("--baseline", choices=MEM_METHODS, default="masoba")
    p.add_argument("--format", choices=("table", "csv"), default="table")
    p.add_argument("--output")
    p.set_defaults(func=cmd_memory_proxy)

    p = sub.add_parser("sweep", help="grid of runs over seeds, ranks and methods")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="KEY.PATH=VALUE")
    p.add_argument("--workers", type=int)
    p.add_argument("--output", help="directory for per-run files")
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "rank_ratio", "absent") is None:
        args.rank_ratio = ["0.25"]
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"bros {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"bros {args.command}: {exc}; partial trace written", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"bros {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
