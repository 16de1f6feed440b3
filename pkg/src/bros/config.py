"""YAML run configuration.

Schema (unknown keys are rejected at every level)::

    problem:
      kind: quadratic | block-quadratic | counterexample | hypercleaning
      ...kind-specific parameters, see PROBLEM_KEYS
    solver:
      K, alpha ("auto" or number), alpha_bar, c1, c2, c3, ranks, seed,
      z_clip, eval_stride, x0, record_time, max_norm
    method: bros | masoba | naive-stochastic | naive-meanfield
    output: path of the trajectory CSV (optional)
    trials: Monte Carlo trial count (optional)
    sweep:                      # only read by the ``sweep`` subcommand
      seeds: [..]
      ranks: [[..], ..]
      methods: [..]
      workers: 1

Flag overrides use dotted paths, e.g. ``--set solver.K=2000``; the value is
parsed as YAML.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from bros.problems import (
    BilevelProblem,
    make_block_quadratic,
    make_counterexample,
    make_hypercleaning,
    make_hypercleaning_from_tables,
    make_quadratic,
)
from bros.randsrc import RngStream
from bros.solvers import METHODS, SolverConfig


class ConfigError(ValueError):
    pass


PROBLEM_KEYS: dict[str, dict[str, Any]] = {
    "quadratic": {
        "seed": 0, "m": 6, "n": 3, "d_x": 3, "conditioning": 4.0,
        "sigma_grad": 0.0, "sigma_op": 0.0, "structure": "columnwise",
    },
    "block-quadratic": {
        "seed": 0, "layers": [[4, 2], [3, 2]], "d_x": 2, "conditioning": 4.0,
        "coupled": True, "sigma_grad": 0.0, "sigma_op": 0.0,
    },
    "counterexample": {},
    "hypercleaning": {
        "seed": 0, "n_train": 400, "n_val": 200, "d_feat": 30, "classes": 10,
        "noise_rate": 0.3, "ridge": 0.01, "batch_size": 64, "val_batch_size": 64,
        "train_csv": None, "val_csv": None,
    },
}
SOLVER_KEYS = {f.name for f in dataclasses.fields(SolverConfig)}
TOP_KEYS = {"problem", "solver", "method", "output", "trials", "sweep"}
SWEEP_KEYS = {"seeds", "ranks", "methods", "workers"}


@dataclass(frozen=True)
class ProblemSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def resolved(self) -> dict:
        out = dict(PROBLEM_KEYS[self.kind])
        out.update(self.params)
        return out


@dataclass(frozen=True)
class RunConfig:
    problem: ProblemSpec
    solver: SolverConfig
    method: str = "bros"
    output: str | None = None
    trials: int = 1000
    sweep: dict | None = None

    def as_dict(self) -> dict:
        solver = dataclasses.asdict(self.solver)
        solver["ranks"] = list(solver["ranks"])
        if solver["x0"] is not None:
            solver["x0"] = list(solver["x0"])
        d = {
            "problem": {"kind": self.problem.kind, **self.problem.resolved()},
            "solver": solver,
            "method": self.method,
            "trials": self.trials,
        }
        if self.sweep is not None:
            d["sweep"] = self.sweep
        return d

    def content_hash(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def _reject_unknown(section: str, got, allowed) -> None:
    extra = sorted(set(got) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(extra)}")


def apply_override(tree: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} must look like key.path=value")
    path, raw = assignment.split("=", 1)
    keys = path.strip().split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {path!r} descends into a non-mapping")
    node[keys[-1]] = yaml.safe_load(raw)


def parse_config(tree: dict) -> RunConfig:
    if not isinstance(tree, dict):
        raise ConfigError("config root must be a mapping")
    _reject_unknown("config", tree, TOP_KEYS)
    prob = dict(tree.get("problem") or {})
    kind = prob.pop("kind", None)
    if kind not in PROBLEM_KEYS:
        raise ConfigError(f"problem.kind must be one of {', '.join(PROBLEM_KEYS)}, got {kind!r}")
    _reject_unknown(f"problem ({kind})", prob, PROBLEM_KEYS[kind])
    solver = dict(tree.get("solver") or {})
    _reject_unknown("solver", solver, SOLVER_KEYS)
    if "K" not in solver:
        raise ConfigError("solver.K is required")
    method = tree.get("method", "bros")
    if method not in METHODS:
        raise ConfigError(f"method must be one of {', '.join(METHODS)}, got {method!r}")
    sweep = tree.get("sweep")
    if sweep is not None:
        if not isinstance(sweep, dict):
            raise ConfigError("sweep must be a mapping")
        _reject_unknown("sweep", sweep, SWEEP_KEYS)
    try:
        solver_cfg = SolverConfig(**solver)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"solver: {exc}") from exc
    trials = int(tree.get("trials", 1000))
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    return RunConfig(ProblemSpec(kind, prob), solver_cfg, method, tree.get("output"), trials, sweep)


def load_config(path: str | Path, overrides: list[str] = ()) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        tree = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    for ov in overrides:
        apply_override(tree, ov)
    return parse_config(tree)


def build_problem(spec: ProblemSpec) -> BilevelProblem:
    p = spec.resolved()
    try:
        if spec.kind == "counterexample":
            return make_counterexample()
        stream = RngStream(int(p.pop("seed")))
        if spec.kind == "quadratic":
            return make_quadratic(stream, **p)
        if spec.kind == "block-quadratic":
            layers = [tuple(l) for l in p.pop("layers")]
            return make_block_quadratic(stream, layers, **p)
        train_csv, val_csv = p.pop("train_csv"), p.pop("val_csv")
        if (train_csv is None) != (val_csv is None):
            raise ConfigError("hypercleaning needs both train_csv and val_csv, or neither")
        if train_csv is not None:
            return make_hypercleaning_from_tables(
                train_csv, val_csv, p["ridge"], p["classes"], p["batch_size"], p["val_batch_size"]
            )
        return make_hypercleaning(stream, **p)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"problem ({spec.kind}): {exc}") from exc
