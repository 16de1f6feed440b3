"""Coupled single-loop recursions over ``(x, Y, Z, h)``.

One iteration ``k`` of the subspace method:

1. sample projectors, probes and projected oracles at ``(x^k, Y^k)``;
2. ``x <- x - alpha h``                      (uses the old ``h``)
3. ``Y <- Y - c1 alpha P V``
4. ``Z <- Z - c2 alpha (CorrHVP(Z) - P U_Y)``
5. ``h <- (1 - c3 alpha) h + c3 alpha (U_x - J~[P^T Z])``  (uses the old ``Z``)

The full-space baseline runs the same recursion with identity projectors and
plain oracles; the naive baseline swaps the corrected HVP for the lifted one.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from bros import estimators as est
from bros.blockmat import BlockVar, norm
from bros.moments import mean_field_lifted_hessian
from bros.problems import BilevelProblem, InnerSolveError
from bros.randsrc import ProjectorSet, RngStream, sample_probe_set, sample_projector_set

log = logging.getLogger(__name__)

METHODS = ("bros", "masoba", "naive-stochastic", "naive-meanfield")
TRAJECTORY_COLUMNS = ("k", "grad_norm", "phi", "y_err", "z_err", "h_err", "upper_loss", "wall_time")


class DivergenceError(RuntimeError):
    def __init__(self, k: int, what: str, trajectory: "Trajectory | None" = None):
        super().__init__(f"iterate diverged at k={k}: {what}")
        self.k = k
        self.trajectory = trajectory


@dataclass(frozen=True)
class SolverConfig:
    K: int
    alpha: float | str = "auto"
    alpha_bar: float = 0.1
    c1: float = 1.0
    c2: float = 1.0
    c3: float = 1.0
    ranks: tuple[int, ...] = ()
    seed: int = 0
    z_clip: float | None = None
    eval_stride: int = 1
    x0: tuple[float, ...] | None = None
    record_time: bool = True
    max_norm: float = 1e12

    def __post_init__(self):
        object.__setattr__(self, "ranks", tuple(int(r) for r in self.ranks))
        if self.x0 is not None:
            object.__setattr__(self, "x0", tuple(float(v) for v in np.ravel(self.x0)))
        if self.K < 0:
            raise ValueError("K must be non-negative")
        if min(self.c1, self.c2, self.c3) <= 0:
            raise ValueError("coupling constants c1, c2, c3 must be positive")
        if any(r < 2 for r in self.ranks):
            raise ValueError("ranks must be >= 2")
        if self.eval_stride < 1:
            raise ValueError("eval_stride must be >= 1")
        if self.z_clip is not None and self.z_clip <= 0:
            raise ValueError("z_clip must be positive")
        a = self.step_alpha
        if a < 0 or (a == 0 and self.alpha == "auto"):
            raise ValueError(f"alpha must be positive, got {a}")
        if self.c3 * a > 1:
            raise ValueError(f"moving-average weight c3*alpha = {self.c3 * a} exceeds 1")

    @property
    def step_alpha(self) -> float:
        if self.alpha == "auto":
            return min(self.alpha_bar, 1.0 / math.sqrt(max(self.K, 1)))
        return float(self.alpha)

    @property
    def stepsizes(self) -> dict[str, float]:
        a = self.step_alpha
        return {"alpha": a, "beta": self.c1 * a, "gamma": self.c2 * a, "theta": self.c3 * a}


@dataclass(frozen=True)
class SolverState:
    x: np.ndarray
    Y: BlockVar
    Z: BlockVar
    h: np.ndarray
    k: int = 0


@dataclass
class Trajectory:
    method: str
    stepsizes: dict[str, float]
    records: list[dict] = field(default_factory=list)
    final_state: SolverState | None = None

    def column(self, name: str) -> np.ndarray:
        return np.array([rec[name] for rec in self.records], dtype=np.float64)

    def tail(self, name: str, fraction: float) -> np.ndarray:
        vals = self.column(name)
        start = int(math.floor(len(vals) * (1.0 - fraction)))
        return vals[start:]

    def mean_sq_grad(self) -> float:
        g = self.column("grad_norm")
        return float(np.mean(g**2))


def initial_state(problem: BilevelProblem, config: SolverConfig) -> SolverState:
    x0 = np.zeros(problem.d_x) if config.x0 is None else np.array(config.x0, dtype=np.float64)
    if x0.shape != (problem.d_x,):
        raise ValueError(f"x0 has length {x0.size}, problem expects {problem.d_x}")
    zero = BlockVar.zeros(problem.shape)
    return SolverState(x0, zero, zero, np.zeros(problem.d_x), 0)


def _ranks(problem: BilevelProblem, config: SolverConfig) -> tuple[int, ...]:
    if not config.ranks:
        return tuple(m for m, _ in problem.shape)
    if len(config.ranks) != len(problem.shape):
        raise ValueError(f"need {len(problem.shape)} ranks, got {len(config.ranks)}")
    return config.ranks


def _finish(problem, config, state, x, Y, Z, h) -> SolverState:
    if config.z_clip is not None:
        zn = norm(Z)
        if zn > config.z_clip:
            Z = Z * (config.z_clip / zn)
    k = state.k
    for name, val in (("x", np.linalg.norm(x)), ("Y", norm(Y)), ("Z", norm(Z)), ("h", np.linalg.norm(h))):
        if not np.isfinite(val) or val > config.max_norm:
            raise DivergenceError(k, f"|{name}| = {val:.3e}")
    return SolverState(x, Y, Z, h, k + 1)


def _subspace_step(problem, config, state, stream, corrected: bool) -> SolverState:
    s = config.stepsizes
    ranks = _ranks(problem, config)
    sub = stream.child(state.k)
    P = sample_projector_set(sub, problem.shape, ranks)
    sample = problem.sample_projected_oracles(sub, state.x, state.Y, P)
    if corrected:
        probes = sample_probe_set(sub, problem.shape, ranks)
        S = est.build_aux_direction(P, state.Z, sample, probes)
    else:
        S = est.build_naive_aux_direction(P, state.Z, sample)
    V = est.build_lower_direction(P, sample)
    W = est.build_hypergrad_sample(P, state.Z, sample)
    x = state.x - s["alpha"] * state.h
    Y = state.Y - s["beta"] * V
    Z = state.Z - s["gamma"] * S
    h = (1.0 - s["theta"]) * state.h + s["theta"] * W
    return _finish(problem, config, state, x, Y, Z, h)


def bros_step(problem: BilevelProblem, config: SolverConfig, state: SolverState, stream: RngStream) -> SolverState:
    return _subspace_step(problem, config, state, stream, corrected=True)


def naive_step(problem: BilevelProblem, config: SolverConfig, state: SolverState, stream: RngStream) -> SolverState:
    return _subspace_step(problem, config, state, stream, corrected=False)


def masoba_step(problem: BilevelProblem, config: SolverConfig, state: SolverState, stream: RngStream) -> SolverState:
    s = config.stepsizes
    I = ProjectorSet.identity(problem.shape)
    sample = problem.sample_projected_oracles(stream.child(state.k), state.x, state.Y, I)
    S = sample.hvp(state.Z) - sample.uy
    W = sample.ux - sample.jvp(state.Z)
    x = state.x - s["alpha"] * state.h
    Y = state.Y - s["beta"] * sample.v
    Z = state.Z - s["gamma"] * S
    h = (1.0 - s["theta"]) * state.h + s["theta"] * W
    return _finish(problem, config, state, x, Y, Z, h)


def meanfield_naive_step(problem: BilevelProblem, config: SolverConfig, state: SolverState, Hbar: np.ndarray) -> SolverState:
    """Deterministic recursion: the Hessian action is ``Hbar @ Z`` and ``Y`` tracks the lower solution exactly."""
    s = config.stepsizes
    Y = problem.lower_solution(state.x)
    fy = problem.grad_y_f(state.x, Y)
    S = BlockVar([Hbar @ state.Z[0]]) - fy
    W = problem.grad_x_f(state.x, Y) - problem.jvp(state.x, Y, state.Z)
    x = state.x - s["alpha"] * state.h
    Z = state.Z - s["gamma"] * S
    h = (1.0 - s["theta"]) * state.h + s["theta"] * W
    return _finish(problem, config, state, x, problem.lower_solution(x), Z, h)


# -- metrics --------------------------------------------------------------------


def stationarity_surrogate(problem: BilevelProblem, x, tol: float = 1e-8) -> float:
    """``|grad Phi(x)|`` from closed forms, or from inner solves to ``tol``."""
    x = np.asarray(x, dtype=np.float64)
    if problem.exact:
        return float(np.linalg.norm(problem.exact_hypergradient(x)))
    Y = problem.lower_solution(x)
    Z = problem.aux_solution(x, Y, tol=min(tol, 1e-10))
    return float(np.linalg.norm(problem.grad_x_f(x, Y) - problem.jvp(x, Y, Z)))


def _record(problem: BilevelProblem, state: SolverState, t0: float, record_time: bool) -> dict:
    x = state.x
    rec = {"k": state.k}
    try:
        Ys = problem.lower_solution(x)
        Zs = problem.aux_solution(x, Ys)
        grad = problem.grad_x_f(x, Ys) - problem.jvp(x, Ys, Zs)
        rec["grad_norm"] = float(np.linalg.norm(grad))
        rec["phi"] = problem.f(x, Ys)
        rec["y_err"] = norm(state.Y - Ys)
        rec["z_err"] = norm(state.Z - Zs)
        rec["h_err"] = float(np.linalg.norm(state.h - grad))
    except InnerSolveError as exc:
        log.warning("metrics at k=%d unavailable: %s", state.k, exc)
        for key in ("grad_norm", "phi", "y_err", "z_err", "h_err"):
            rec[key] = float("nan")
    rec["upper_loss"] = problem.f(x, state.Y)
    rec["wall_time"] = time.perf_counter() - t0 if record_time else 0.0
    return rec


def _run(problem, config, method, step, state=None) -> Trajectory:
    stream = RngStream(config.seed)
    state = initial_state(problem, config) if state is None else state
    traj = Trajectory(method, config.stepsizes)
    t0 = time.perf_counter()
    traj.records.append(_record(problem, state, t0, config.record_time))
    for _ in range(config.K):
        try:
            state = step(state, stream)
        except DivergenceError as exc:
            exc.trajectory = traj
            traj.final_state = state
            raise
        if state.k % config.eval_stride == 0 or state.k == config.K:
            traj.records.append(_record(problem, state, t0, config.record_time))
    traj.final_state = state
    return traj


def run_bros(problem: BilevelProblem, config: SolverConfig) -> Trajectory:
    return _run(problem, config, "bros", lambda st, rs: bros_step(problem, config, st, rs))


def run_masoba(problem: BilevelProblem, config: SolverConfig) -> Trajectory:
    return _run(problem, config, "masoba", lambda st, rs: masoba_step(problem, config, st, rs))


def _mean_field_run(problem, config, Hbar, method) -> Trajectory:
    start = initial_state(problem, config)
    start = replace(start, Y=problem.lower_solution(start.x))
    return _run(problem, config, method, lambda st, rs: meanfield_naive_step(problem, config, st, Hbar), start)


def _check_mean_field(problem) -> None:
    if problem.column_hessian is None or len(problem.shape) != 1 or not problem.exact:
        raise ValueError("mean-field mode needs a single-layer problem with a columnwise Hessian")


def run_naive_sketch(problem: BilevelProblem, config: SolverConfig, mode: str = "stochastic") -> Trajectory:
    if mode == "stochastic":
        return _run(problem, config, "naive-stochastic", lambda st, rs: naive_step(problem, config, st, rs))
    if mode != "mean_field":
        raise ValueError(f"unknown naive mode {mode!r}")
    _check_mean_field(problem)
    Hbar = mean_field_lifted_hessian(problem.column_hessian, _ranks(problem, config)[0])
    return _mean_field_run(problem, config, Hbar, "naive-meanfield")


def run_bros_mean_field(problem: BilevelProblem, config: SolverConfig) -> Trajectory:
    """Deterministic recursion driven by the mean of the corrected estimator.

    The corrected Hessian action is unbiased, so its mean operator is the
    true column Hessian; compare with the naive mean-field run.
    """
    _check_mean_field(problem)
    return _mean_field_run(problem, config, np.asarray(problem.column_hessian), "bros-meanfield")


def run_method(problem: BilevelProblem, config: SolverConfig, method: str) -> Trajectory:
    if method == "bros":
        return run_bros(problem, config)
    if method == "masoba":
        return run_masoba(problem, config)
    if method == "naive-stochastic":
        return run_naive_sketch(problem, config, "stochastic")
    if method == "naive-meanfield":
        return run_naive_sketch(problem, config, "mean_field")
    raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")


def tail_average(values: Sequence[float], fraction: float) -> float:
    vals = np.asarray(values, dtype=np.float64)
    start = int(math.floor(len(vals) * (1.0 - fraction)))
    return float(np.mean(vals[start:]))
