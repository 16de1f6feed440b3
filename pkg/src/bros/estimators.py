"""Stochastic directions built from one iteration's projected oracles.

The lifted Hessian action ``A = P H~[P^T Z]`` is biased for the self-layer
block: its mean is ``E[Q H Q] Z`` rather than ``H Z``.  The bi-probe
correction spends one extra projected HVP query ``M = H~[xi u^T]`` to
estimate the trace and partial-transpose terms of that mean and removes
them::

    C_hat  = Z (M^T xi) u^T
    B_sharp = P xi (M^T (P^T Z u))^T
    CorrHVP = k_main A - k_trace C_hat + k_sharp (A - B_sharp)

For several layers the probe blocks of all layers are inserted into a single
query, and cross-layer blocks are lifted without correction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np

from bros.blockmat import BlockVar, embed, lift_up, project_down
from bros.moments import weingarten_constants
from bros.problems import OracleSample
from bros.randsrc import ProbeSet, ProjectorSet


@dataclass(frozen=True)
class CorrectionCoefficients:
    m: int
    r: int
    main_exact: Fraction
    trace_exact: Fraction
    sharp_exact: Fraction
    c_a: Fraction
    c_b: Fraction
    c_c: Fraction

    main: float = field(init=False)
    trace: float = field(init=False)
    sharp: float = field(init=False)

    def __post_init__(self):
        # converted once; these are read on every estimator call
        for name in ("main", "trace", "sharp"):
            object.__setattr__(self, name, float(getattr(self, name + "_exact")))


@lru_cache(maxsize=None)
def correction_coefficients(m: int, r: int) -> CorrectionCoefficients:
    if r < 2:
        raise ValueError(f"bi-probe correction needs rank >= 2, got r={r}")
    if r > m:
        raise ValueError(f"rank r={r} exceeds m={m}")
    if r == m:
        one, zero = Fraction(1), Fraction(0)
        return CorrectionCoefficients(m, r, one, zero, zero, one, zero, zero)
    main = Fraction(r * (m - 1) * (m + 2), m * (m * r + m - 2))
    trace = Fraction(m - r, m * r + m - 2)
    sharp = Fraction(r * (m - 1) * (m - r), m * (r - 1) * (m * r + m - 2))
    w = weingarten_constants(m, r)
    a, b = w.a_exact, w.b_exact
    c_a = (a - b) / (a * (a - 2 * b))
    c_b = b / (a * (a - 2 * b))
    c_c = b / a
    return CorrectionCoefficients(m, r, main, trace, sharp, c_a, c_b, c_c)


def probe_block(probes: ProbeSet) -> BlockVar:
    """Reduced variable with ``xi_l u_l^T`` in every layer."""
    return BlockVar(np.outer(xi, u) for xi, u in zip(probes.xi, probes.u))


def naive_lifted_hvp(P: ProjectorSet, Z: BlockVar, sample: OracleSample) -> BlockVar:
    """Uncorrected sketch-then-lift Hessian action ``P H~[P^T Z]``."""
    return lift_up(P, sample.hvp(project_down(P, Z)))


def _corr_combine(P_l, Z_l, Zt_l, A_l, M_l, u_l, xi_l) -> np.ndarray:
    k = correction_coefficients(*P_l.shape)
    if k.trace == 0.0 and k.sharp == 0.0:
        return A_l
    C_hat = (Z_l @ (M_l.T @ xi_l))[:, None] * u_l
    B_sharp = (P_l @ xi_l)[:, None] * (M_l.T @ (Zt_l @ u_l))
    return k.main * A_l - k.trace * C_hat + k.sharp * (A_l - B_sharp)


def corr_hvp_single_layer(
    P: ProjectorSet,
    Z: BlockVar,
    sample: OracleSample,
    probes: ProbeSet,
    layer: int,
    probe_response: BlockVar | None = None,
) -> np.ndarray:
    """Corrected estimate of the self-block action ``H_ll[Z_l]``.

    ``probe_response`` is ``H~`` applied to the all-layer probe block; it is
    queried here when not supplied.
    """
    P_l = P[layer]
    if P_l.shape[1] < 2:
        raise ValueError("bi-probe correction needs rank >= 2")
    Zt = project_down(P, Z)
    if probe_response is None:
        probe_response = sample.hvp(probe_block(probes))
    A_l = P_l @ sample.hvp(embed(Zt.shape, layer, Zt[layer]))[layer]
    return _corr_combine(P_l, Z[layer], Zt[layer], A_l, probe_response[layer], probes.u[layer], probes.xi[layer])


def assemble_multilayer_hvp(P: ProjectorSet, Z: BlockVar, sample: OracleSample, probes: ProbeSet) -> BlockVar:
    """Corrected diagonal blocks plus directly lifted off-diagonal blocks.

    Issues ``L + 1`` projected HVP queries: one single-block insertion per
    source layer and one all-layer probe query.
    """
    L = len(Z)
    Zt = project_down(P, Z)
    M = sample.hvp(probe_block(probes))
    out = [np.zeros_like(z) for z in Z]
    for t in range(L):
        resp = sample.hvp(embed(Zt.shape, t, Zt[t]))
        for l in range(L):
            lifted = P[l] @ resp[l]
            if l == t:
                out[l] = out[l] + _corr_combine(P[l], Z[l], Zt[l], lifted, M[l], probes.u[l], probes.xi[l])
            else:
                out[l] = out[l] + lifted
    return BlockVar(out)


def build_lower_direction(P: ProjectorSet, sample: OracleSample) -> BlockVar:
    return lift_up(P, sample.v)


def build_aux_direction(P: ProjectorSet, Z: BlockVar, sample: OracleSample, probes: ProbeSet) -> BlockVar:
    return assemble_multilayer_hvp(P, Z, sample, probes) - lift_up(P, sample.uy)


def build_naive_aux_direction(P: ProjectorSet, Z: BlockVar, sample: OracleSample) -> BlockVar:
    return naive_lifted_hvp(P, Z, sample) - lift_up(P, sample.uy)


def build_hypergrad_sample(P: ProjectorSet, Z: BlockVar, sample: OracleSample) -> np.ndarray:
    return sample.ux - sample.jvp(project_down(P, Z))


def expected_naive_hvp(H: np.ndarray, Z: np.ndarray, r: int) -> np.ndarray:
    """Closed-form mean of the lifted estimator for one ``m x n`` layer.

    ``H`` is the ``mn x mn`` matrix of the operator on row-major
    vectorizations.  Uses ``E[Q_ij Q_kl] = (a-b) d_ij d_kl + b d_ik d_jl +
    b d_il d_jk``, which splits the mean into a partial transpose, a partial
    trace and the exact action.
    """
    Z = np.asarray(Z, dtype=np.float64)
    m, n = Z.shape
    c = weingarten_constants(m, r)
    T = np.asarray(H, dtype=np.float64).reshape(m, n, m, n)  # T[j,c,k,d]
    swapped = np.einsum("jcid,jd->ic", T, Z)
    traced = np.einsum("jcjd,id->ic", T, Z)
    exact = np.einsum("ickd,kd->ic", T, Z)
    return (c.a - c.b) * exact + c.b * swapped + c.b * traced


def monte_carlo_hvp_means(
    stream, problem, x, Y: BlockVar, Z: BlockVar, ranks, trials: int, which=("corrected", "naive")
) -> dict[str, BlockVar]:
    """Empirical means of the assembled corrected and/or naive lifted estimators.

    Both estimators see the same projector draw in every trial.
    """
    from bros.randsrc import sample_probe_set, sample_projector_set

    if trials < 1:
        raise ValueError("trials must be >= 1")
    unknown = set(which) - {"corrected", "naive"}
    if unknown or not which:
        raise ValueError(f"which must name 'corrected' and/or 'naive', got {which!r}")
    acc = {name: [np.zeros(s) for s in Z.dims] for name in which}
    for t in range(trials):
        sub = stream.child(t)
        P = sample_projector_set(sub, problem.shape, ranks)
        sample = problem.sample_projected_oracles(sub, x, Y, P)
        if "corrected" in acc:
            est = assemble_multilayer_hvp(P, Z, sample, sample_probe_set(sub, problem.shape, ranks))
            for tot, blk in zip(acc["corrected"], est):
                tot += blk
        if "naive" in acc:
            for tot, blk in zip(acc["naive"], naive_lifted_hvp(P, Z, sample)):
                tot += blk
    return {name: BlockVar(a / trials for a in tots) for name, tots in acc.items()}
