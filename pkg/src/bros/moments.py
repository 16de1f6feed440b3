"""Second-order moments of the lifted projector ``Q = P P^T``.

For a scaled Haar projector of shape (m, r),

    E[Q A Q] = (a - b) A + b A^T + b tr(A) I,
    a = m (m r + m - 2) / (r (m - 1) (m + 2)),
    b = m (m - r) / (r (m - 1) (m + 2)),

and for independent layers E[Q_l A Q_t] = A.  Constants are carried as exact
fractions so downstream coefficients can be compared without rounding.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from bros.randsrc import Purpose, RngStream, sample_haar_projectors

_CHUNK = 4096


@dataclass(frozen=True)
class WeingartenConstants:
    m: int
    r: int
    a_exact: Fraction
    b_exact: Fraction

    @property
    def a(self) -> float:
        return float(self.a_exact)

    @property
    def b(self) -> float:
        return float(self.b_exact)


def weingarten_constants(m: int, r: int) -> WeingartenConstants:
    if m < 2:
        raise ValueError(f"need m >= 2, got m={m}")
    if not 2 <= r <= m:
        raise ValueError(f"need 2 <= r <= m, got r={r}, m={m}")
    denom = r * (m - 1) * (m + 2)
    a = Fraction(m * (m * r + m - 2), denom)
    b = Fraction(m * (m - r), denom)
    return WeingartenConstants(m, r, a, b)


def expected_self_sandwich(A: np.ndarray, r: int) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"A must be square, got shape {A.shape}")
    m = A.shape[0]
    c = weingarten_constants(m, r)
    return (c.a - c.b) * A + c.b * A.T + c.b * np.trace(A) * np.eye(m)


def expected_self_sandwich_exact(A, r: int) -> np.ndarray:
    """Rational version of :func:`expected_self_sandwich` for integer or Fraction input.

    Returns an object array of ``Fraction`` entries.
    """
    A = np.array([[Fraction(v) for v in row] for row in A], dtype=object)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"A must be square, got shape {A.shape}")
    m = A.shape[0]
    c = weingarten_constants(m, r)
    a, b = c.a_exact, c.b_exact
    tr = sum(A[i, i] for i in range(m))
    out = (a - b) * A + b * A.T
    for i in range(m):
        out[i, i] += b * tr
    return out


def mean_field_lifted_hessian(H: np.ndarray, r: int, atol: float = 1e-12) -> np.ndarray:
    """Mean of ``Q H Q`` for a symmetric columnwise Hessian: ``a H + b tr(H) I``."""
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ValueError(f"H must be square, got shape {H.shape}")
    if np.abs(H - H.T).max() > atol * max(1.0, np.abs(H).max()):
        raise ValueError("mean-field Hessian requires a symmetric H")
    c = weingarten_constants(H.shape[0], r)
    return c.a * H + c.b * np.trace(H) * np.eye(H.shape[0])


def _chunks(trials: int):
    done = 0
    while done < trials:
        size = min(_CHUNK, trials - done)
        yield done // _CHUNK, size
        done += size


def monte_carlo_self_sandwich(stream: RngStream, A: np.ndarray, r: int, trials: int) -> np.ndarray:
    """Empirical mean of ``Q A Q`` over i.i.d. scaled Haar projectors.

    Draws are made in fixed-size chunks with one sub-stream per chunk, and
    chunk sums are added in chunk order, so the result is reproducible.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    A = np.asarray(A, dtype=np.float64)
    m = A.shape[0]
    total = np.zeros_like(A)
    for idx, size in _chunks(trials):
        P = sample_haar_projectors(stream.child(Purpose.TRIAL, idx), m, r, size)
        Q = P @ np.swapaxes(P, -1, -2)
        total += (Q @ A @ Q).sum(axis=0)
    return total / trials


def monte_carlo_cross_sandwich(
    stream: RngStream, A: np.ndarray, r_left: int, r_right: int, trials: int
) -> np.ndarray:
    """Empirical mean of ``Q_l A Q_t`` for independent projectors on each side."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    A = np.asarray(A, dtype=np.float64)
    m_l, m_t = A.shape
    total = np.zeros_like(A)
    for idx, size in _chunks(trials):
        sub = stream.child(Purpose.TRIAL, idx)
        Pl = sample_haar_projectors(sub.child(0), m_l, r_left, size)
        Pt = sample_haar_projectors(sub.child(1), m_t, r_right, size)
        Ql = Pl @ np.swapaxes(Pl, -1, -2)
        Qt = Pt @ np.swapaxes(Pt, -1, -2)
        total += (Ql @ A @ Qt).sum(axis=0)
    return total / trials


def moment_table(
    stream: RngStream, cases: list[tuple[int, int]], trials: int, seed_matrix: int = 0
) -> list[dict]:
    """Closed-form vs Monte Carlo rows for a list of (m, r) cases.

    Each case uses ``A = diag(1..m)`` plus a fixed random asymmetric part so
    the transpose term is exercised.
    """
    rows = []
    for i, (m, r) in enumerate(cases):
        gen = np.random.default_rng([seed_matrix, m, r])
        A = np.diag(np.arange(1.0, m + 1)) + 0.5 * gen.standard_normal((m, m))
        exact = expected_self_sandwich(A, r)
        mc = monte_carlo_self_sandwich(stream.child(i), A, r, trials)
        c = weingarten_constants(m, r)
        rows.append({
            "m": m,
            "r": r,
            "a": str(c.a_exact),
            "b": str(c.b_exact),
            "trials": trials,
            "rel_frobenius_error": float(np.linalg.norm(mc - exact) / np.linalg.norm(exact)),
        })
    return rows
