"""Seeded, order-independent randomness.

Every draw is keyed by a path of integers below a 64-bit root seed, e.g.
``(iteration, purpose, layer)``.  A path maps to its own Philox counter-based
generator whose 128-bit key is ``(seed, splitmix64-fold(path))``, so the
values drawn for one path never depend on what other paths consumed.
Gaussian variates come from numpy's ziggurat ``standard_normal``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import lapack

from bros.blockmat import BlockShape, BlockVar, ShapeError


_MASK = (1 << 64) - 1
_dgeqrf, _dorgqr = lapack.dgeqrf, lapack.dorgqr


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _fold_path(path: tuple[int, ...]) -> int:
    h = _splitmix64(len(path))
    for t in path:
        h = _splitmix64(h ^ (t & _MASK))
    return h


class Purpose(enum.IntEnum):
    PROJECTOR = 1
    PROBE = 2
    ORACLE = 3
    NOISE = 4
    DATA = 5
    PROBLEM = 6
    TRIAL = 7


@dataclass(frozen=True)
class RngStream:
    seed: int
    path: tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {self.seed}")
        object.__setattr__(self, "path", tuple(int(t) for t in self.path))

    def child(self, *tags: int) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(int(t) for t in tags))

    def generator(self) -> np.random.Generator:
        key = np.array([int(self.seed), _fold_path(self.path)], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def describe(self) -> str:
        return f"seed={self.seed} path={'/'.join(map(str, self.path)) or '-'}"


def _haar_columns(gen: np.random.Generator, m: int, r: int, count: int | None = None) -> np.ndarray:
    shape = (m, r) if count is None else (count, m, r)
    G = gen.standard_normal(shape)
    if count is None:
        # raw Householder routines: same factors as np.linalg.qr without its wrapper cost
        qr, tau, _, _ = _dgeqrf(G)
        diag = np.diagonal(qr).copy()
        Q, _, _ = _dorgqr(qr, tau)
    else:
        Q, R = np.linalg.qr(G)
        diag = np.diagonal(R, axis1=-2, axis2=-1)
    # positive-diagonal convention makes the map G -> Q unique, hence Haar
    return np.where((diag < 0)[..., None, :], -Q, Q)


def _check_rank(m: int, r: int) -> None:
    if r < 2:
        raise ValueError(f"projector rank must be >= 2, got r={r}")
    if r > m:
        raise ValueError(f"projector rank r={r} exceeds row dimension m={m}")


def sample_haar_projector(stream: RngStream, m: int, r: int) -> np.ndarray:
    """Scaled Haar projector ``sqrt(m/r) * Q[:, :r]`` of shape (m, r)."""
    _check_rank(m, r)
    return np.sqrt(m / r) * _haar_columns(stream.generator(), m, r)


def sample_haar_projectors(stream: RngStream, m: int, r: int, count: int) -> np.ndarray:
    """``count`` i.i.d. scaled Haar projectors stacked as (count, m, r).

    Vectorized path for Monte Carlo moment checks; a single generator feeds
    the whole batch so results depend on ``count``.
    """
    _check_rank(m, r)
    return np.sqrt(m / r) * _haar_columns(stream.generator(), m, r, count)


@dataclass(frozen=True)
class ProjectorSet:
    mats: tuple[np.ndarray, ...]

    def __post_init__(self):
        mats = []
        for P in self.mats:
            P = np.asarray(P, dtype=np.float64)
            if P.flags.writeable:
                P = P.view()
                P.setflags(write=False)
            mats.append(P)
        object.__setattr__(self, "mats", tuple(mats))

    @classmethod
    def identity(cls, shape: BlockShape) -> "ProjectorSet":
        """Full-rank identity projectors (the full-space method)."""
        return cls(tuple(np.eye(m) for m, _ in shape))

    def __len__(self) -> int:
        return len(self.mats)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.mats[i]

    @property
    def ranks(self) -> tuple[int, ...]:
        return tuple(P.shape[1] for P in self.mats)

    @property
    def rows(self) -> tuple[int, ...]:
        return tuple(P.shape[0] for P in self.mats)

    def gram_error(self) -> float:
        """Largest deviation of ``P.T @ P`` from ``(m/r) I`` over layers."""
        errs = []
        for P in self.mats:
            m, r = P.shape
            errs.append(np.abs(P.T @ P - (m / r) * np.eye(r)).max())
        return float(max(errs))


@dataclass(frozen=True)
class ProbeSet:
    u: tuple[np.ndarray, ...]
    xi: tuple[np.ndarray, ...]

    def __len__(self) -> int:
        return len(self.u)


def _check_ranks(shape: BlockShape, ranks: Sequence[int]) -> None:
    if len(ranks) != len(shape):
        raise ShapeError(f"expected one rank per layer ({len(shape)}), got {len(ranks)}")


def sample_projector_set(stream: RngStream, shape: BlockShape, ranks: Sequence[int]) -> ProjectorSet:
    _check_ranks(shape, ranks)
    return ProjectorSet(tuple(
        sample_haar_projector(stream.child(Purpose.PROJECTOR, l), m, r)
        for l, ((m, _), r) in enumerate(zip(shape, ranks))
    ))


def sample_probe_set(stream: RngStream, shape: BlockShape, ranks: Sequence[int]) -> ProbeSet:
    _check_ranks(shape, ranks)
    # one stream for the whole set; layers take consecutive slices (u_l then xi_l)
    sizes = [k for (_, n), r in zip(shape, ranks) for k in (n, r)]
    signs = np.where(stream.child(Purpose.PROBE).generator().random(sum(sizes)) < 0.5, -1.0, 1.0)
    parts = np.split(signs, np.cumsum(sizes)[:-1])
    return ProbeSet(tuple(parts[0::2]), tuple(parts[1::2]))


def sample_gaussian_blockvar(stream: RngStream, shape: BlockShape, sigma: float) -> BlockVar:
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return BlockVar.zeros(shape)
    gen = stream.generator()
    return BlockVar(sigma * gen.standard_normal((m, n)) for m, n in shape)
