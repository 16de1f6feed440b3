"""Multilayer block-matrix variables and their Frobenius product-space algebra.

A :class:`BlockVar` is an ordered tuple of dense real matrices, one per layer.
Products with a projector set are blockwise: ``project_down`` maps layer
``l`` to ``P_l.T @ U_l`` and ``lift_up`` maps it to ``P_l @ B_l``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

if TYPE_CHECKING:
    from bros.randsrc import ProjectorSet

DEFAULT_ATOL = 1e-10
DEFAULT_RTOL = 1e-8


class ShapeError(ValueError):
    """Raised when block layouts of two operands do not agree."""


@dataclass(frozen=True)
class BlockShape:
    layers: tuple[tuple[int, int], ...]

    def __post_init__(self):
        layers = tuple((int(m), int(n)) for m, n in self.layers)
        if not layers:
            raise ShapeError("BlockShape needs at least one layer")
        if any(m < 1 or n < 1 for m, n in layers):
            raise ShapeError(f"all block dimensions must be >= 1, got {layers}")
        object.__setattr__(self, "layers", layers)

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def __getitem__(self, i: int) -> tuple[int, int]:
        return self.layers[i]

    @cached_property
    def size(self) -> int:
        return sum(m * n for m, n in self.layers)

    @cached_property
    def offsets(self) -> tuple[int, ...]:
        out = [0]
        for m, n in self.layers:
            out.append(out[-1] + m * n)
        return tuple(out)

    def reduced(self, ranks: Sequence[int]) -> "BlockShape":
        if len(ranks) != len(self.layers):
            raise ShapeError(f"expected {len(self.layers)} ranks, got {len(ranks)}")
        return BlockShape(tuple((r, n) for r, (_, n) in zip(ranks, self.layers)))


class BlockVar:
    """Immutable tuple of per-layer matrices.

    Arithmetic operators act blockwise so update rules read like the math:
    ``Y - beta * V``.
    """

    __slots__ = ("blocks", "_shape")

    def __init__(self, blocks: Iterable[np.ndarray]):
        arrs = []
        for b in blocks:
            a = np.asarray(b, dtype=np.float64)
            if a.ndim != 2:
                raise ShapeError(f"each block must be 2-D, got ndim={a.ndim}")
            if a.flags.writeable:
                a = a.view()
                a.setflags(write=False)
            arrs.append(a)
        if not arrs:
            raise ShapeError("BlockVar needs at least one block")
        self.blocks: tuple[np.ndarray, ...] = tuple(arrs)
        self._shape = None

    @classmethod
    def _fresh(cls, arrays) -> "BlockVar":
        # trusted fast path: 2-D float64 arrays nobody else holds a writable handle to
        obj = cls.__new__(cls)
        arrs = tuple(arrays)
        for a in arrs:
            a.setflags(write=False)
        obj.blocks = arrs
        obj._shape = None
        return obj

    @property
    def shape(self) -> BlockShape:
        if self._shape is None:
            self._shape = BlockShape(tuple(a.shape for a in self.blocks))
        return self._shape

    @property
    def dims(self) -> tuple[tuple[int, int], ...]:
        return tuple(a.shape for a in self.blocks)

    @classmethod
    def zeros(cls, shape: BlockShape) -> "BlockVar":
        return cls._fresh(np.zeros((m, n)) for m, n in shape)

    @classmethod
    def from_flat(cls, vec: np.ndarray, shape: BlockShape) -> "BlockVar":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (shape.size,):
            raise ShapeError(f"flat vector of length {vec.shape} does not fit {shape}")
        off = shape.offsets
        return cls._fresh(vec[off[i]:off[i + 1]].reshape(m, n) for i, (m, n) in enumerate(shape))

    def flat(self) -> np.ndarray:
        """Row-major concatenation of all blocks."""
        return np.concatenate([b.ravel() for b in self.blocks])

    def __len__(self) -> int:
        return len(self.blocks)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.blocks[i]

    def __iter__(self):
        return iter(self.blocks)

    def _check(self, other: "BlockVar") -> None:
        if not isinstance(other, BlockVar):
            raise TypeError(f"expected BlockVar, got {type(other).__name__}")
        if other.dims != self.dims:
            raise ShapeError(f"block shapes differ: {list(self.dims)} vs {list(other.dims)}")

    def __add__(self, other: "BlockVar") -> "BlockVar":
        self._check(other)
        return BlockVar._fresh(a + b for a, b in zip(self.blocks, other.blocks))

    def __sub__(self, other: "BlockVar") -> "BlockVar":
        self._check(other)
        return BlockVar._fresh(a - b for a, b in zip(self.blocks, other.blocks))

    def __neg__(self) -> "BlockVar":
        return BlockVar._fresh(-a for a in self.blocks)

    def __mul__(self, s: float) -> "BlockVar":
        return BlockVar._fresh(np.multiply(float(s), a) for a in self.blocks)

    __rmul__ = __mul__

    def __truediv__(self, s: float) -> "BlockVar":
        return BlockVar._fresh(np.divide(a, float(s)) for a in self.blocks)

    def with_block(self, layer: int, value: np.ndarray) -> "BlockVar":
        blocks = list(self.blocks)
        value = np.asarray(value, dtype=np.float64)
        if value.shape != blocks[layer].shape:
            raise ShapeError(f"block {layer}: expected {blocks[layer].shape}, got {value.shape}")
        blocks[layer] = value
        return BlockVar(blocks)

    def is_finite(self) -> bool:
        return all(np.isfinite(b).all() for b in self.blocks)

    def allclose(self, other: "BlockVar", atol: float = DEFAULT_ATOL, rtol: float = DEFAULT_RTOL) -> bool:
        self._check(other)
        scale = max(norm(self), norm(other))
        return norm(self - other) <= max(atol, rtol * scale)

    def __repr__(self) -> str:
        return f"BlockVar(layers={list(self.shape.layers)})"


# Reduced (subspace) variables share the container; block l has shape (r_l, n_l).
ReducedVar = BlockVar


def inner(U: BlockVar, V: BlockVar) -> float:
    U._check(V)
    return float(sum(np.vdot(a, b) for a, b in zip(U.blocks, V.blocks)))


def norm(U: BlockVar) -> float:
    return float(np.sqrt(sum(np.vdot(a, a) for a in U.blocks)))


def axpy(a: float, U: BlockVar, V: BlockVar) -> BlockVar:
    """Return ``a * U + V`` blockwise."""
    U._check(V)
    return BlockVar._fresh(a * u + v for u, v in zip(U.blocks, V.blocks))


def _check_projector(P: "ProjectorSet", n_layers: int) -> None:
    if len(P) != n_layers:
        raise ShapeError(f"projector set has {len(P)} layers, variable has {n_layers}")


def project_down(P: "ProjectorSet", U: BlockVar) -> BlockVar:
    _check_projector(P, len(U))
    out = []
    for l, (p, u) in enumerate(zip(P.mats, U.blocks)):
        if p.shape[0] != u.shape[0]:
            raise ShapeError(f"layer {l}: projector rows {p.shape[0]} != block rows {u.shape[0]}")
        out.append(p.T @ u)
    return BlockVar._fresh(out)


def lift_up(P: "ProjectorSet", B: BlockVar) -> BlockVar:
    _check_projector(P, len(B))
    out = []
    for l, (p, b) in enumerate(zip(P.mats, B.blocks)):
        if p.shape[1] != b.shape[0]:
            raise ShapeError(f"layer {l}: projector cols {p.shape[1]} != block rows {b.shape[0]}")
        out.append(p @ b)
    return BlockVar._fresh(out)


def embed(shape: BlockShape, layer: int, value: np.ndarray) -> BlockVar:
    """Insert ``value`` into block ``layer`` of a zero variable of ``shape``."""
    value = np.asarray(value, dtype=np.float64)
    if value.shape != shape[layer]:
        raise ShapeError(f"block {layer}: expected {shape[layer]}, got {value.shape}")
    return BlockVar._fresh(value.view() if l == layer else np.zeros(d) for l, d in enumerate(shape))


# -- snapshots -----------------------------------------------------------------
#
# CSV layout: first line "layers,L"; per layer a header line "m,n" followed by
# one line holding the m*n row-major entries.  Binary layout: little-endian
# int64 L, then per layer int64 m, int64 n, float64[m*n] row-major.


def dump_csv(U: BlockVar, path: str | Path) -> None:
    lines = [f"layers,{len(U)}"]
    for b in U.blocks:
        m, n = b.shape
        lines.append(f"{m},{n}")
        lines.append(",".join(f"{v:.17g}" for v in b.ravel()))
    Path(path).write_text("\n".join(lines) + "\n")


def load_csv(path: str | Path) -> BlockVar:
    rows = Path(path).read_text().splitlines()
    tag, count = rows[0].split(",")
    if tag != "layers":
        raise ValueError(f"{path}: not a BlockVar dump")
    blocks = []
    for i in range(int(count)):
        m, n = (int(t) for t in rows[1 + 2 * i].split(","))
        vals = np.array([float(t) for t in rows[2 + 2 * i].split(",")])
        blocks.append(vals.reshape(m, n))
    return BlockVar(blocks)


def dump_binary(U: BlockVar, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<q", len(U)))
        for b in U.blocks:
            fh.write(struct.pack("<qq", *b.shape))
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_binary(path: str | Path) -> BlockVar:
    data = Path(path).read_bytes()
    (count,), pos = struct.unpack_from("<q", data, 0), 8
    blocks = []
    for _ in range(count):
        m, n = struct.unpack_from("<qq", data, pos)
        pos += 16
        blocks.append(np.frombuffer(data, dtype="<f8", count=m * n, offset=pos).reshape(m, n))
        pos += 8 * m * n
    return BlockVar(blocks)
