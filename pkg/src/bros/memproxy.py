"""Peak-memory proxy for one non-GQA LLaMA-style decoder block.

Counts scalar slots (no datatype constants) for the trainable lower network:
persistent lower/auxiliary states, saved activations and the online
gradient/direction buffers.  With hidden size ``n``, micro-batch ``b``,
sequence length ``s``, ``h`` heads and subspace rank ``r``:

=========  ======  ===============================  =============
method     state   activations                      directions
=========  ======  ===============================  =============
bros       24n^2   28/3 bsn + 2bhs^2 + 4bsr          62/3 rn
masoba     24n^2   15 bsn + 2bhs^2                   24n^2
fdehbo     48n^2   15 bsn + 2bhs^2                   24n^2
penalty    12n^2   15 bsn + 2bhs^2                   12n^2
=========  ======  ===============================  =============

All arithmetic is exact (``fractions.Fraction``).
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from fractions import Fraction
from numbers import Rational

METHODS = ("bros", "masoba", "fdehbo", "penalty")
_ALIASES = {"ma-soba": "masoba", "fdehbo": "fdehbo", "fde-hbo": "fdehbo"}


def _frac(v) -> Fraction:
    if isinstance(v, (int, Rational)):
        return Fraction(v)
    return Fraction(str(v))


@dataclass(frozen=True)
class BlockDims:
    n: Fraction
    b: Fraction
    s: Fraction
    h: Fraction
    r: Fraction
    include_attention: bool = True

    def __post_init__(self):
        for f in ("n", "b", "s", "h", "r"):
            object.__setattr__(self, f, _frac(getattr(self, f)))
        if min(self.n, self.b, self.s, self.h) <= 0:
            raise ValueError("n, b, s, h must be positive")
        if self.r < 0:
            raise ValueError("rank must be non-negative")
        if self.r > self.n:
            raise ValueError(f"rank {self.r} exceeds hidden size {self.n}")

    @classmethod
    def from_ratios(cls, n, bs_ratio, rank_ratio, b=1, h=16, include_attention=True) -> "BlockDims":
        """Dims with ``b*s = bs_ratio * n`` and ``r = rank_ratio * n``."""
        n = _frac(n)
        return cls(n, _frac(b), _frac(bs_ratio) * n / _frac(b), _frac(h), _frac(rank_ratio) * n, include_attention)

    @property
    def degenerate(self) -> bool:
        """True when r = 0, which only makes sense as a lower-bound evaluation."""
        return self.r == 0


@dataclass(frozen=True)
class MemoryBreakdown:
    method: str
    state: Fraction
    hidden_activation: Fraction
    attention: Fraction
    projected_activation: Fraction
    directions: Fraction

    @property
    def total(self) -> Fraction:
        return self.state + self.hidden_activation + self.attention + self.projected_activation + self.directions

    def as_row(self, scale: Fraction = Fraction(1)) -> dict:
        row = {"method": self.method}
        for f in fields(self):
            if f.name != "method":
                row[f.name] = getattr(self, f.name) / scale
        row["total"] = self.total / scale
        return row


def _canon(method: str) -> str:
    key = method.lower()
    key = _ALIASES.get(key, key)
    if key not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    return key


def peak_proxy(method: str, dims: BlockDims) -> MemoryBreakdown:
    method = _canon(method)
    n, b, s, h, r = dims.n, dims.b, dims.s, dims.h, dims.r
    bsn = b * s * n
    attn = 2 * b * h * s * s if dims.include_attention else Fraction(0)
    if method == "bros":
        return MemoryBreakdown(method, 24 * n * n, Fraction(28, 3) * bsn, attn, 4 * b * s * r, Fraction(62, 3) * r * n)
    state, dirs = {"masoba": (24, 24), "fdehbo": (48, 24), "penalty": (12, 12)}[method]
    zero = Fraction(0)
    return MemoryBreakdown(method, state * n * n, 15 * bsn, attn, zero, dirs * n * n)


def reduction_ratio(method_a: str, method_b: str, dims: BlockDims) -> Fraction:
    """Relative saving of ``method_a`` against ``method_b``: (T_b - T_a) / T_b."""
    ta = peak_proxy(method_a, dims).total
    tb = peak_proxy(method_b, dims).total
    if tb == 0:
        raise ZeroDivisionError(f"{method_b} has zero proxy total")
    return (tb - ta) / tb


def proxy_table(methods, dims: BlockDims, baseline: str = "masoba", normalize: bool = True) -> list[dict]:
    """One row per method; slot counts in units of n^2 when ``normalize``."""
    scale = dims.n * dims.n if normalize else Fraction(1)
    rows = []
    for m in methods:
        row = peak_proxy(m, dims).as_row(scale)
        row["reduction_vs_" + _canon(baseline)] = reduction_ratio(m, baseline, dims)
        rows.append(row)
    return rows
