from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from bros.memproxy import METHODS, BlockDims, peak_proxy, proxy_table, reduction_ratio


def dims(bs_ratio, rank_ratio, attention=False, n=1024):
    return BlockDims.from_ratios(n, bs_ratio, rank_ratio, include_attention=attention)


def test_totals_in_units_of_n_squared():
    d = dims(1, Fraction(1, 4))
    n2 = d.n**2
    assert peak_proxy("bros", d).total / n2 == Fraction(79, 2)
    assert peak_proxy("masoba", d).total / n2 == 63
    assert peak_proxy("fdehbo", d).total / n2 == 87
    assert peak_proxy("penalty", d).total / n2 == 39


def test_headline_reductions():
    assert float(reduction_ratio("bros", "masoba", dims(1, Fraction(1, 4)))) == pytest.approx(0.373, abs=5e-4)
    assert float(reduction_ratio("bros", "penalty", dims(2, Fraction(1, 4)))) == pytest.approx(0.077, abs=5e-4)
    assert reduction_ratio("bros", "masoba", dims(1, Fraction(1, 4))) == Fraction(47, 126)


def test_self_ratio_and_aliases():
    d = dims(1, 0.25)
    for m in METHODS:
        assert reduction_ratio(m, m, d) == 0
    assert peak_proxy("MA-SOBA", d) == peak_proxy("masoba", d)
    with pytest.raises(ValueError):
        peak_proxy("adamw", d)


def test_breakdown_sums():
    d = BlockDims(64, 2, 48, 8, 16)
    for m in METHODS:
        b = peak_proxy(m, d)
        parts = (b.state, b.hidden_activation, b.attention, b.projected_activation, b.directions)
        assert b.total == sum(parts) and min(parts) >= 0
    assert peak_proxy("bros", d).attention == 2 * 2 * 8 * 48 * 48
    assert peak_proxy("bros", BlockDims(64, 2, 48, 8, 16, include_attention=False)).attention == 0


def test_rank_zero_lower_bound():
    d = BlockDims(32, 1, 32, 4, 0)
    b = peak_proxy("bros", d)
    assert d.degenerate and b.directions == 0 and b.projected_activation == 0


@pytest.mark.parametrize("bad", [dict(n=0), dict(b=-1), dict(r=-1), dict(r=65)])
def test_invalid_dims(bad):
    kw = dict(n=64, b=1, s=64, h=4, r=8)
    kw.update(bad)
    with pytest.raises(ValueError):
        BlockDims(**kw)


@given(st.integers(1, 200), st.integers(1, 4), st.integers(1, 64))
def test_bros_total_increases_in_rank(n, b, s):
    totals = [peak_proxy("bros", BlockDims(n, b, s, 4, r)).total for r in range(n + 1)]
    assert all(x < y for x, y in zip(totals, totals[1:]))


def test_rank_sweep_table():
    rows = []
    for rho in ("0.1", "0.25", "0.5"):
        rows += proxy_table(["bros"], dims(1, rho))
    red = [r["reduction_vs_masoba"] for r in rows]
    assert red[0] > red[1] > red[2]
    assert rows[1]["total"] == Fraction(79, 2)
