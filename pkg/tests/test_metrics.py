import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fleetrl.metrics import (
    DeltaSeries,
    ValueSeries,
    accumulate_values,
    negative_rate,
    rank_correlation,
    report,
    voc,
    voc_f1,
    vroc,
)


def oracle_rank_correlation(x, y):
    """Brute-force O(n^2) Spearman: pairwise-counted average ranks + Pearson."""
    def ranks(v):
        out = []
        for i in range(len(v)):
            less = sum(1 for j in range(len(v)) if v[j] < v[i])
            equal = sum(1 for j in range(len(v)) if v[j] == v[i])
            out.append(less + (equal + 1) / 2.0)
        return out

    rx, ry = ranks(list(x)), ranks(list(y))
    mx, my = sum(rx) / len(rx), sum(ry) / len(ry)
    num = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    dx = math.sqrt(sum((a - mx) ** 2 for a in rx))
    dy = math.sqrt(sum((b - my) ** 2 for b in ry))
    if dx == 0.0 or dy == 0.0:
        return 0.0
    return num / (dx * dy)


class TestAccumulateValues:
    def test_simple_recursion(self):
        out = accumulate_values(DeltaSeries((0.5, 0.5)))
        assert out.values == (0.0, 0.5, 0.75)

    def test_zero_deltas(self):
        assert accumulate_values(DeltaSeries((0.0, 0.0, 0.0))).values == (0.0,) * 4

    def test_saturation_freezes(self):
        out = accumulate_values(DeltaSeries((1.0, 0.3)))
        assert out.values == (0.0, 1.0, 1.0)

    def test_empty_series(self):
        assert accumulate_values(DeltaSeries(())).values == (0.0,)

    @given(st.lists(st.floats(-1.0, 1.0), max_size=30))
    def test_bounded(self, deltas):
        out = accumulate_values(DeltaSeries(tuple(deltas)))
        assert all(0.0 <= v <= 1.0 for v in out.values)


class TestVoc:
    def test_strictly_increasing(self):
        assert voc(ValueSeries((0.0, 0.2, 0.5, 0.9))) == 1.0

    def test_strictly_decreasing(self):
        # Not a legal accumulated series (starts at 0), so call the statistic directly.
        assert rank_correlation((0.9, 0.5, 0.2, 0.0), range(4)) == -1.0

    def test_worked_example(self):
        # ranks (1,3,2,4): 1 - 6*2/(4*15) = 0.8
        assert voc(ValueSeries((0.0, 0.5, 0.25, 0.75))) == pytest.approx(0.8, abs=1e-12)
        assert oracle_rank_correlation((0.0, 0.5, 0.25, 0.75), range(4)) == pytest.approx(0.8)

    def test_all_equal_is_zero(self):
        assert voc(ValueSeries((0.0, 0.0, 0.0))) == 0.0

    @given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=12))
    def test_matches_bruteforce(self, tail):
        values = [0.0] + tail
        got = rank_correlation(values, range(len(values)))
        want = oracle_rank_correlation(values, range(len(values)))
        assert got == pytest.approx(want, abs=1e-9)

    @given(st.lists(st.floats(0.001, 1.0), min_size=2, max_size=12))
    def test_monotone_transform_invariance(self, tail):
        values = [0.0] + list(np.cumsum(tail))
        scale = max(values)
        v1 = rank_correlation([v / scale for v in values], range(len(values)))
        v2 = rank_correlation([math.sqrt(v / scale) for v in values], range(len(values)))
        assert v1 == pytest.approx(v2, abs=1e-9)
        assert v1 == pytest.approx(1.0, abs=1e-12)


class TestVroc:
    def test_ideal_critic_on_reversed(self):
        # Monotone accumulation downward from negative deltas.
        assert vroc(DeltaSeries((-0.3, -0.2, -0.4, -0.1))) == 1.0

    def test_zero_deltas(self):
        assert vroc(DeltaSeries((0.0, 0.0, 0.0))) == 0.0

    def test_order_ignoring_critic_negates_voc(self):
        # A critic returning the same deltas forward and backward: 5-frame check.
        forward = (0.4, 0.2, 0.1, 0.3)
        fwd_voc = voc(accumulate_values(DeltaSeries(forward)))
        rev_deltas = DeltaSeries(tuple(reversed(forward)))
        assert vroc(rev_deltas) == pytest.approx(-fwd_voc, abs=1e-12)


class TestVocF1:
    def test_identity(self):
        assert voc_f1(1.0, 1.0) == pytest.approx(1.0)

    def test_worked_example(self):
        assert voc_f1(0.83, 0.95) == pytest.approx(0.886, abs=5e-4)

    def test_undefined(self):
        assert voc_f1(0.0, 0.0) is None
        assert voc_f1(0.5, -0.6) is None


class TestNegativeRate:
    def test_mixed(self):
        assert negative_rate(DeltaSeries((0.1, -0.2, 0.3, 0.0))) == 0.25

    def test_all_positive(self):
        assert negative_rate(DeltaSeries((0.1, 0.2))) == 0.0

    def test_all_negative(self):
        assert negative_rate(DeltaSeries((-0.1, -0.2))) == 1.0

    def test_empty_errors(self):
        with pytest.raises(ValueError, match="no deltas"):
            negative_rate(DeltaSeries(()))

    @given(st.lists(st.floats(-1.0, 1.0), min_size=1, max_size=20))
    def test_complement_bound(self, deltas):
        d = DeltaSeries(tuple(deltas))
        neg = DeltaSeries(tuple(-x for x in deltas))
        total = negative_rate(d) + negative_rate(neg)
        if any(x == 0.0 for x in deltas):
            assert total < 1.0 + 1e-12
        else:
            assert total == pytest.approx(1.0)


def test_report_assembles_all_fields():
    r = report(DeltaSeries((0.3, 0.3, 0.3)), DeltaSeries((-0.3, -0.3, -0.3)))
    assert r.voc == 1.0 and r.vroc == 1.0
    assert r.voc_f1 == pytest.approx(1.0)
    assert r.nr == 0.0
