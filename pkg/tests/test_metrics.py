import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gainscout.grid import UrbanWorld
from gainscout.metrics import (
    binned_rmse,
    evaluation_mask,
    goodness_of_fit,
    rmse,
)

from conftest import make_open_world


class TestMask:
    def test_excludes_indoor_and_visited(self):
        w = make_open_world(4, spacing=10.0)
        h = w.heights.copy()
        h[0, 0] = 30.0
        w = UrbanWorld(spec=w.spec, heights=h)
        mask = evaluation_mask(w, [(1, 1), (2, 3)])
        grid = mask.reshape(4, 4)
        assert not grid[0, 0]  # indoor
        assert not grid[1, 1] and not grid[2, 3]  # visited
        assert grid.sum() == 16 - 3

    def test_visit_outside_grid_ignored(self):
        w = make_open_world(3)
        mask = evaluation_mask(w, [(99, 99)])
        assert mask.all()


class TestRmse:
    def test_hand_value(self):
        t = np.array([0.0, 0.0, 10.0])
        p = np.array([3.0, -4.0, 10.0])
        m = np.array([True, True, False])
        assert rmse(t, p, m) == pytest.approx(math.sqrt((9 + 16) / 2))

    def test_mask_restricts(self):
        t = np.array([0.0, 100.0])
        p = np.array([1.0, 0.0])
        m = np.array([True, False])
        assert rmse(t, p, m) == pytest.approx(1.0)

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError):
            rmse(np.zeros(3), np.zeros(3), np.zeros(3, dtype=bool))

    @given(hnp.arrays(np.float64, 8, elements=st.floats(-50, 50)),
           st.floats(-5, 5))
    @settings(max_examples=50, deadline=None)
    def test_scales_linearly_with_errors(self, err, c):
        t = np.zeros(8)
        m = np.ones(8, dtype=bool)
        base = rmse(t, err, m)
        scaled = rmse(t, c * err, m)
        assert scaled == pytest.approx(abs(c) * base, rel=1e-9, abs=1e-9)

    @given(st.permutations(list(range(8))))
    @settings(max_examples=25, deadline=None)
    def test_permutation_invariant(self, perm):
        rng = np.random.default_rng(0)
        t, p = rng.normal(size=8), rng.normal(size=8)
        m = np.ones(8, dtype=bool)
        perm = np.array(perm)
        assert rmse(t[perm], p[perm], m) == pytest.approx(rmse(t, p, m))


class TestGoodnessOfFit:
    def test_calibrated_is_zero(self):
        t = np.array([1.0, 2.0, 3.0])
        p = t - np.array([0.5, -1.0, 2.0])
        var = (t - p) ** 2
        m = np.ones(3, dtype=bool)
        assert goodness_of_fit(t, p, var, m) == pytest.approx(0.0, abs=1e-12)

    def test_overconfident_by_factor_e_is_one(self):
        t = np.array([1.0, 2.0, 3.0])
        p = t - np.array([0.5, -1.0, 2.0])
        var = (t - p) ** 2 / math.e
        m = np.ones(3, dtype=bool)
        assert goodness_of_fit(t, p, var, m) == pytest.approx(1.0, abs=1e-12)

    @given(st.floats(0.1, 10.0))
    @settings(max_examples=30, deadline=None)
    def test_scaling_all_stds_shifts_by_minus_two_log_c(self, c):
        rng = np.random.default_rng(1)
        t, p = rng.normal(size=10), rng.normal(size=10)
        var = rng.uniform(0.5, 2.0, 10)
        m = np.ones(10, dtype=bool)
        base = goodness_of_fit(t, p, var, m)
        scaled = goodness_of_fit(t, p, (c**2) * var, m)
        assert scaled == pytest.approx(base - 2 * math.log(c), rel=1e-9, abs=1e-9)

    def test_nonpositive_variance_rejected(self):
        with pytest.raises(ValueError):
            goodness_of_fit(np.ones(2), np.zeros(2), np.array([1.0, 0.0]),
                            np.ones(2, dtype=bool))


class TestBinnedRmse:
    def test_single_bin_equals_global(self):
        rng = np.random.default_rng(2)
        t = rng.uniform(-120, -110, 30)  # all inside one bin
        p = t + rng.normal(0, 3, 30)
        m = np.ones(30, dtype=bool)
        edges, per_bin, counts = binned_rmse(t, p, m)
        b = np.flatnonzero(counts)[0]
        assert counts.sum() == counts[b] == 30
        assert per_bin[b] == pytest.approx(rmse(t, p, m))

    def test_empty_bins_are_nan_with_zero_count(self):
        t = np.full(5, -100.0)
        p = t + 1.0
        m = np.ones(5, dtype=bool)
        edges, per_bin, counts = binned_rmse(t, p, m)
        assert (counts == 0).sum() == 15
        assert np.isnan(per_bin[counts == 0]).all()

    def test_two_bin_hand_case(self):
        # two cells per bin with known disjoint errors
        t = np.array([-232.0, -235.0, -89.0, -85.0])
        p = t + np.array([1.0, -1.0, 3.0, -3.0])
        m = np.ones(4, dtype=bool)
        edges, per_bin, counts = binned_rmse(t, p, m)
        assert counts[0] == 2 and counts[-1] == 2
        assert per_bin[0] == pytest.approx(1.0)
        assert per_bin[-1] == pytest.approx(3.0)

    def test_count_weighted_bins_recover_global_rmse(self):
        rng = np.random.default_rng(3)
        t = rng.uniform(-239, -81, 200)
        p = t + rng.normal(0, 5, 200)
        m = np.ones(200, dtype=bool)
        _, per_bin, counts = binned_rmse(t, p, m)
        filled = counts > 0
        weighted = np.sqrt(np.sum(counts[filled] * per_bin[filled] ** 2) / counts.sum())
        assert weighted == pytest.approx(rmse(t, p, m), rel=1e-9)

    def test_bad_range_rejected(self):
        with pytest.raises(ValueError):
            binned_rmse(np.zeros(2), np.zeros(2), np.ones(2, dtype=bool),
                        bin_range=(0.0, 0.0))
