import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polarenc import geometry as G

CFG = G.BinningConfig()  # rho_max 500, 4 distance bins, 8 angle bins

coords = st.floats(min_value=0.0, max_value=1000.0, allow_nan=False)
centers = st.builds(G.Center, coords, coords)


def wrap_angle(t: float) -> float:
    """Wrap to (-pi, pi]."""
    t = math.fmod(t + math.pi, 2 * math.pi)
    if t <= 0:
        t += 2 * math.pi
    return t - math.pi


class TestCenter:
    def test_midpoint(self):
        assert G.center(G.BBox(0, 0, 10, 20)) == (5, 10)

    def test_degenerate_box(self):
        assert G.center(G.BBox(7, 7, 7, 7)) == (7, 7)

    def test_full_page(self):
        assert G.center(G.BBox(0, 0, 1000, 1000)) == (500, 500)


class TestBBoxInvariants:
    @pytest.mark.parametrize("box", [(-1, 0, 5, 5), (0, 0, 1001, 5), (5, 0, 4, 5), (0, 9, 5, 8)])
    def test_invalid_rejected(self, box):
        with pytest.raises(ValueError):
            G.BBox(*box)

    def test_zero_area_legal(self):
        G.BBox(3, 3, 3, 3)


class TestRho:
    def test_3_4_5(self):
        assert G.rho(G.Center(0, 0), G.Center(3, 4)) == 5

    def test_identical(self):
        assert G.rho(G.Center(7, 7), G.Center(7, 7)) == 0

    def test_translated_3_4_5(self):
        assert G.rho(G.Center(1, 1), G.Center(4, 5)) == 5

    @given(centers, centers)
    def test_symmetry(self, a, b):
        assert G.rho(a, b) == G.rho(b, a)


class TestTheta:
    def test_along_polar_axis(self):
        assert G.theta(G.Center(0, 0), G.Center(5, 0)) == 0

    def test_perpendicular(self):
        assert G.theta(G.Center(0, 0), G.Center(0, 5)) == math.pi / 2

    def test_identical_is_zero(self):
        assert G.theta(G.Center(3, 3), G.Center(3, 3)) == 0.0

    @given(centers, centers)
    def test_range(self, a, b):
        t = G.theta(a, b)
        assert -math.pi < t <= math.pi

    @given(centers, centers)
    def test_antipodality(self, a, b):
        if a == b:
            return
        fwd = G.theta(a, b)
        back = G.theta(b, a)
        assert wrap_angle(back + math.pi) == pytest.approx(fwd, abs=1e-12)


class TestQuantizeDistance:
    def test_lower_edge(self):
        assert G.quantize_distance(0.0, CFG) == 0

    def test_cap_at_rho_max(self):
        assert G.quantize_distance(9999.0, CFG) == 3

    def test_interior(self):
        assert G.quantize_distance(250.0, CFG) == 2

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            G.quantize_distance(-1.0, CFG)

    @given(st.floats(min_value=0, max_value=1e6, allow_nan=False),
           st.floats(min_value=0, max_value=1e6, allow_nan=False))
    def test_monotone(self, r1, r2):
        lo, hi = sorted((r1, r2))
        assert G.quantize_distance(lo, CFG) <= G.quantize_distance(hi, CFG)

    @given(st.floats(min_value=0, max_value=1e9, allow_nan=False))
    def test_total(self, r):
        assert 0 <= G.quantize_distance(r, CFG) < CFG.n_dist_bins


class TestQuantizeAngle:
    def test_lower_edge(self):
        assert G.quantize_angle(-math.pi + 1e-9, CFG) == 0

    def test_zero(self):
        assert G.quantize_angle(0.0, CFG) == 4

    def test_pi_clamps_to_last(self):
        assert G.quantize_angle(math.pi, CFG) == 7

    @given(st.floats(min_value=-math.pi + 1e-12, max_value=math.pi, allow_nan=False))
    def test_total(self, t):
        assert 0 <= G.quantize_angle(t, CFG) < CFG.n_angle_bins


class TestRelativeBins:
    def test_single_token(self):
        bins = G.relative_bins([G.Center(10, 10)], CFG)
        assert G.pair_at(bins, 0, 0) == (0, 4)

    def test_identical_centers(self):
        bins = G.relative_bins([G.Center(5, 5), G.Center(5, 5)], CFG)
        assert G.pair_at(bins, 0, 1) == G.pair_at(bins, 0, 0) == (0, 4)

    def test_collinear_horizontal_saturation(self):
        # three points spaced rho_max apart along +x
        pts = [G.Center(0, 0), G.Center(500, 0), G.Center(1000, 0)]
        bins = G.relative_bins(pts, CFG)
        for i in range(3):
            for j in range(3):
                expect = (
                    G.quantize_distance(G.rho(pts[i], pts[j]), CFG),
                    G.quantize_angle(G.theta(pts[i], pts[j]), CFG),
                )
                assert G.pair_at(bins, i, j) == expect
        assert bins.angle[0, 1] == bins.angle[0, 2] == bins.angle[1, 2] == 4
        assert bins.dist[0, 1] == bins.dist[0, 2] == 3

    def test_matches_scalar_brute_force(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(0, 1000, size=(17, 2))
        pts[3] = pts[11]  # include a coincident pair
        bins = G.relative_bins(pts, CFG)
        for i in range(17):
            for j in range(17):
                ci, cj = G.Center(*pts[i]), G.Center(*pts[j])
                assert bins.dist[i, j] == G.quantize_distance(G.rho(ci, cj), CFG)
                assert bins.angle[i, j] == G.quantize_angle(G.theta(ci, cj), CFG)

    def test_distance_matrix_symmetric(self):
        rng = np.random.default_rng(1)
        bins = G.relative_bins(rng.uniform(0, 1000, size=(9, 2)), CFG)
        assert np.array_equal(bins.dist, bins.dist.T)


class TestTranslationAndScale:
    @given(st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=30)
    def test_translation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(100, 900, size=(8, 2))
        shift = rng.integers(-90, 90, size=2).astype(float)
        a = G.relative_bins(pts, CFG)
        b = G.relative_bins(pts + shift, CFG)
        assert np.array_equal(a.dist, b.dist) and np.array_equal(a.angle, b.angle)

    @given(st.integers(min_value=0, max_value=2**32 - 1),
           st.floats(min_value=0.1, max_value=10.0, allow_nan=False))
    @settings(max_examples=30)
    def test_positive_scale_angle_invariance(self, seed, s):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(0, 100, size=(6, 2))
        for i in range(6):
            for j in range(6):
                ci, cj = G.Center(*pts[i]), G.Center(*pts[j])
                si, sj = G.Center(*(pts[i] * s)), G.Center(*(pts[j] * s))
                assert G.theta(si, sj) == pytest.approx(G.theta(ci, cj), abs=1e-9)
                assert G.rho(si, sj) == pytest.approx(s * G.rho(ci, cj), rel=1e-12)


class TestCartesianBins:
    def test_identical_boxes_center_bin(self):
        boxes = [G.BBox(10, 10, 60, 40), G.BBox(10, 10, 60, 40)]
        bins = G.cartesian_relative_bins(boxes, CFG)
        assert bins.dx[0, 1] == bins.dy[0, 1] == CFG.n_dist_bins

    def test_clip_boundary(self):
        boxes = [G.BBox(0, 100, 50, 130), G.BBox(500, 100, 550, 130)]
        bins = G.cartesian_relative_bins(boxes, CFG)
        assert bins.dx[0, 1] == 2 * CFG.n_dist_bins - 1  # exactly rho_max right
        assert bins.dy[0, 1] == CFG.n_dist_bins

    def test_matches_scalar_brute_force(self):
        rng = np.random.default_rng(2)
        raw = rng.integers(0, 900, size=(12, 2))
        boxes = np.concatenate([raw, raw + rng.integers(1, 100, size=(12, 2))], axis=1)
        bins = G.cartesian_relative_bins(boxes, CFG)
        n = 2 * CFG.n_dist_bins
        for i in range(12):
            for j in range(12):
                for arr, axis in ((bins.dx, 0), (bins.dy, 1)):
                    d = float(boxes[j][axis] - boxes[i][axis])
                    d = max(-CFG.rho_max, min(CFG.rho_max, d))
                    expect = min(math.floor((d + CFG.rho_max) * CFG.n_dist_bins / CFG.rho_max), n - 1)
                    assert arr[i, j] == expect


class TestBinningConfigValidation:
    def test_bad_rho_max(self):
        with pytest.raises(ValueError):
            G.BinningConfig(rho_max=0)

    def test_bad_bin_counts(self):
        with pytest.raises(ValueError):
            G.BinningConfig(n_dist_bins=0)
