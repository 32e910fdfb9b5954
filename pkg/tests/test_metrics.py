import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from earsr.errors import EmptySet, ZeroMass
from earsr.imaging import resample_to_dims
from earsr.metrics import (
    RatingSample,
    hu_moments,
    hum_distance,
    hum_distance_from_vectors,
    m_hum,
    wilcoxon_rank_sum,
)


def asym_blob(n):
    """Asymmetric multi-disk scene; all seven invariants are well away from zero."""
    g = np.zeros((n, n))
    ys, xs = np.mgrid[0:n, 0:n]
    for cy, cx, r, a in [(0.3, 0.35, 0.18, 1.0), (0.62, 0.55, 0.12, 0.7), (0.45, 0.72, 0.07, 0.9)]:
        d = np.hypot(ys - cy * n, xs - cx * n)
        g = np.maximum(g, np.clip(r * n - d + 0.5, 0, 1) * a)
    return g


def hard_blob(n):
    g = np.zeros((n, n))
    ys, xs = np.mgrid[0:n, 0:n]
    for cy, cx, r, a in [(0.3, 0.35, 0.18, 1.0), (0.62, 0.55, 0.12, 0.7), (0.45, 0.72, 0.07, 0.9)]:
        d = np.hypot(ys - cy * n, xs - cx * n)
        g = np.maximum(g, (d <= r * n).astype(float) * a)
    return g


def disk(n, r_frac=0.3):
    ys, xs = np.mgrid[0:n, 0:n]
    d = np.hypot(ys - n / 2 + 0.5, xs - n / 2 + 0.5)
    return np.clip(r_frac * n - d + 0.5, 0, 1)


def annulus(n, outer=0.3, inner=0.25):
    ys, xs = np.mgrid[0:n, 0:n]
    d = np.hypot(ys - n / 2 + 0.5, xs - n / 2 + 0.5)
    return np.clip(
        np.clip(outer * n - d + 0.5, 0, 1) - np.clip(inner * n - d + 0.5, 0, 1), 0, 1
    )


class TestHuMoments:
    def test_uniform_square_h1(self):
        # continuous solid square: eta20 = eta02 = 1/12, so h1 = 1/6
        square = np.ones((512, 512))
        h = hu_moments(square)
        assert abs(h[0] - 1.0 / 6.0) < 1e-3

    def test_centrally_symmetric_h3_vanishes(self):
        n = 128
        ys, xs = np.mgrid[0:n, 0:n]
        # ellipse: symmetric under 180-degree rotation, odd moments vanish
        ellipse = ((((ys - 63.5) / 40) ** 2 + ((xs - 63.5) / 20) ** 2) <= 1).astype(float)
        assert abs(hu_moments(ellipse)[2]) < 1e-9

    def test_translation_invariance(self):
        b = asym_blob(96)
        a = np.zeros((160, 160))
        a[10:106, 10:106] = b
        c = np.zeros((160, 160))
        c[41:137, 28:124] = b
        assert np.abs(hu_moments(a) - hu_moments(c)).max() < 1e-9

    def test_zero_mass(self):
        with pytest.raises(ZeroMass):
            hu_moments(np.zeros((8, 8)))

    def test_binarize_flag(self):
        b = asym_blob(64) * 0.4 + 0.1
        assert not np.allclose(hu_moments(b), hu_moments(b, binarize=True, binarize_threshold=0.3))


class TestHumDistance:
    def test_identity(self):
        b = asym_blob(64)
        assert hum_distance(b, b) == 0.0

    def test_symmetry(self):
        a, b = asym_blob(64), hard_blob(64)
        assert hum_distance(a, b) == pytest.approx(hum_distance(b, a), abs=0.0)

    def test_rotation_90_multiples(self):
        b = asym_blob(128)
        for k in (1, 2, 3):
            assert hum_distance(b, np.rot90(b, k)) < 1e-6

    def test_rotated_disk_close(self):
        from scipy import ndimage

        d = disk(512)
        rot = ndimage.rotate(d, 37.0, reshape=False, order=3, mode="constant")
        # bound frozen from the first run at 512 px (measured 1.1e-8)
        assert hum_distance(d, rot) < 1e-6

    def test_distinct_shapes_separate_beyond_invariance_noise(self):
        from scipy import ndimage

        d = disk(512)
        rot = ndimage.rotate(d, 37.0, reshape=False, order=3, mode="constant")
        assert hum_distance(d, annulus(512)) > hum_distance(d, rot)

    def test_scaling_by_two_close(self):
        b = asym_blob(256)
        up = resample_to_dims(b, (512, 512))
        assert hum_distance(b, up) < 0.05

    def test_discretization_error_decreases_with_resolution(self):
        dists = [hum_distance(hard_blob(n), hard_blob(2 * n)) for n in (128, 256, 512)]
        assert all(d < 0.05 for d in dists)
        assert dists[0] > dists[1] > dists[2]

    def test_skip_rule_records_indices(self):
        d = disk(256)  # rotationally symmetric: h2..h7 fall below the skip floor
        detail = hum_distance(d, d * 0.5, return_detail=True)
        assert len(detail.skipped) > 0
        assert np.isfinite(detail.distance)

    def test_log_form_flag(self):
        a, b = asym_blob(64), hard_blob(64)
        assert hum_distance(a, b, form="log") != hum_distance(a, b)


class TestMHum:
    def test_copy_gives_zero(self):
        xs = [asym_blob(48), disk(48)]
        ys = [hard_blob(48), disk(48)]
        assert m_hum(xs, ys).minimum == 0.0

    def test_singletons(self):
        a, b = asym_blob(48), hard_blob(48)
        res = m_hum([a], [b])
        assert res.minimum == pytest.approx(hum_distance(a, b))
        assert res.mean_of_minima == pytest.approx(res.minimum)

    def test_exhaustive_enumeration_oracle(self):
        rng = np.random.default_rng(21)
        xs = [rng.random((24, 24)) for _ in range(3)]
        ys = [rng.random((24, 24)) for _ in range(3)]
        res = m_hum(xs, ys)
        brute = min(hum_distance(x, y) for x in xs for y in ys)
        assert res.minimum == brute
        for i, x in enumerate(xs):
            assert res.per_slice_min[i] == min(hum_distance(x, y) for y in ys)
        assert res.mean_of_minima == pytest.approx(np.mean(res.per_slice_min))

    def test_min_property(self):
        rng = np.random.default_rng(22)
        xs = [rng.random((16, 16)) for _ in range(4)]
        ys = [rng.random((16, 16)) for _ in range(4)]
        res = m_hum(xs, ys)
        for x in xs:
            for y in ys:
                assert res.minimum <= hum_distance(x, y) + 1e-15

    def test_empty_sets(self):
        with pytest.raises(EmptySet):
            m_hum([], [np.ones((4, 4))])


def bitmask_exact_p(a, b):
    """Independent oracle: enumerate subsets by bitmask popcount scan."""
    pooled = list(a) + list(b)
    n, total = len(a), len(a) + len(b)
    order = sorted(range(total), key=lambda i: pooled[i])
    ranks = [0.0] * total
    i = 0
    while i < total:
        j = i
        while j + 1 < total and pooled[order[j + 1]] == pooled[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2.0 + 1.0
        i = j + 1
    w_obs = sum(ranks[:n])
    le = ge = count = 0
    for mask in range(1 << total):
        if bin(mask).count("1") != n:
            continue
        w = sum(ranks[i] for i in range(total) if mask >> i & 1)
        count += 1
        if w <= w_obs + 1e-9:
            le += 1
        if w >= w_obs - 1e-9:
            ge += 1
    return min(1.0, 2.0 * min(le, ge) / count)


class TestWilcoxon:
    def test_extreme_split(self):
        res = wilcoxon_rank_sum([1, 2, 3], [4, 5, 6])
        assert res.method == "exact"
        assert res.p_two_sided == pytest.approx(0.1, abs=1e-12)

    def test_identical_multisets(self):
        res = wilcoxon_rank_sum([1, 2, 3], [1, 2, 3])
        assert res.p_two_sided == 1.0

    def test_symmetry(self):
        rng = np.random.default_rng(23)
        a = list(rng.integers(1, 7, size=5))
        b = list(rng.integers(1, 7, size=6))
        r1 = wilcoxon_rank_sum(a, b)
        r2 = wilcoxon_rank_sum(b, a)
        assert r1.statistic == r2.statistic
        assert r1.p_two_sided == r2.p_two_sided

    def test_degenerate_flagged(self):
        res = wilcoxon_rank_sum([3, 3, 3], [3, 3])
        assert res.degenerate
        assert res.p_two_sided == 1.0

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_exact_matches_bitmask_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 6))
        m = int(rng.integers(1, 6))
        a = list(rng.integers(1, 7, size=n))
        b = list(rng.integers(1, 7, size=m))
        res = wilcoxon_rank_sum(a, b)
        assert res.method == "exact"
        assert res.p_two_sided == pytest.approx(bitmask_exact_p(a, b), abs=1e-12)

    def test_normal_approximation_regime(self):
        rng = np.random.default_rng(24)
        a = list(rng.integers(1, 7, size=10))
        b = list(rng.integers(1, 7, size=10))
        res = wilcoxon_rank_sum(a, b)
        assert res.method == "normal"
        assert 0.0 <= res.p_two_sided <= 1.0

    def test_normal_approx_close_to_exact_at_boundary(self):
        # compare at n+m=12 where both routes are defensible
        a, b = [1, 2, 2, 3, 4, 5], [3, 4, 4, 5, 6, 6]
        exact = wilcoxon_rank_sum(a, b)
        assert exact.method == "exact"
        p_oracle = bitmask_exact_p(a, b)
        assert exact.p_two_sided == pytest.approx(p_oracle, abs=1e-12)

    def test_rating_sample_validation(self):
        with pytest.raises(ValueError):
            RatingSample([1, 2], [7])
        with pytest.raises(ValueError):
            RatingSample([], [3])
        sample = RatingSample([1, 6], [2, 5])
        res = wilcoxon_rank_sum(sample.scores_a, sample.scores_b)
        assert 0 <= res.p_two_sided <= 1


class TestVectorDistance:
    def test_skip_near_zero(self):
        ha = np.array([0.1, 1e-40, 0.01, 0.001, 1e-35, 1e-4, 1e-5])
        hb = np.array([0.2, 0.3, 0.01, 0.002, 0.1, 1e-4, 1e-6])
        detail = hum_distance_from_vectors(ha, hb)
        assert 1 in detail.skipped and 4 in detail.skipped
        assert np.isfinite(detail.distance)

    def test_unknown_form(self):
        with pytest.raises(ValueError):
            hum_distance_from_vectors(np.ones(7), np.ones(7), form="bogus")
