import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from earsr.errors import BadKernel, GridMismatch, PatchTooLarge
from earsr.imaging import Slice
from earsr.patchwork import (
    Patch,
    PatchGrid,
    extract_patches,
    histogram_match,
    load_patches,
    match_values,
    median_filter,
    reconstruct_slice,
    save_patches,
)


def make_slice(data):
    return Slice(np.asarray(data, dtype=np.float64), (1.0, 1.0))


def brute_force_origins(dim, size, stride):
    origins = []
    k = 0
    while k * stride + size <= dim:
        origins.append(k * stride)
        k += 1
    if origins[-1] != dim - size:
        origins.append(dim - size)
    return origins


class TestExtract:
    def test_regular_grid_counts(self):
        s = make_slice(np.zeros((512, 512)))
        patches, grid = extract_patches(s, 256, 128)
        assert len(patches) == 9

    def test_single_patch(self):
        s = make_slice(np.zeros((256, 256)))
        patches, _ = extract_patches(s, 256, 64)
        assert len(patches) == 1
        assert patches[0].origin == (0, 0)

    def test_clamped_remainder(self):
        s = make_slice(np.zeros((600, 600)))
        patches, grid = extract_patches(s, 256, 128)
        axis = sorted({o[0] for o in grid.origins})
        assert axis == [0, 128, 256, 344]
        assert len(patches) == 16

    def test_too_large(self):
        with pytest.raises(PatchTooLarge):
            extract_patches(make_slice(np.zeros((100, 100))), 128, 64)

    def test_count_formula_vs_enumeration(self):
        rng = np.random.default_rng(2)
        for _ in range(500):
            size = int(rng.integers(1, 64))
            dim = int(rng.integers(size, 400))
            stride = int(rng.integers(1, 64))
            origins = PatchGrid.axis_origins(dim, size, stride)
            assert origins == brute_force_origins(dim, size, stride)
            base = (dim - size) // stride + 1
            assert len(origins) in (base, base + 1)


class TestHistogramMatch:
    def test_constant_ref(self):
        src = Patch(np.full((4, 4), 0.3), (0, 0))
        ref = Patch(np.full((4, 4), 0.8), (0, 0))
        out = histogram_match(src, ref)
        assert np.array_equal(out.data, np.full((4, 4), 0.8))

    def test_match_to_self(self):
        rng = np.random.default_rng(4)
        data = rng.random((32, 32))
        out = match_values(data, data, bins=256)
        assert np.abs(out - data).max() <= 1.0 / 256

    def test_ramp_oracle(self):
        src = np.linspace(0.0, 1.0, 4096).reshape(64, 64)
        ref = np.linspace(0.25, 0.75, 4096).reshape(64, 64)
        out = match_values(src, ref, bins=256)
        assert out.min() >= 0.25 and out.max() <= 0.75
        pts = np.linspace(0.25, 0.75, 3000)
        c_out = np.searchsorted(np.sort(out.ravel()), pts, "right") / out.size
        c_ref = np.searchsorted(np.sort(ref.ravel()), pts, "right") / ref.size
        assert np.abs(c_out - c_ref).max() <= 2.0 / 256

    def test_idempotent_against_fixed_reference(self):
        rng = np.random.default_rng(6)
        src = rng.random((48, 48))
        ref = 0.2 + 0.6 * rng.random((48, 48))
        once = match_values(src, ref, bins=256)
        twice = match_values(once, ref, bins=256)
        assert np.abs(twice - once).max() <= 1.0 / 256

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_monotone_rank_preservation(self, seed):
        rng = np.random.default_rng(seed)
        src = rng.random((24, 24))
        ref = rng.random((24, 24))
        out = match_values(src, ref, bins=256)
        assert np.array_equal(np.argsort(src.ravel()), np.argsort(out.ravel()))


class TestMedianFilter:
    def test_constant_unchanged(self):
        s = make_slice(np.full((9, 9), 0.4))
        assert np.array_equal(median_filter(s).data, s.data)

    def test_single_outlier_removed(self):
        data = np.zeros((7, 7))
        data[3, 3] = 1.0
        out = median_filter(make_slice(data), 3)
        assert np.array_equal(out.data, np.zeros((7, 7)))

    def test_bad_kernel(self):
        s = make_slice(np.zeros((5, 5)))
        with pytest.raises(BadKernel):
            median_filter(s, 4)
        with pytest.raises(BadKernel):
            median_filter(s, 1)

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(8)
        data = rng.random((16, 16))
        out = median_filter(make_slice(data), 3).data
        padded = np.pad(data, 1, mode="edge")
        for y in range(16):
            for x in range(16):
                window = padded[y : y + 3, x : x + 3].ravel()
                assert out[y, x] == np.sort(window)[4]

    @given(st.integers(0, 2**32 - 1), st.sampled_from([3, 5]))
    @settings(max_examples=25, deadline=None)
    def test_output_within_input_range(self, seed, kernel):
        rng = np.random.default_rng(seed)
        data = rng.random((12, 15))
        out = median_filter(make_slice(data), kernel).data
        assert out.min() >= data.min()
        assert out.max() <= data.max()


class TestReconstruct:
    def test_non_overlapping_mosaic_bit_exact(self):
        rng = np.random.default_rng(10)
        s = make_slice(rng.random((64, 64)))
        patches, grid = extract_patches(s, 16, 16)
        out = reconstruct_slice(patches, None, grid, post=False)
        assert np.array_equal(out.data, s.data)

    def test_two_overlapping_constants(self):
        grid = PatchGrid(patch_size=4, stride=2, slice_dims=(4, 6), origins=((0, 0), (0, 2)))
        p1 = Patch(np.full((4, 4), 0.2), (0, 0))
        p2 = Patch(np.full((4, 4), 0.4), (0, 2))
        out = reconstruct_slice([p1, p2], None, grid, post=False)
        assert np.allclose(out.data[:, 2:4], 0.3, atol=1e-12)
        assert np.allclose(out.data[:, :2], 0.2)
        assert np.allclose(out.data[:, 4:], 0.4)

    def test_overlapping_round_trip_bit_exact(self):
        rng = np.random.default_rng(12)
        s = make_slice(rng.random((600, 600)))
        patches, grid = extract_patches(s, 256, 128)
        out = reconstruct_slice(patches, None, grid, post=False)
        assert np.array_equal(out.data, s.data)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_round_trip_property(self, seed):
        rng = np.random.default_rng(seed)
        h = int(rng.integers(20, 90))
        w = int(rng.integers(20, 90))
        size = int(rng.integers(4, min(h, w) + 1))
        stride = int(rng.integers(1, size + 1))
        s = make_slice(rng.random((h, w)))
        patches, grid = extract_patches(s, size, stride)
        out = reconstruct_slice(patches, None, grid, post=False)
        assert np.array_equal(out.data, s.data)

    def test_grid_mismatch(self):
        s = make_slice(np.zeros((32, 32)))
        patches, grid = extract_patches(s, 16, 16)
        with pytest.raises(GridMismatch):
            reconstruct_slice(patches[:-1], None, grid, post=False)
        with pytest.raises(GridMismatch):
            reconstruct_slice(patches, patches[:-1], grid, post=True)

    def test_post_pipeline_runs_and_stays_in_range(self):
        rng = np.random.default_rng(14)
        s = make_slice(rng.random((96, 96)))
        patches, grid = extract_patches(s, 32, 16)
        generated = [Patch(np.clip(p.data + 0.05, 0, 1), p.origin) for p in patches]
        out = reconstruct_slice(generated, patches, grid, post=True)
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0


class TestSerialization:
    def test_patch_set_round_trip(self, tmp_path):
        rng = np.random.default_rng(16)
        s = make_slice(rng.random((64, 64)))
        patches, grid = extract_patches(s, 32, 16)
        save_patches(patches, grid, tmp_path / "set")
        loaded, loaded_grid = load_patches(tmp_path / "set")
        assert loaded_grid == grid
        for a, b in zip(patches, loaded):
            assert a.origin == b.origin
            assert np.abs(a.data - b.data).max() <= 1.0 / 65535
