"""Patch extraction and whole-slice reconstruction with grid-effect removal.

Patches are laid out on a regular stride grid; the last row/column is
clamped to the slice border so every pixel is covered. Stitching averages
overlap regions, and the optional post pass histogram-matches each
generated patch to its source patch before blending, then median-filters
the assembled slice.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import BadKernel, GridMismatch, MissingManifest, PatchTooLarge
from .imaging import Slice, Volume, load_volume, save_volume

DEFAULT_PATCH_SIZE = 256
DEFAULT_STRIDE = 128
DEFAULT_BINS = 256
DEFAULT_MEDIAN_KERNEL = 3

_GRID_NAME = "grid.json"


@dataclass
class Patch:
    """A fixed-size tile with its origin in parent-slice coordinates."""

    data: np.ndarray
    origin: tuple[int, int]
    parent: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError(f"patch grid must be 2D, got {self.data.shape}")
        self.origin = (int(self.origin[0]), int(self.origin[1]))


@dataclass(frozen=True)
class PatchGrid:
    """Row-major origin enumeration for a (patch_size, stride) tiling."""

    patch_size: int
    stride: int
    slice_dims: tuple[int, int]
    origins: tuple[tuple[int, int], ...]

    @staticmethod
    def axis_origins(dim: int, size: int, stride: int) -> list[int]:
        """Origins k*stride while they fit, plus a clamped final origin."""
        origins = list(range(0, dim - size + 1, stride))
        if origins[-1] != dim - size:
            origins.append(dim - size)
        return origins

    @classmethod
    def plan(cls, slice_dims: tuple[int, int], patch_size: int, stride: int) -> "PatchGrid":
        if stride < 1:
            raise ValueError(f"stride must be >= 1, got {stride}")
        h, w = slice_dims
        if patch_size > min(h, w):
            raise PatchTooLarge(f"patch {patch_size} exceeds slice dims {slice_dims}")
        ys = cls.axis_origins(h, patch_size, stride)
        xs = cls.axis_origins(w, patch_size, stride)
        origins = tuple((y, x) for y in ys for x in xs)
        return cls(patch_size=patch_size, stride=stride, slice_dims=(h, w), origins=origins)


def extract_patches(
    s: Slice, patch_size: int = DEFAULT_PATCH_SIZE, stride: int = DEFAULT_STRIDE
) -> tuple[list[Patch], PatchGrid]:
    """Cut a slice into grid patches; returns the patches and their grid."""
    grid = PatchGrid.plan(s.shape, patch_size, stride)
    parent = s.source[0] if s.source else ""
    patches = [
        Patch(s.data[y : y + patch_size, x : x + patch_size].copy(), (y, x), parent)
        for (y, x) in grid.origins
    ]
    return patches, grid


def _cdf_nodes(values: np.ndarray, bins: int) -> tuple[np.ndarray, np.ndarray]:
    """Strictly increasing piecewise-linear CDF nodes over occupied bins.

    Empty bins are merged into their neighbors so the CDF is invertible;
    forward and inverse interpolation through the same nodes are then exact
    mutual inverses.
    """
    lo, hi = float(values.min()), float(values.max())
    edges = np.linspace(lo, hi, bins + 1)
    counts, _ = np.histogram(values, bins=edges)
    occupied = counts > 0
    xs = np.concatenate([[edges[0]], edges[1:][occupied]])
    cs = np.concatenate([[0.0], np.cumsum(counts[occupied], dtype=np.float64) / values.size])
    return xs, cs


def match_values(src: np.ndarray, ref: np.ndarray, bins: int = DEFAULT_BINS) -> np.ndarray:
    """Quantile-map ``src`` values onto the empirical distribution of ``ref``.

    Each CDF is modeled as piecewise-linear over ``bins`` equal-width bins
    spanning its own image's value range; the mapping is monotone and its
    outputs stay within the reference's range.
    """
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    src = np.asarray(src, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if float(ref.min()) == float(ref.max()):
        return np.full_like(src, float(ref.min()))
    if float(src.min()) == float(src.max()):
        # A constant source has no rank structure; send it to the reference
        # median quantile.
        quantiles = np.full_like(src, 0.5)
    else:
        src_x, src_c = _cdf_nodes(src, bins)
        quantiles = np.interp(src, src_x, src_c)
    ref_x, ref_c = _cdf_nodes(ref, bins)
    return np.interp(quantiles, ref_c, ref_x)


def histogram_match(src: Patch, ref: Patch, bins: int = DEFAULT_BINS) -> Patch:
    """Histogram-match a patch against a reference patch."""
    return Patch(match_values(src.data, ref.data, bins), src.origin, src.parent)


def median_filter(s: Slice, kernel: int = DEFAULT_MEDIAN_KERNEL) -> Slice:
    """Median-filter a slice with an odd square kernel, edge-replicated borders."""
    if kernel < 3 or kernel % 2 == 0:
        raise BadKernel(f"kernel must be odd and >= 3, got {kernel}")
    out = ndimage.median_filter(s.data, size=kernel, mode="nearest")
    return Slice(out, s.pixel_size_mm, s.source)


def reconstruct_slice(
    patches: list[Patch],
    lr_patches: list[Patch] | None,
    grid: PatchGrid,
    post: bool = True,
    bins: int = DEFAULT_BINS,
    median_kernel: int = DEFAULT_MEDIAN_KERNEL,
    pixel_size_mm: tuple[float, float] = (1.0, 1.0),
) -> Slice:
    """Stitch grid patches back into a whole slice.

    With ``post`` enabled each patch is histogram-matched against its
    aligned source patch first, overlaps are averaged, and the assembled
    slice is median-filtered. With ``post`` off and a non-overlapping grid
    the result reproduces the tiles bit-exactly.
    """
    if len(patches) != len(grid.origins):
        raise GridMismatch(f"{len(patches)} patches for {len(grid.origins)} origins")
    if post:
        if lr_patches is None or len(lr_patches) != len(grid.origins):
            raise GridMismatch("post-processing needs one source patch per origin")
        patches = [histogram_match(p, lr, bins) for p, lr in zip(patches, lr_patches)]

    size = grid.patch_size
    h, w = grid.slice_dims
    # Averaging via a representative value plus mean deviation: when all
    # contributions to a pixel agree the deviations cancel exactly, so
    # unmodified patches round-trip bit-for-bit at any overlap count.
    rep = np.zeros((h, w), dtype=np.float64)
    dev = np.zeros((h, w), dtype=np.float64)
    count = np.zeros((h, w), dtype=np.int64)
    for patch, (y, x) in zip(patches, grid.origins):
        if patch.data.shape != (size, size):
            raise GridMismatch(f"patch at {(y, x)} has shape {patch.data.shape}, expected {(size, size)}")
        rep[y : y + size, x : x + size] = patch.data
        count[y : y + size, x : x + size] += 1
    for patch, (y, x) in zip(patches, grid.origins):
        dev[y : y + size, x : x + size] += patch.data - rep[y : y + size, x : x + size]
    covered = count > 0
    rep[covered] += dev[covered] / count[covered]
    out = Slice(rep, pixel_size_mm)
    if post:
        out = median_filter(out, median_kernel)
    return out


def save_patches(patches: list[Patch], grid: PatchGrid, path: str | Path,
                 pixel_size_mm: tuple[float, float] = (1.0, 1.0)) -> Path:
    """Serialize a patch set as a volume directory plus a grid sidecar."""
    if len(patches) != len(grid.origins):
        raise GridMismatch(f"{len(patches)} patches for {len(grid.origins)} origins")
    root = Path(path)
    stack = np.stack([p.data for p in patches]) if patches else np.zeros((0, 1, 1))
    vol = Volume(stack, (1.0, pixel_size_mm[0], pixel_size_mm[1]))
    save_volume(vol, root)
    sidecar = {
        "v": 1,
        "patch_size": grid.patch_size,
        "stride": grid.stride,
        "slice_dims": list(grid.slice_dims),
        "origins": [list(o) for o in grid.origins],
        "parents": [p.parent for p in patches],
    }
    (root / _GRID_NAME).write_text(json.dumps(sidecar))
    return root


def load_patches(path: str | Path) -> tuple[list[Patch], PatchGrid]:
    root = Path(path)
    sidecar_path = root / _GRID_NAME
    if not sidecar_path.exists():
        raise MissingManifest(f"{root} has no '{_GRID_NAME}' sidecar")
    sidecar = json.loads(sidecar_path.read_text())
    vol = load_volume(root)
    grid = PatchGrid(
        patch_size=int(sidecar["patch_size"]),
        stride=int(sidecar["stride"]),
        slice_dims=tuple(sidecar["slice_dims"]),
        origins=tuple(tuple(o) for o in sidecar["origins"]),
    )
    parents = sidecar.get("parents", [""] * len(grid.origins))
    patches = [
        Patch(vol.data[i], grid.origins[i], parents[i]) for i in range(vol.data.shape[0])
    ]
    return patches, grid
