"""Volume/slice data model, normalization, resampling and ROI cropping.

Volumes are stored on disk as a directory of z-ordered raw 16-bit
little-endian grayscale files named ``slice_%05d`` next to a ``manifest``
JSON file carrying ``voxel_size_mm`` (3 reals) and ``dims`` (3 ints).
Intensities are mapped [0,1] -> [0,65535] by rounding on save.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConstantImageWarning,
    EmptyForeground,
    FormatError,
    MissingManifest,
    OutputTooLarge,
)

MAX_RESAMPLE_DIM = 16384

_SLICE_NAME = "slice_{:05d}"
_MANIFEST_NAME = "manifest"


@dataclass
class Slice:
    """A 2D intensity grid with physical pixel size.

    ``data`` is (h, w) float64; ``pixel_size_mm`` is (row, col) spacing.
    ``source`` optionally records (volume id, z index) provenance.
    """

    data: np.ndarray
    pixel_size_mm: tuple[float, float]
    source: tuple[str, int] | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or min(self.data.shape) < 1:
            raise ValueError(f"slice grid must be 2D non-empty, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("slice intensities must be finite")
        self.pixel_size_mm = (float(self.pixel_size_mm[0]), float(self.pixel_size_mm[1]))
        if min(self.pixel_size_mm) <= 0:
            raise ValueError(f"pixel size must be positive, got {self.pixel_size_mm}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass
class Volume:
    """A 3D intensity grid (z, y, x) with voxel geometry and free-form metadata."""

    data: np.ndarray
    voxel_size_mm: tuple[float, float, float]
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume grid must be 3D non-empty, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume intensities must be finite")
        self.voxel_size_mm = tuple(float(v) for v in self.voxel_size_mm)
        if len(self.voxel_size_mm) != 3 or min(self.voxel_size_mm) <= 0:
            raise ValueError(f"voxel size must be 3 positive reals, got {self.voxel_size_mm}")

    def slice_at(self, z: int) -> Slice:
        vol_id = self.meta.get("subject", self.meta.get("scanner", "volume"))
        return Slice(
            data=self.data[z],
            pixel_size_mm=(self.voxel_size_mm[1], self.voxel_size_mm[2]),
            source=(vol_id, z),
        )


@dataclass(frozen=True)
class RoiBox:
    """Half-open pixel box [y0, y1) x [x0, x1)."""

    y0: int
    x0: int
    y1: int
    x1: int

    def __post_init__(self):
        if not (0 <= self.y0 < self.y1 and 0 <= self.x0 < self.x1):
            raise ValueError(f"degenerate box {self}")


def zscore_then_unit_normalize(s: Slice) -> Slice:
    """Standardize to zero mean / unit std, then rescale min->0, max->1.

    A constant slice cannot be standardized; it is returned as all zeros
    with a :class:`ConstantImageWarning` so batch callers can skip it.
    """
    std = float(s.data.std())
    if std == 0.0:
        warnings.warn("constant slice flattened to zeros", ConstantImageWarning)
        return Slice(np.zeros_like(s.data), s.pixel_size_mm, s.source)
    z = (s.data - s.data.mean()) / std
    lo, hi = z.min(), z.max()
    out = (z - lo) / (hi - lo)
    if not np.all(np.isfinite(out)):
        # Dynamic range below float resolution: constant for all purposes.
        warnings.warn("slice dynamic range underflows; flattened to zeros", ConstantImageWarning)
        return Slice(np.zeros_like(s.data), s.pixel_size_mm, s.source)
    return Slice(out, s.pixel_size_mm, s.source)


def _cubic_kernel(d: np.ndarray) -> np.ndarray:
    # Two-parameter cubic convolution with a = -0.5 (Catmull-Rom).
    a = -0.5
    d = np.abs(d)
    near = (a + 2.0) * d**3 - (a + 3.0) * d**2 + 1.0
    far = a * (d**3 - 5.0 * d**2 + 8.0 * d - 4.0)
    return np.where(d <= 1.0, near, np.where(d < 2.0, far, 0.0))


def _resample_axis(data: np.ndarray, out_dim: int, axis: int) -> np.ndarray:
    """Cubic-convolution resample of one axis with edge replication."""
    in_dim = data.shape[axis]
    if out_dim == in_dim:
        return data
    # Pixel-center mapping: output center j lands at (j+0.5)*in/out - 0.5.
    t = (np.arange(out_dim, dtype=np.float64) + 0.5) * (in_dim / out_dim) - 0.5
    base = np.floor(t).astype(np.int64)
    frac = t - base
    taps = base[:, None] + np.arange(-1, 3)
    weights = _cubic_kernel(frac[:, None] - np.arange(-1, 3))
    taps = np.clip(taps, 0, in_dim - 1)
    moved = np.moveaxis(data, axis, 0)
    gathered = moved[taps]  # (out_dim, 4, ...)
    weights = weights.reshape(out_dim, 4, *([1] * (moved.ndim - 1)))
    out = (gathered * weights).sum(axis=1)
    return np.moveaxis(out, 0, axis)


def resample_to_dims(data: np.ndarray, out_dims: tuple[int, int]) -> np.ndarray:
    """Bicubic resample of a 2D grid to explicit output dimensions."""
    out = _resample_axis(np.asarray(data, dtype=np.float64), out_dims[0], axis=0)
    return _resample_axis(out, out_dims[1], axis=1)


def bicubic_resample(
    s: Slice,
    target_pixel_size_mm: tuple[float, float],
    max_dim: int = MAX_RESAMPLE_DIM,
) -> Slice:
    """Resample a slice to a new pixel pitch by cubic convolution (a = -0.5).

    Output dimensions are ``round(dim * in_size / target_size)`` per axis;
    borders are handled by edge replication.
    """
    ty, tx = float(target_pixel_size_mm[0]), float(target_pixel_size_mm[1])
    if ty <= 0 or tx <= 0:
        raise ValueError(f"target pixel size must be positive, got {target_pixel_size_mm}")
    h, w = s.shape
    out_h = max(1, round(h * s.pixel_size_mm[0] / ty))
    out_w = max(1, round(w * s.pixel_size_mm[1] / tx))
    if max(out_h, out_w) > max_dim:
        raise OutputTooLarge(
            f"resampled dims ({out_h}, {out_w}) exceed cap {max_dim}; raise --max-dim to allow"
        )
    return Slice(resample_to_dims(s.data, (out_h, out_w)), (ty, tx), s.source)


def crop_roi(s: Slice, threshold: float, margin: int = 8) -> tuple[Slice, RoiBox]:
    """Crop the tight bounding box of pixels >= threshold, padded by ``margin``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0,1], got {threshold}")
    mask = s.data >= threshold
    if not mask.any():
        raise EmptyForeground(f"no pixel reaches threshold {threshold}")
    ys, xs = np.nonzero(mask)
    h, w = s.shape
    box = RoiBox(
        y0=max(0, int(ys.min()) - margin),
        x0=max(0, int(xs.min()) - margin),
        y1=min(h, int(ys.max()) + 1 + margin),
        x1=min(w, int(xs.max()) + 1 + margin),
    )
    cropped = Slice(s.data[box.y0 : box.y1, box.x0 : box.x1], s.pixel_size_mm, s.source)
    return cropped, box


def to_uint16(data: np.ndarray) -> np.ndarray:
    """Map [0,1] intensities to the 16-bit container by rounding."""
    return np.clip(np.rint(np.clip(data, 0.0, 1.0) * 65535.0), 0, 65535).astype("<u2")


def from_uint16(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float64) / 65535.0


def _read_raw_slice(path: Path, shape: tuple[int, int]) -> np.ndarray:
    expected = shape[0] * shape[1] * 2
    blob = path.read_bytes()
    if len(blob) != expected:
        raise FormatError(path, min(len(blob), expected), f"expected {expected} bytes, found {len(blob)}")
    return np.frombuffer(blob, dtype="<u2").reshape(shape)


def save_volume(vol: Volume, path: str | Path) -> Path:
    """Write a volume in the on-disk directory format. Returns the directory."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    nz, h, w = vol.data.shape
    for z in range(nz):
        (root / _SLICE_NAME.format(z)).write_bytes(to_uint16(vol.data[z]).tobytes())
    manifest = {
        "voxel_size_mm": list(vol.voxel_size_mm),
        "dims": [nz, h, w],
        **{k: v for k, v in vol.meta.items() if k in ("scanner", "subject")},
    }
    (root / _MANIFEST_NAME).write_text(json.dumps(manifest, indent=2))
    return root


def load_volume(path: str | Path) -> Volume:
    root = Path(path)
    manifest_path = root / _MANIFEST_NAME
    if not manifest_path.exists():
        raise MissingManifest(f"{root} has no '{_MANIFEST_NAME}' file")
    manifest = json.loads(manifest_path.read_text())
    for key in ("voxel_size_mm", "dims"):
        if key not in manifest:
            raise MissingManifest(f"manifest in {root} lacks required key '{key}'")
    nz, h, w = (int(v) for v in manifest["dims"])
    grid = np.empty((nz, h, w), dtype=np.float64)
    for z in range(nz):
        slice_path = root / _SLICE_NAME.format(z)
        if not slice_path.exists():
            raise FormatError(slice_path, 0, "missing slice file")
        grid[z] = from_uint16(_read_raw_slice(slice_path, (h, w)))
    meta = {k: str(manifest[k]) for k in ("scanner", "subject") if k in manifest}
    return Volume(grid, tuple(float(v) for v in manifest["voxel_size_mm"]), meta)


def save_slice(s: Slice, path: str | Path) -> Path:
    """Write one slice as a raw 16-bit file plus a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_uint16(s.data).tobytes())
    sidecar = {
        "dims": list(s.shape),
        "pixel_size_mm": list(s.pixel_size_mm),
    }
    if s.source is not None:
        sidecar["source"] = [s.source[0], int(s.source[1])]
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar))
    return path


def load_slice(path: str | Path) -> Slice:
    path = Path(path)
    sidecar_path = path.with_suffix(path.suffix + ".json")
    if not sidecar_path.exists():
        raise MissingManifest(f"{path} has no JSON sidecar")
    sidecar = json.loads(sidecar_path.read_text())
    for key in ("dims", "pixel_size_mm"):
        if key not in sidecar:
            raise MissingManifest(f"sidecar of {path} lacks required key '{key}'")
    shape = tuple(int(v) for v in sidecar["dims"])
    data = from_uint16(_read_raw_slice(path, shape))
    source = tuple(sidecar["source"]) if "source" in sidecar else None
    return Slice(data, tuple(sidecar["pixel_size_mm"]), source)
