"""Synthetic phantom slices: unpaired training corpora and paired validation.

High-resolution slices are rendered analytically with anti-aliased edges
(disks, annuli, and a spiral channel that stands in for fine curled
anatomy). The low-resolution counterpart is produced by Gaussian blur,
bicubic downsampling, additive Gaussian noise, and bicubic upsampling back
to the HR grid, so network inputs and outputs share dimensions while the
degradation differs from plain interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import BadSpec
from .imaging import Slice, resample_to_dims
from .networks import derive_seed
from .patchwork import extract_patches, save_patches

DEFAULT_CANVAS = 512
DEFAULT_LR_FACTOR = 8.33
DEFAULT_HR_PIXEL_MM = 0.018

_TAG_LR_CORPUS = 10_000
_TAG_HR_CORPUS = 20_000
_TAG_PAIR_NOISE = 30_000

SHAPE_KINDS = ("disk", "annulus", "spiral-channel")


@dataclass(frozen=True)
class ShapeSpec:
    """One analytic shape: kind, center (y, x), radii, and fill intensity.

    radii semantics: disk (outer,), annulus (outer, inner),
    spiral-channel (outer, channel half-width).
    """

    kind: str
    center: tuple[float, float]
    radii: tuple[float, ...]
    intensity: float = 1.0


@dataclass
class PhantomSpec:
    canvas: int = DEFAULT_CANVAS
    shapes: list[ShapeSpec] = field(default_factory=list)
    lr_factor: float = DEFAULT_LR_FACTOR
    lr_noise_sigma: float = 0.05
    lr_blur_sigma: float = 1.5
    seed: int = 0
    hr_pixel_size_mm: float = DEFAULT_HR_PIXEL_MM

    def validate(self):
        if self.canvas < 8:
            raise BadSpec(f"canvas too small: {self.canvas}")
        if self.lr_factor < 1.0:
            raise BadSpec(f"lr_factor must be >= 1, got {self.lr_factor}")
        if self.lr_noise_sigma < 0 or self.lr_blur_sigma < 0:
            raise BadSpec("noise and blur sigmas must be >= 0")
        for s in self.shapes:
            if s.kind not in SHAPE_KINDS:
                raise BadSpec(f"unknown shape kind {s.kind!r}")
            cy, cx = s.center
            r = max(s.radii)
            if not (0 <= cy - r and cy + r < self.canvas and 0 <= cx - r and cx + r < self.canvas):
                raise BadSpec(f"shape {s} extends beyond canvas {self.canvas}")


def _radial_distance(canvas: int, center: tuple[float, float]) -> np.ndarray:
    ys = np.arange(canvas, dtype=np.float64)[:, None] - center[0]
    xs = np.arange(canvas, dtype=np.float64)[None, :] - center[1]
    return np.hypot(ys, xs)


def _edge_coverage(signed: np.ndarray) -> np.ndarray:
    # 1-px anti-aliased edge: full inside, linear falloff across the boundary.
    return np.clip(signed + 0.5, 0.0, 1.0)


def _render_disk(canvas: int, shape: ShapeSpec) -> np.ndarray:
    d = _radial_distance(canvas, shape.center)
    return _edge_coverage(shape.radii[0] - d)


def _render_annulus(canvas: int, shape: ShapeSpec) -> np.ndarray:
    outer, inner = shape.radii[0], shape.radii[1]
    if inner >= outer:
        raise BadSpec(f"annulus inner radius {inner} must be below outer {outer}")
    d = _radial_distance(canvas, shape.center)
    return np.clip(_edge_coverage(outer - d) - _edge_coverage(inner - d), 0.0, 1.0)


def _render_spiral(canvas: int, shape: ShapeSpec) -> np.ndarray:
    outer, half_width = shape.radii[0], shape.radii[1]
    turns = 2.75
    r0 = outer / 6.0
    # Dense polyline along an Archimedean spiral, then an exact distance
    # transform to its raster gives the channel profile.
    theta = np.linspace(0.0, turns * 2.0 * np.pi, max(64, int(outer * turns * 14)))
    radius = r0 + (outer - r0) * theta / theta[-1]
    ys = shape.center[0] + radius * np.sin(theta)
    xs = shape.center[1] + radius * np.cos(theta)
    raster = np.ones((canvas, canvas), dtype=bool)
    iy = np.clip(np.rint(ys).astype(int), 0, canvas - 1)
    ix = np.clip(np.rint(xs).astype(int), 0, canvas - 1)
    raster[iy, ix] = False
    dist = ndimage.distance_transform_edt(raster)
    return _edge_coverage(half_width - dist)


_RENDERERS = {
    "disk": _render_disk,
    "annulus": _render_annulus,
    "spiral-channel": _render_spiral,
}


def render_shapes(spec: PhantomSpec) -> np.ndarray:
    """Composite all shapes onto the canvas (max blend), intensities in [0,1]."""
    spec.validate()
    grid = np.zeros((spec.canvas, spec.canvas), dtype=np.float64)
    for shape in spec.shapes:
        layer = _RENDERERS[shape.kind](spec.canvas, shape) * float(shape.intensity)
        grid = np.maximum(grid, layer)
    return np.clip(grid, 0.0, 1.0)


def degrade(hr: np.ndarray, spec: PhantomSpec, noise_stream: int = _TAG_PAIR_NOISE) -> np.ndarray:
    """Blur, downsample, add noise, and upsample back to the HR grid."""
    canvas = hr.shape[0]
    blurred = ndimage.gaussian_filter(hr, spec.lr_blur_sigma) if spec.lr_blur_sigma > 0 else hr
    lr_dim = max(4, round(canvas / spec.lr_factor))
    low = resample_to_dims(blurred, (lr_dim, lr_dim))
    if spec.lr_noise_sigma > 0:
        rng = np.random.Generator(np.random.PCG64(derive_seed(spec.seed, noise_stream)))
        low = low + rng.normal(0.0, spec.lr_noise_sigma, low.shape)
    low = np.clip(low, 0.0, 1.0)
    return np.clip(resample_to_dims(low, (canvas, canvas)), 0.0, 1.0)


def generate_pair(spec: PhantomSpec) -> tuple[Slice, Slice]:
    """Render one HR slice and its aligned degraded LR counterpart.

    The pair is spatially aligned by construction and intended for
    validation only; unpaired training corpora come from
    :func:`generate_unpaired_corpus` with disjoint shape seeds.
    """
    hr_grid = render_shapes(spec)
    lr_grid = degrade(hr_grid, spec)
    px = spec.hr_pixel_size_mm
    hr = Slice(hr_grid, (px, px), source=(f"phantom-{spec.seed}", 0))
    lr = Slice(lr_grid, (px, px), source=(f"phantom-{spec.seed}-lr", 0))
    return hr, lr


def random_shapes(rng: np.random.Generator, canvas: int) -> list[ShapeSpec]:
    """Draw 1-3 random shapes comfortably inside the canvas."""
    shapes = []
    for _ in range(int(rng.integers(1, 4))):
        kind = SHAPE_KINDS[int(rng.integers(0, len(SHAPE_KINDS)))]
        outer = float(rng.uniform(0.12, 0.32) * canvas)
        cy = float(rng.uniform(outer + 1, canvas - outer - 2))
        cx = float(rng.uniform(outer + 1, canvas - outer - 2))
        intensity = float(rng.uniform(0.6, 1.0))
        if kind == "disk":
            radii: tuple[float, ...] = (outer,)
        elif kind == "annulus":
            radii = (outer, float(rng.uniform(0.35, 0.7)) * outer)
        else:
            radii = (outer, float(rng.uniform(0.025, 0.06)) * canvas)
        shapes.append(ShapeSpec(kind, (cy, cx), radii, intensity))
    return shapes


def random_spec(base: PhantomSpec, stream: int) -> PhantomSpec:
    """A copy of ``base`` with freshly randomized shapes and its own seed."""
    slice_seed = derive_seed(base.seed, stream)
    rng = np.random.Generator(np.random.PCG64(slice_seed))
    return replace(base, shapes=random_shapes(rng, base.canvas), seed=slice_seed)


def generate_unpaired_corpus(
    spec: PhantomSpec,
    n_lr: int,
    n_hr: int,
    out_lr: str | Path,
    out_hr: str | Path,
    patch_size: int = 256,
    stride: int = 128,
) -> tuple[list[Path], list[Path]]:
    """Write unpaired LR and HR patch directories, one per source slice.

    LR and HR scenes come from disjoint seed streams, so no slice in one
    domain has a counterpart in the other.
    """
    if n_lr < 1 or n_hr < 1:
        raise BadSpec("need at least one slice per domain")
    lr_dirs, hr_dirs = [], []
    for i in range(n_lr):
        sub = random_spec(spec, _TAG_LR_CORPUS + i)
        _, lr = generate_pair(sub)
        patches, grid = extract_patches(lr, patch_size, stride)
        path = Path(out_lr) / f"slice_{i:03d}"
        save_patches(patches, grid, path, lr.pixel_size_mm)
        lr_dirs.append(path)
    for j in range(n_hr):
        sub = random_spec(spec, _TAG_HR_CORPUS + j)
        hr, _ = generate_pair(sub)
        patches, grid = extract_patches(hr, patch_size, stride)
        path = Path(out_hr) / f"slice_{j:03d}"
        save_patches(patches, grid, path, hr.pixel_size_mm)
        hr_dirs.append(path)
    return lr_dirs, hr_dirs


def load_patch_tree(path: str | Path) -> np.ndarray:
    """Stack all patches found in a patch directory or its subdirectories."""
    from .patchwork import load_patches

    root = Path(path)
    if (root / "grid.json").exists():
        patches, _ = load_patches(root)
        return np.stack([p.data for p in patches])
    subdirs = sorted(d for d in root.iterdir() if (d / "grid.json").exists())
    if not subdirs:
        raise FileNotFoundError(f"no patch sets under {root}")
    stacks = []
    for d in subdirs:
        patches, _ = load_patches(d)
        stacks.append(np.stack([p.data for p in patches]))
    return np.concatenate(stacks, axis=0)
