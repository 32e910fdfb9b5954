"""Monte Carlo dropout inference: posterior mean and per-pixel uncertainty.

Runs T stochastic forward passes with independent dropout masks, then
reduces them to the predictive posterior mean and the population variance
per pixel. Pass i draws its masks from a stream derived from (seed, i),
so results are reproducible and independent of execution order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import BadT, ShapeError
from .imaging import Slice, save_slice
from .networks import Generator, derive_seed, forward

DEFAULT_MC_PASSES = 100

_STREAM_MC_BASE = 1 << 20  # keeps MC pass streams apart from training streams


@dataclass
class UncertaintyResult:
    """Predictive posterior mean and per-pixel variance over T passes."""

    mean: np.ndarray
    variance: np.ndarray
    t: int
    seed: int

    def __post_init__(self):
        if self.mean.shape != self.variance.shape:
            raise ShapeError(f"mean/variance dims differ: {self.mean.shape} vs {self.variance.shape}")


def _as_input_tensor(x, dtype: torch.dtype) -> torch.Tensor:
    data = getattr(x, "data", x)
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2D patch, got shape {arr.shape}")
    return torch.from_numpy(arr).to(dtype).unsqueeze(0).unsqueeze(0)


def mc_infer(g_l: Generator, x, t: int = DEFAULT_MC_PASSES, seed: int = 0) -> UncertaintyResult:
    """Collect T dropout-perturbed translations of a patch and reduce them.

    mean = (1/T) sum of outputs; variance = (1/T) sum of squared deviations
    from that mean (population form), computed per pixel in 64-bit.
    """
    if t < 1:
        raise BadT(f"pass count must be >= 1, got {t}")
    dtype = next(g_l.parameters()).dtype
    inp = _as_input_tensor(x, dtype)
    outputs = np.empty((t, inp.shape[-2], inp.shape[-1]), dtype=np.float64)
    for i in range(t):
        rng = torch.Generator().manual_seed(derive_seed(seed, _STREAM_MC_BASE + i))
        out = forward(g_l, inp, stochastic=True, generator=rng)
        outputs[i] = out[0, 0].to(torch.float64).numpy()
    # Mean via a representative plus mean deviation: identical passes (e.g.
    # dropout rate 0) then reduce to exactly zero variance.
    mean = outputs[0] + (outputs - outputs[0]).mean(axis=0)
    variance = np.square(outputs - mean).mean(axis=0)
    return UncertaintyResult(mean=mean, variance=variance, t=t, seed=seed)


def uncertainty_map(
    result: UncertaintyResult,
    lr_patch=None,
    binarize_quantile: float | None = None,
) -> np.ndarray:
    """Rescale the variance grid to [0,1] by its own maximum.

    With ``binarize_quantile`` set, the map is thresholded at that quantile
    of its nonzero values, yielding the rough structure mask the heat maps
    suggest. ``lr_patch``, when given, is only validated for matching dims
    so the map can be overlaid on it.
    """
    if lr_patch is not None:
        lr = np.asarray(getattr(lr_patch, "data", lr_patch))
        if lr.shape != result.variance.shape:
            raise ShapeError(f"LR patch dims {lr.shape} differ from map {result.variance.shape}")
    peak = float(result.variance.max())
    if peak == 0.0:
        return np.zeros_like(result.variance)
    heat = result.variance / peak
    if binarize_quantile is not None:
        level = float(np.quantile(heat, binarize_quantile))
        heat = (heat > level).astype(np.float64)
    return heat


def export_result(result: UncertaintyResult, out_dir: str | Path,
                  stem: str, dropout_rate: float,
                  pixel_size_mm: tuple[float, float] = (1.0, 1.0)) -> Path:
    """Write mean and rescaled-variance images plus a JSON sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_slice(Slice(np.clip(result.mean, 0.0, 1.0), pixel_size_mm), out_dir / f"{stem}_mean")
    save_slice(Slice(uncertainty_map(result), pixel_size_mm), out_dir / f"{stem}_variance")
    sidecar = {"T": result.t, "seed": result.seed, "dropout_rate": dropout_rate}
    (out_dir / f"{stem}_mc.json").write_text(json.dumps(sidecar))
    return out_dir
