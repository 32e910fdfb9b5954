"""Shape similarity via Hu invariant moments and rank-sum statistics.

The distance between two images is computed on the seven Hu invariants
after a signed log10 rescale, summed as |1/m_i - 1/m_i'| (the common
contour-matching form); the plain |m_i - m_i'| form is available behind a
flag. Set-to-set similarity takes the minimum distance over all cross-set
pairs, plus the mean of per-slice minima used for reporting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import EmptySet, ZeroMass
from .imaging import Slice

HU_SKIP_EPS = 1e-30
EXACT_ENUMERATION_LIMIT = 12


def _as_grid(image) -> np.ndarray:
    data = image.data if isinstance(image, Slice) else np.asarray(image)
    return np.asarray(data, dtype=np.float64)


def hu_moments(image, binarize: bool = False, binarize_threshold: float = 0.5) -> np.ndarray:
    """Compute Hu's seven invariant moments of a grayscale grid.

    Raw moments use x = column and y = row coordinates; central moments are
    taken about the intensity centroid and normalized by mass to be
    translation- and scale-invariant before combining. ``binarize``
    thresholds the grid first, for sensitivity checks against the
    default intensity-weighted moments.
    """
    grid = _as_grid(image)
    if binarize:
        grid = (grid >= binarize_threshold).astype(np.float64)
    mass = grid.sum()
    if mass <= 0:
        raise ZeroMass("image has no positive intensity mass")
    h, w = grid.shape
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    cy = (grid * ys).sum() / mass
    cx = (grid * xs).sum() / mass
    dy = ys - cy
    dx = xs - cx

    def mu(p: int, q: int) -> float:
        return float((grid * dx**p * dy**q).sum())

    def eta(p: int, q: int) -> float:
        return mu(p, q) / mass ** (1.0 + (p + q) / 2.0)

    e20, e02, e11 = eta(2, 0), eta(0, 2), eta(1, 1)
    e30, e03, e21, e12 = eta(3, 0), eta(0, 3), eta(2, 1), eta(1, 2)
    h1 = e20 + e02
    h2 = (e20 - e02) ** 2 + 4.0 * e11**2
    h3 = (e30 - 3.0 * e12) ** 2 + (3.0 * e21 - e03) ** 2
    h4 = (e30 + e12) ** 2 + (e21 + e03) ** 2
    h5 = (e30 - 3.0 * e12) * (e30 + e12) * ((e30 + e12) ** 2 - 3.0 * (e21 + e03) ** 2) + (
        3.0 * e21 - e03
    ) * (e21 + e03) * (3.0 * (e30 + e12) ** 2 - (e21 + e03) ** 2)
    h6 = (e20 - e02) * ((e30 + e12) ** 2 - (e21 + e03) ** 2) + 4.0 * e11 * (e30 + e12) * (
        e21 + e03
    )
    h7 = (3.0 * e21 - e03) * (e30 + e12) * ((e30 + e12) ** 2 - 3.0 * (e21 + e03) ** 2) - (
        e30 - 3.0 * e12
    ) * (e21 + e03) * (3.0 * (e30 + e12) ** 2 - (e21 + e03) ** 2)
    return np.array([h1, h2, h3, h4, h5, h6, h7], dtype=np.float64)


@dataclass(frozen=True)
class HuDistanceDetail:
    distance: float
    skipped: tuple[int, ...]

    def __float__(self) -> float:
        return self.distance


def hum_distance_from_vectors(
    ha: np.ndarray, hb: np.ndarray, form: str = "reciprocal-log"
) -> HuDistanceDetail:
    """Distance between two precomputed Hu vectors.

    Terms where either invariant magnitude falls below ``HU_SKIP_EPS`` (or
    whose signed log is exactly 0) are skipped and recorded instead of
    producing infinities.
    """
    if form not in ("reciprocal-log", "log"):
        raise ValueError(f"unknown distance form {form!r}")
    total = 0.0
    skipped = []
    for i in range(7):
        a, b = float(ha[i]), float(hb[i])
        if abs(a) < HU_SKIP_EPS or abs(b) < HU_SKIP_EPS:
            skipped.append(i)
            continue
        ma = math.copysign(math.log10(abs(a)), a)
        mb = math.copysign(math.log10(abs(b)), b)
        if ma == 0.0 or mb == 0.0:
            skipped.append(i)
            continue
        if form == "reciprocal-log":
            total += abs(1.0 / ma - 1.0 / mb)
        else:
            total += abs(ma - mb)
    return HuDistanceDetail(total, tuple(skipped))


def hum_distance(
    a, b, form: str = "reciprocal-log", binarize: bool = False, return_detail: bool = False
):
    """Hu-moment shape distance between two grayscale images."""
    detail = hum_distance_from_vectors(
        hu_moments(a, binarize), hu_moments(b, binarize), form
    )
    return detail if return_detail else detail.distance


@dataclass
class MHumResult:
    """Minimum cross-set Hu distance plus the per-slice reporting view."""

    minimum: float
    per_slice_min: list[float]
    mean_of_minima: float

    def __float__(self) -> float:
        return self.minimum


def m_hum(xs, ys, form: str = "reciprocal-log", binarize: bool = False) -> MHumResult:
    """Minimum HuM distance over all pairs of two unaligned image sets.

    ``per_slice_min[i]`` is the best match for ``xs[i]`` against all of
    ``ys``; ``mean_of_minima`` averages those per-slice scores.
    """
    xs, ys = list(xs), list(ys)
    if not xs or not ys:
        raise EmptySet("m-HuM needs two non-empty sets")
    hx = [hu_moments(x, binarize) for x in xs]
    hy = [hu_moments(y, binarize) for y in ys]
    per_slice = [
        min(hum_distance_from_vectors(ha, hb, form).distance for hb in hy) for ha in hx
    ]
    return MHumResult(
        minimum=min(per_slice),
        per_slice_min=per_slice,
        mean_of_minima=float(np.mean(per_slice)),
    )


@dataclass
class RatingSample:
    """Two groups of 1..6 rating scores to compare."""

    scores_a: list[int]
    scores_b: list[int]

    def __post_init__(self):
        if not self.scores_a or not self.scores_b:
            raise ValueError("both score groups must be non-empty")
        for v in [*self.scores_a, *self.scores_b]:
            if not 1 <= int(v) <= 6:
                raise ValueError(f"score {v} outside the 1..6 scale")


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    p_two_sided: float
    method: str  # "exact" or "normal"
    degenerate: bool = False


def _midranks(pooled: np.ndarray) -> np.ndarray:
    order = np.argsort(pooled, kind="stable")
    ranks = np.empty(len(pooled), dtype=np.float64)
    i = 0
    while i < len(pooled):
        j = i
        while j + 1 < len(pooled) and pooled[order[j + 1]] == pooled[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def wilcoxon_rank_sum(scores_a, scores_b) -> WilcoxonResult:
    """Two-sample rank-sum test with midrank ties.

    The p-value is exact (enumeration over group assignments) when
    n + m <= 12, else a tie-corrected normal approximation with continuity
    correction. The reported statistic is the smaller of the two
    Mann-Whitney U values, which is symmetric in the arguments.
    """
    a = np.asarray(list(scores_a), dtype=np.float64)
    b = np.asarray(list(scores_b), dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("both groups must be non-empty")
    n, m = a.size, b.size
    total = n + m
    pooled = np.concatenate([a, b])
    ranks = _midranks(pooled)
    w_a = float(ranks[:n].sum())
    u_a = w_a - n * (n + 1) / 2.0
    u_b = n * m - u_a
    statistic = min(u_a, u_b)

    if np.all(pooled == pooled[0]):
        return WilcoxonResult(statistic, 1.0, "exact", degenerate=True)

    if total <= EXACT_ENUMERATION_LIMIT:
        sums = [ranks[list(idx)].sum() for idx in combinations(range(total), n)]
        count = len(sums)
        le = sum(1 for s in sums if s <= w_a + 1e-9)
        ge = sum(1 for s in sums if s >= w_a - 1e-9)
        p = min(1.0, 2.0 * min(le, ge) / count)
        return WilcoxonResult(statistic, p, "exact")

    mu = n * m / 2.0
    _, tie_counts = np.unique(pooled, return_counts=True)
    tie_term = float(((tie_counts**3 - tie_counts)).sum())
    var = n * m / 12.0 * ((total + 1) - tie_term / (total * (total - 1)))
    if var <= 0:
        return WilcoxonResult(statistic, 1.0, "normal", degenerate=True)
    diff = u_a - mu
    cc = 0.5 * math.copysign(1.0, diff) if diff != 0 else 0.0
    z = (diff - cc) / math.sqrt(var)
    p = min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))
    return WilcoxonResult(statistic, p, "normal")
