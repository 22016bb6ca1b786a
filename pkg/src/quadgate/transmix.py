"""Conditional online TransMix for score regression.

A rectangle of image B is pasted into image A (CutMix); the mixing weight is
the CLS attention mass of the mixed image that falls on the pasted cells, and
the mixed target is the corresponding convex combination of the two scores.
Only anchors whose score lies in an under-represented range are mixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import Modality
from .errors import ConfigurationError, ContractError, DimensionError, NumericalError

MIN_AREA = 0.05
MAX_AREA = 0.5

AttentionProvider = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class CutMask:
    """Binary H x W mask, 1 where pixels come from image B."""

    mask: np.ndarray
    top: int
    left: int
    height: int
    width: int

    @property
    def area_fraction(self) -> float:
        return self.height * self.width / self.mask.size


@dataclass(frozen=True)
class MixedSample:
    image: np.ndarray
    lam: float
    mixed_score: float
    score_a: float
    score_b: float
    index_a: int = -1
    index_b: int = -1


@dataclass(frozen=True)
class EligibilityRule:
    """Which ground-truth scores are rare enough to be mixed."""

    modality: Modality

    def __call__(self, score: float) -> bool:
        s = float(score)
        if self.modality is Modality.GE:
            return s <= 4.0
        if self.modality is Modality.LO:
            return s < 2.0 or s > 6.0
        return s > 10.0

    @classmethod
    def for_modality(cls, modality) -> "EligibilityRule":
        return cls(Modality.parse(modality))


def sample_cut_mask(h: int, w: int, rng: np.random.Generator) -> CutMask:
    """Random axis-aligned rectangle covering 5%..50% of an h x w image.

    The target area fraction and the centre are uniform. A rectangle that
    would cross the border is shifted back inside, so its area is kept.
    """
    if h < 8 or w < 8:
        raise ConfigurationError(f"cut masks need images of at least 8x8, got {h}x{w}")
    frac = rng.uniform(MIN_AREA, MAX_AREA)
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    n = h * w
    rh = int(min(h, max(1, round(h * math.sqrt(frac)))))
    lo = math.ceil(MIN_AREA * n / rh)
    hi = min(w, math.floor(MAX_AREA * n / rh))
    rw = int(min(hi, max(lo, round(frac * n / rh))))
    top = int(min(max(round(cy - rh / 2), 0), h - rh))
    left = int(min(max(round(cx - rw / 2), 0), w - rw))
    mask = np.zeros((h, w))
    mask[top:top + rh, left:left + rw] = 1.0
    return CutMask(mask, top, left, rh, rw)


def apply_cutmix(img_a: np.ndarray, img_b: np.ndarray, mask: CutMask | np.ndarray) -> np.ndarray:
    """``(1 - M) * A + M * B`` pixelwise, broadcast over channels."""
    m = mask.mask if isinstance(mask, CutMask) else np.asarray(mask, dtype=np.float64)
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape or a.shape[-2:] != m.shape:
        raise DimensionError(f"cutmix shapes disagree: A {a.shape}, B {b.shape}, mask {m.shape}")
    return (1.0 - m) * a + m * b


def downsample_mask(mask: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour reduction: each cell takes the mask value at its centre pixel."""
    h, w = mask.shape
    gh, gw = grid
    rows = ((np.arange(gh) + 0.5) * h / gh).astype(int)
    cols = ((np.arange(gw) + 0.5) * w / gw).astype(int)
    return mask[np.ix_(rows, cols)]


def compute_lambda(att: np.ndarray, mask: CutMask | np.ndarray, patch_grid: tuple[int, int]) -> float:
    """Attention mass on the pasted cells, clipped to [0, 1]."""
    m = mask.mask if isinstance(mask, CutMask) else np.asarray(mask, dtype=np.float64)
    att = np.asarray(att, dtype=np.float64).reshape(-1)
    gh, gw = patch_grid
    if att.size != gh * gw:
        raise DimensionError(f"attention has {att.size} entries but the patch grid is {gh}x{gw}")
    lam = float(np.dot(att, downsample_mask(m, patch_grid).reshape(-1)))
    return min(max(lam, 0.0), 1.0)


def mixed_score(y_a: float, y_b: float, lam: float) -> float:
    """``lam * y_b + (1 - lam) * y_a``, kept inside [min, max] of the two."""
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"mixing weight must lie in [0, 1], got {lam}")
    y = lam * y_b + (1.0 - lam) * y_a
    return min(max(y, min(y_a, y_b)), max(y_a, y_b))


def conditional_transmix(
    images: np.ndarray,
    scores: np.ndarray,
    rule: Callable[[float], bool],
    attention_provider: AttentionProvider,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, list[MixedSample]]:
    """Replace every eligible anchor in the batch by a TransMix sample.

    ``attention_provider`` maps mixed images (k, C, H, W) to attention maps
    (k, gh, gw) that each sum to one; it is called once for all anchors.
    Partners are drawn uniformly from the rest of the original batch.
    Ineligible samples are returned untouched.
    """
    images = np.asarray(images, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if len(images) != len(scores):
        raise DimensionError(f"{len(images)} images but {len(scores)} scores")
    out_images = images.copy()
    out_scores = scores.copy()
    n = len(images)
    anchors = [i for i in range(n) if rule(scores[i])]
    if n < 2 or not anchors:
        return out_images, out_scores, []

    h, w = images.shape[-2:]
    plans = []
    for i in anchors:
        j = int(rng.integers(n - 1))
        j += j >= i
        cut = sample_cut_mask(h, w, rng)
        plans.append((i, j, cut, apply_cutmix(images[i], images[j], cut)))

    maps = np.asarray(attention_provider(np.stack([p[3] for p in plans])))
    if maps.ndim != 3 or len(maps) != len(plans):
        raise DimensionError(f"attention provider returned shape {maps.shape}, expected ({len(plans)}, gh, gw)")
    if not np.all(np.isfinite(maps)):
        raise NumericalError("attention provider returned non-finite values")
    grid = maps.shape[1:]
    records = []
    for (i, j, cut, mixed), att in zip(plans, maps):
        lam = compute_lambda(att, cut, grid)
        y = mixed_score(scores[i], scores[j], lam)
        out_images[i] = mixed
        out_scores[i] = y
        records.append(MixedSample(mixed, lam, y, float(scores[i]), float(scores[j]), i, j))
    return out_images, out_scores, records


def score_histogram(scores, levels: np.ndarray) -> np.ndarray:
    """Counts per score level, each score assigned to its nearest level."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    levels = np.asarray(levels, dtype=np.float64)
    if np.any(scores < levels[0]) or np.any(scores > levels[-1]):
        raise ContractError(f"scores outside the level range [{levels[0]}, {levels[-1]}]")
    idx = nearest_level(scores, levels)
    return np.bincount(idx, minlength=len(levels))


def nearest_level(scores, levels: np.ndarray) -> np.ndarray:
    """Index of the closest level; ties go to the lower level."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    return np.argmin(np.abs(scores[:, None] - np.asarray(levels)[None, :]), axis=1)
