"""Label-preserving crop augmentation, age-balancing oversampling and epoch subsampling."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import cv2
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .core import DatasetManifest, Sex, age_bin
from .crop import RegionCropSet
from .errors import EmptyManifest

_BORDER = cv2.BORDER_REFLECT_101


class AugmentPolicy(BaseModel):
    """Ranges for the small geometric perturbations applied to each region crop."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    max_rotation_deg: float = Field(10.0, ge=0.0, le=15.0)
    zoom_range: tuple[float, float] = (0.9, 1.1)
    translate_frac: float = Field(0.05, ge=0.0, le=0.2)
    grid_distortion_cells: int = Field(4, ge=1)
    grid_distortion_magnitude: float = Field(0.08, ge=0.0, le=0.3)
    perspective_warp_frac: float = Field(0.06, ge=0.0, le=0.2)
    intensity_jitter: float = Field(0.03, ge=0.0, le=0.1)
    probability: float = Field(0.5, ge=0.0, le=1.0)
    seed: int = 0

    @model_validator(mode="after")
    def _zoom_small(self):
        lo, hi = self.zoom_range
        if not (0.8 <= lo <= hi <= 1.25):
            raise ValueError("zoom_range must lie within [0.8, 1.25]")
        return self

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(probability=0.0)


def sample_rng(seed: int, sample_key, epoch: int, repeat: int = 0) -> np.random.Generator:
    """Generator keyed by (seed, sample, epoch, repetition) so runs are reproducible."""
    key = zlib.crc32(str(sample_key).encode()) if not isinstance(sample_key, int) else sample_key
    return np.random.default_rng([int(seed), int(key), int(epoch), int(repeat)])


# --- individual transforms ------------------------------------------------------------------


def _affine(img: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape
    angle = rng.uniform(-policy.max_rotation_deg, policy.max_rotation_deg)
    zoom = rng.uniform(*policy.zoom_range)
    m = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), angle, zoom)
    m[:, 2] += rng.uniform(-policy.translate_frac, policy.translate_frac, size=2) * (w, h)
    return cv2.warpAffine(img, m, (w, h), flags=cv2.INTER_LINEAR, borderMode=_BORDER)


def _grid_distortion(img: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape
    cells = policy.grid_distortion_cells
    mag = policy.grid_distortion_magnitude
    # displacement at the (cells+1)^2 grid nodes, in units of one cell
    nodes = rng.uniform(-mag, mag, size=(2, cells + 1, cells + 1)).astype(np.float32)
    dx = cv2.resize(nodes[0], (w, h), interpolation=cv2.INTER_CUBIC) * (w / cells)
    dy = cv2.resize(nodes[1], (w, h), interpolation=cv2.INTER_CUBIC) * (h / cells)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    return cv2.remap(img, xx + dx, yy + dy, cv2.INTER_LINEAR, borderMode=_BORDER)


def _perspective(img: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape
    src = np.float32([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]])
    jitter = rng.uniform(-policy.perspective_warp_frac, policy.perspective_warp_frac, size=(4, 2)) * (w, h)
    m = cv2.getPerspectiveTransform(src, (src + jitter).astype(np.float32))
    return cv2.warpPerspective(img, m, (w, h), flags=cv2.INTER_LINEAR, borderMode=_BORDER)


def _intensity(img: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    gain = 1.0 + rng.uniform(-policy.intensity_jitter, policy.intensity_jitter)
    return img * gain


_TRANSFORMS = (_affine, _grid_distortion, _perspective, _intensity)


def augment_crop(img: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    out = img.astype(np.float32)
    for transform in _TRANSFORMS:
        if rng.random() < policy.probability:
            out = transform(out, policy, rng)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def augment_sample(
    crops: RegionCropSet, sex: Sex, age: float, policy: AugmentPolicy, rng: np.random.Generator | None = None
) -> tuple[RegionCropSet, Sex, float]:
    """Perturb every region crop independently; the labels pass through untouched."""
    if rng is None:
        rng = np.random.default_rng(policy.seed)
    out = {region: augment_crop(img, policy, rng) for region, img in crops.crops.items()}
    return RegionCropSet(out, crops.margin, crops.final_side), sex, age


def random_crop(img: np.ndarray, side: int, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    return img[top : top + side, left : left + side]


def center_crop(img: np.ndarray, side: int) -> np.ndarray:
    h, w = img.shape
    top, left = (h - side) // 2, (w - side) // 2
    return img[top : top + side, left : left + side]


# --- balancing -----------------------------------------------------------------------------


@dataclass(frozen=True)
class BalancePlan:
    bin_months: int = 12
    factors: dict = field(default_factory=dict)
    cap: int = 10

    def factor_for(self, age: float) -> int:
        return self.factors.get(age_bin(age, self.bin_months), 1)

    def capped_bins(self) -> set[int]:
        return {b for b, f in self.factors.items() if f >= self.cap}


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def balance_plan_from_ages(ages: Iterable[float], bin_months: int = 12, cap: int = 10) -> BalancePlan:
    """factor(bin) = min(cap, round(max_count / count)), rounding halves up."""
    if bin_months <= 0 or cap < 1:
        raise ValueError("bin_months and cap must be positive")
    counts: dict[int, int] = {}
    for a in ages:
        b = age_bin(a, bin_months)
        counts[b] = counts.get(b, 0) + 1
    if not counts:
        raise EmptyManifest("cannot balance an empty dataset")
    peak = max(counts.values())
    factors = {b: max(1, min(cap, _round_half_up(peak / c))) for b, c in sorted(counts.items())}
    return BalancePlan(bin_months, factors, cap)


def build_balance_plan(manifest: DatasetManifest, bin_months: int = 12, cap: int = 10) -> BalancePlan:
    if len(manifest) == 0:
        raise EmptyManifest("cannot balance an empty manifest")
    return balance_plan_from_ages(manifest.labeled_ages(), bin_months, cap)


def expand_indices(ages: Sequence[float], plan: BalancePlan) -> list[int]:
    """Each sample index repeated by its bin's factor."""
    out = []
    for i, a in enumerate(ages):
        out.extend([i] * plan.factor_for(a))
    return out


def balanced_counts(ages: Sequence[float], plan: BalancePlan) -> dict[int, int]:
    out: dict[int, int] = {}
    for a in ages:
        b = age_bin(a, plan.bin_months)
        out[b] = out.get(b, 0) + plan.factor_for(a)
    return out


def epoch_subsample(dataset_size: int, fraction: float, epoch_index: int, seed: int) -> list[int]:
    """``ceil(fraction * size)`` distinct indices (sorted), drawn per (seed, epoch)."""
    if not (0.0 < fraction <= 1.0):
        raise ValueError("fraction must be in (0, 1]")
    k = math.ceil(fraction * dataset_size)
    if k >= dataset_size:
        return list(range(dataset_size))
    rng = np.random.default_rng([int(seed), int(epoch_index), 0x5AB])
    return sorted(int(i) for i in rng.choice(dataset_size, size=k, replace=False))
