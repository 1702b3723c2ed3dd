"""Parametric synthetic hand radiographs with full ground truth.

The renderer draws a stylized left hand (palm polygon, four fingers and a
thumb as capsules, a forearm stub) in a canonical pose: middle finger up,
thumb on the image right. Skeletal maturity is encoded three ways:

* ``gap``: the epiphyseal gap at the base of every phalanx and above the
  forearm bones narrows linearly from 6 reference pixels at 12 months to
  0 at 216 months;
* ``carpal``: the number of carpal ossification blobs steps from 2 to 8;
* ``intensity``: bone brightness rises with maturity.

One reference pixel is 1/256 of the canvas short side at full hand scale, so
gap widths scale with the canvas. The hand always fits inside the circle
inscribed in the canvas, so rotations never clip it.
"""

from __future__ import annotations

import enum
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np

from .core import (
    DatasetManifest,
    ManifestEntry,
    Radiograph,
    Region,
    RegionBox,
    RegionBoxSet,
    Sex,
    Split,
    save_manifest,
    write_grayscale,
)
from .errors import InvalidSpec, IoError
from .imaging import recentre_boxes, rotated_canvas

MIN_MATURITY = 12.0
MAX_MATURITY = 216.0
MAX_GAP_REF_PX = 6.0
REF_CANVAS = 256.0
HAND_RADIUS_FRAC = 0.47  # hand lives within this fraction of min(H, W) from the centre
CHANNELS = ("gap", "carpal", "intensity")

TISSUE_LEVEL = 0.42
# open growth plate: denser than soft tissue, lighter than any bone
CARTILAGE_LEVEL = 0.48
BONE_LEVEL_RANGE = (0.55, 0.85)
NOISE_SIGMA = 0.012
SUPERSAMPLE = 4
_SHIFT = 4


@dataclass(frozen=True)
class SynthSpec:
    seed: int
    maturity_months: float
    rotation_deg: float = 0.0
    flipped: bool = False
    canvas: tuple[int, int] = (256, 256)
    background_level: float = 0.1
    artifact_count: int = 0
    sex: Sex = Sex.FEMALE
    channels: tuple[str, ...] = CHANNELS

    def validate(self) -> None:
        if not isinstance(self.seed, (int, np.integer)) or not (0 <= int(self.seed) < 2**64):
            raise InvalidSpec("seed", "must be a 64-bit non-negative integer")
        if not (MIN_MATURITY <= self.maturity_months <= MAX_MATURITY):
            raise InvalidSpec("maturity_months", "must lie in [12, 216]")
        if not (-180.0 <= self.rotation_deg < 180.0):
            raise InvalidSpec("rotation_deg", "must lie in [-180, 180)")
        h, w = self.canvas
        if not (256 <= h <= 1024 and 256 <= w <= 1024):
            raise InvalidSpec("canvas", "sides must lie in [256, 1024]")
        if not (0.0 <= self.background_level <= 0.3):
            raise InvalidSpec("background_level", "must lie in [0, 0.3]")
        if self.artifact_count < 0 or self.artifact_count > 16:
            raise InvalidSpec("artifact_count", "must lie in [0, 16]")
        unknown = set(self.channels) - set(CHANNELS)
        if unknown:
            raise InvalidSpec("channels", f"unknown channels {sorted(unknown)}")


@dataclass(frozen=True, eq=False)
class SynthRadiograph:
    radiograph: Radiograph
    truth_mask: np.ndarray
    truth_rotation_deg: float
    truth_flipped: bool
    truth_boxes: RegionBoxSet
    # canonical-frame pixel landmarks used by test oracles
    landmarks: dict = field(default_factory=dict)
    spec: Optional[SynthSpec] = None


# --- maturity encodings ---------------------------------------------------------


def maturity_fraction(months: float) -> float:
    return float(np.clip((months - MIN_MATURITY) / (MAX_MATURITY - MIN_MATURITY), 0.0, 1.0))


def gap_ref_px(months: float) -> float:
    """Epiphyseal gap in reference pixels: 6 at 12 months, 0 at 216."""
    return MAX_GAP_REF_PX * (1.0 - maturity_fraction(months))


def carpal_count(months: float) -> int:
    return 2 + min(6, int(math.floor(6.0 * maturity_fraction(months))))


def bone_level(months: float) -> float:
    lo, hi = BONE_LEVEL_RANGE
    return lo + (hi - lo) * maturity_fraction(months)


# --- canonical geometry (unit frame, y down, origin at hand centre) -------------


@dataclass(frozen=True)
class _Finger:
    name: str
    base: tuple[float, float]
    angle_deg: float  # clockwise from straight up
    length: float
    width: float
    phalanges: tuple[float, ...]


_FINGERS = (
    _Finger("little", (-0.25, -0.10), -8.0, 0.40, 0.075, (0.42, 0.30, 0.28)),
    _Finger("ring", (-0.13, -0.17), -3.0, 0.54, 0.085, (0.42, 0.31, 0.27)),
    _Finger("middle", (0.00, -0.20), 0.0, 0.60, 0.090, (0.42, 0.31, 0.27)),
    _Finger("index", (0.13, -0.17), 4.0, 0.52, 0.085, (0.42, 0.31, 0.27)),
    _Finger("thumb", (0.24, 0.22), 38.0, 0.46, 0.100, (0.55, 0.45)),
)
_PALM = (
    (-0.31, -0.10), (-0.20, -0.19), (0.00, -0.22), (0.19, -0.19), (0.27, 0.05),
    (0.30, 0.28), (0.22, 0.52), (-0.24, 0.52), (-0.30, 0.20),
)
_FOREARM = (-0.24, 0.45, 0.22, 0.90)  # x0, y0, x1, y1
_CARPAL_SITES = (
    (-0.06, 0.40), (0.06, 0.40), (-0.15, 0.36), (0.15, 0.35),
    (-0.15, 0.45), (0.00, 0.32), (0.14, 0.45), (0.00, 0.47),
)
_FOREARM_BONES = ((-0.13, 0.11), (0.10, 0.13))  # (centre x, width): ulna, radius
_FOREARM_BONE_TOP = 0.53
_EPIPHYSIS = 0.045
_JOINT = 0.025
_REF_UNIT_PX = HAND_RADIUS_FRAC * REF_CANVAS
_MAX_GAP_UNITS = MAX_GAP_REF_PX / _REF_UNIT_PX

# canonical region boxes: (centre in unit frame, side in units); WHOLE_HAND is measured
_REGION_GEOMETRY = {
    Region.WRIST_CARPAL: ((0.0, 0.43), 0.48),
}


def _unit_dir(angle_deg: float) -> np.ndarray:
    a = math.radians(angle_deg)
    return np.array([math.sin(a), -math.cos(a)])


class _Canvas:
    """Maps unit-frame points to continuous pixel coordinates (edges at 0..W)."""

    def __init__(self, shape, scale, offset):
        self.h, self.w = shape
        self.unit_px = HAND_RADIUS_FRAC * min(self.h, self.w) * scale
        self.cx = self.w / 2.0 + offset[0]
        self.cy = self.h / 2.0 + offset[1]

    def px(self, pt) -> np.ndarray:
        return np.array([self.cx + self.unit_px * pt[0], self.cy + self.unit_px * pt[1]])

    def ss(self, pts) -> np.ndarray:
        """Fixed-point supersampled cv2 coordinates for a list of unit points."""
        arr = np.array([self.px(p) for p in pts]) * SUPERSAMPLE - 0.5
        return np.round(arr * (1 << _SHIFT)).astype(np.int32)


def _rod(canvas: _Canvas, layer: np.ndarray, p0, p1, width: float) -> None:
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    d = p1 - p0
    n = np.array([-d[1], d[0]]) / (np.linalg.norm(d) + 1e-12) * width / 2.0
    quad = canvas.ss([p0 + n, p1 + n, p1 - n, p0 - n])
    cv2.fillConvexPoly(layer, quad, 255, lineType=cv2.LINE_8, shift=_SHIFT)


def _disc(canvas: _Canvas, layer: np.ndarray, c, r: float) -> None:
    centre = canvas.ss([c])[0]
    radius = int(round(r * canvas.unit_px * SUPERSAMPLE * (1 << _SHIFT)))
    cv2.circle(layer, (int(centre[0]), int(centre[1])), radius, 255, -1, lineType=cv2.LINE_8, shift=_SHIFT)


def _capsule(canvas: _Canvas, layer: np.ndarray, p0, p1, width: float) -> None:
    _rod(canvas, layer, p0, p1, width)
    _disc(canvas, layer, p0, width / 2.0)
    _disc(canvas, layer, p1, width / 2.0)


def _downsample(layer: np.ndarray, shape) -> np.ndarray:
    h, w = shape
    return cv2.resize(layer, (w, h), interpolation=cv2.INTER_AREA).astype(np.float32)


def _render_canonical(spec: SynthSpec, rng: np.random.Generator):
    """Render the unrotated hand at SUPERSAMPLE resolution.

    Returns (image, tissue coverage, canvas, landmarks, box centres); image and coverage are
    supersampled, canvas coordinates and landmarks are in output pixels.
    """
    h, w = spec.canvas
    scale = rng.uniform(0.85, 1.0)
    r0 = HAND_RADIUS_FRAC * min(h, w)
    phi = rng.uniform(0, 2 * math.pi)
    mag = rng.uniform(0, 1.0) * (1.0 - scale) * r0 * 0.9
    canvas = _Canvas((h, w), scale, (mag * math.cos(phi), mag * math.sin(phi)))

    months = spec.maturity_months
    gap_units = (gap_ref_px(months) if "gap" in spec.channels else MAX_GAP_REF_PX / 2) / _REF_UNIT_PX
    n_carpals = carpal_count(months) if "carpal" in spec.channels else 5
    level = bone_level(months) if "intensity" in spec.channels else float(np.mean(BONE_LEVEL_RANGE))
    frac = maturity_fraction(months)

    tissue = np.zeros((h * SUPERSAMPLE, w * SUPERSAMPLE), np.uint8)
    bone = np.zeros_like(tissue)
    cartilage = np.zeros_like(tissue)

    cv2.fillPoly(tissue, [canvas.ss(_PALM)], 255, lineType=cv2.LINE_8, shift=_SHIFT)
    x0, y0, x1, y1 = _FOREARM
    cv2.fillConvexPoly(tissue, canvas.ss([(x0, y0), (x1, y0), (x1, y1), (x0, y1)]), 255, shift=_SHIFT)

    landmarks: dict = {"fingers": {}, "unit_px": canvas.unit_px}
    for f in _FINGERS:
        length = f.length * rng.uniform(0.96, 1.04)
        angle = f.angle_deg + rng.uniform(-3.0, 3.0)
        d = _unit_dir(angle)
        base = np.asarray(f.base, float)
        tip = base + d * length
        _capsule(canvas, tissue, base, tip, f.width)

        # metacarpal from the carpus to the finger base
        mc_start = np.array([f.base[0] * 0.7, 0.36]) if f.name != "thumb" else np.array([0.16, 0.40])
        _rod(canvas, bone, mc_start, base - d * 0.01, f.width * 0.5)

        bone_w = f.width * 0.55
        usable = length * 0.93 - _JOINT * (len(f.phalanges) - 1)
        t = 0.02 * length
        gaps = []
        phalanx_spans = []
        for frac_len in f.phalanges:
            # fixed physis zone of the widest gap; only the open band inside it varies
            a, b = t, t + usable * frac_len
            zone0 = a + _EPIPHYSIS
            mid = zone0 + _MAX_GAP_UNITS / 2.0
            _rod(canvas, bone, base + d * a, base + d * (mid - gap_units / 2.0), bone_w * 0.92)
            _rod(canvas, bone, base + d * (mid + gap_units / 2.0), base + d * b, bone_w)
            if gap_units > 0:
                _rod(canvas, cartilage, base + d * (mid - gap_units / 2.0), base + d * (mid + gap_units / 2.0), bone_w * 0.92)
            gaps.append(canvas.px(base + d * mid).tolist())
            phalanx_spans.append((canvas.px(base + d * a).tolist(), canvas.px(base + d * b).tolist()))
            t = b + _JOINT
        landmarks["fingers"][f.name] = {
            "base": canvas.px(base).tolist(),
            "tip": canvas.px(tip).tolist(),
            "angle_deg": angle,
            "gap_centres": gaps,
            "phalanges": phalanx_spans,
            "bone_width_px": bone_w * canvas.unit_px,
        }

    # forearm bones with a distal physis
    for cx_, bw in _FOREARM_BONES:
        cap0, cap1 = _FOREARM_BONE_TOP, _FOREARM_BONE_TOP + _EPIPHYSIS
        mid = cap1 + _MAX_GAP_UNITS / 2.0
        _rod(canvas, bone, (cx_, cap0), (cx_, mid - gap_units / 2.0), bw * 0.9)
        _rod(canvas, bone, (cx_, mid + gap_units / 2.0), (cx_, _FOREARM[3] - 0.02), bw)
        if gap_units > 0:
            _rod(canvas, cartilage, (cx_, mid - gap_units / 2.0), (cx_, mid + gap_units / 2.0), bw * 0.9)
        landmarks.setdefault("forearm_gap_centres", []).append(canvas.px((cx_, mid)).tolist())

    carpal_r = 0.033 + 0.012 * frac
    for site in _CARPAL_SITES[:n_carpals]:
        jitter = rng.uniform(-0.008, 0.008, size=2)
        _disc(canvas, bone, np.asarray(site) + jitter, carpal_r)
    landmarks["carpal_count"] = n_carpals
    landmarks["gap_px"] = gap_units * canvas.unit_px

    # composite at the supersampled resolution; generate() rotates before downsampling
    t = tissue.astype(np.float32) / 255.0
    b = np.minimum(bone.astype(np.float32) / 255.0, t)
    c = np.minimum(cartilage.astype(np.float32) / 255.0, t - b)
    image = t * TISSUE_LEVEL + b * (level - TISSUE_LEVEL) + c * (CARTILAGE_LEVEL - TISSUE_LEVEL)

    centres = _region_boxes_px(canvas, landmarks)
    return image, t, canvas, landmarks, centres


def _region_boxes_px(canvas: _Canvas, landmarks: dict) -> dict:
    """Pixel (x, y, side) for the four anatomical regions; WHOLE_HAND is added later."""
    u = canvas.unit_px
    out = {}
    (cx, cy), side = _REGION_GEOMETRY[Region.WRIST_CARPAL]
    x, y = canvas.px((cx, cy))
    out[Region.WRIST_CARPAL] = (x, y, side * u)

    thumb = landmarks["fingers"]["thumb"]
    b, t = np.array(thumb["base"]), np.array(thumb["tip"])
    c = b + (t - b) * 0.45
    out[Region.THUMB] = (c[0], c[1], 0.36 * u)

    mid = landmarks["fingers"]["middle"]
    (dist_a, _), = mid["phalanges"][2:3]
    (_, mid_b) = mid["phalanges"][1]
    # centred on the distal interphalangeal joint
    c = (np.array(dist_a) + np.array(mid_b)) / 2.0
    out[Region.MIDDLE_FINGER_TOP] = (c[0], c[1], 0.26 * u)

    prox_a, prox_b = mid["phalanges"][0]
    c = np.array(prox_a) + (np.array(prox_b) - np.array(prox_a)) * 0.4
    out[Region.MIDDLE_FINGER_PROXIMAL] = (c[0], c[1], 0.30 * u)
    return out


def growth_plate_centres(landmarks: dict) -> list[tuple[float, float]]:
    """Every physis centre (fingers and forearm) in unrotated canvas pixels."""
    pts = [tuple(g) for f in landmarks["fingers"].values() for g in f["gap_centres"]]
    return pts + [tuple(g) for g in landmarks.get("forearm_gap_centres", [])]


def bounding_square(mask: np.ndarray) -> tuple[float, float, float]:
    """Centre and side (pixels, continuous coordinates) of the square around a mask's bbox."""
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        raise ValueError("empty mask")
    x0, x1 = xs.min(), xs.max() + 1
    y0, y1 = ys.min(), ys.max() + 1
    return (x0 + x1) / 2.0, (y0 + y1) / 2.0, float(max(x1 - x0, y1 - y0))


def rotate_same_canvas(img: np.ndarray, angle_cw_deg: float, interpolation=cv2.INTER_LINEAR) -> np.ndarray:
    """Rotate clockwise about the canvas centre, keeping the canvas size."""
    h, w = img.shape
    m = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), -angle_cw_deg, 1.0)
    return cv2.warpAffine(img, m, (w, h), flags=interpolation, borderMode=cv2.BORDER_CONSTANT, borderValue=0)


def _place_artifacts(spec: SynthSpec, img: np.ndarray, rng: np.random.Generator) -> None:
    h, w = img.shape
    short = min(h, w)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(spec.artifact_count):
        size = rng.uniform(0.03, 0.06) * short
        level = rng.uniform(0.8, 1.0)
        for _attempt in range(100):
            x = rng.uniform(size, w - size)
            y = rng.uniform(size, h - size)
            if math.hypot(x - w / 2.0, y - h / 2.0) - size * 0.75 > 0.49 * short:
                break
        else:
            continue
        if rng.random() < 0.5:
            sel = (np.abs(xx + 0.5 - x) <= size / 2) & (np.abs(yy + 0.5 - y) <= size / 3)
        else:
            sel = (xx + 0.5 - x) ** 2 + (yy + 0.5 - y) ** 2 <= (size / 2) ** 2
        img[sel] = level


def generate(spec: SynthSpec) -> SynthRadiograph:
    spec.validate()
    geo_seq, noise_seq, art_seq = np.random.SeedSequence(int(spec.seed)).spawn(3)
    geo_rng = np.random.default_rng(geo_seq)
    image, tissue_ss, canvas, landmarks, centres = _render_canonical(spec, geo_rng)
    h, w = spec.canvas

    canon_mask = _downsample(tissue_ss, (h, w)) >= 0.5
    hx, hy, hside = bounding_square(canon_mask)
    centres[Region.WHOLE_HAND] = (hx, hy, hside)
    boxes = RegionBoxSet(tuple(RegionBox.from_pixels(r, *centres[r], (h, w)) for r in centres))

    if spec.rotation_deg != 0.0:
        image = rotate_same_canvas(image, spec.rotation_deg)
        tissue_ss = rotate_same_canvas(tissue_ss, spec.rotation_deg)
    image, tissue_cov = _downsample(image, (h, w)), _downsample(tissue_ss, (h, w))
    if spec.flipped:
        image = image[:, ::-1]
        tissue_cov = tissue_cov[:, ::-1]

    noise_rng = np.random.default_rng(noise_seq)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    gx, gy = noise_rng.uniform(-1, 1, size=2)
    gradient = 0.03 * (gx * (xx / w - 0.5) + gy * (yy / h - 0.5))
    background = spec.background_level + gradient
    pixels = image + (1.0 - tissue_cov) * background
    pixels = pixels + noise_rng.normal(0.0, NOISE_SIGMA, size=(h, w)).astype(np.float32)
    pixels = np.clip(pixels, 0.0, 1.0).astype(np.float32)
    _place_artifacts(spec, pixels, np.random.default_rng(art_seq))

    radiograph = Radiograph(f"synth-{int(spec.seed)}", pixels, spec.sex, float(spec.maturity_months))
    return SynthRadiograph(
        radiograph=radiograph,
        truth_mask=np.ascontiguousarray(tissue_cov >= 0.5),
        truth_rotation_deg=float(spec.rotation_deg),
        truth_flipped=bool(spec.flipped),
        truth_boxes=boxes,
        landmarks=landmarks,
        spec=spec,
    )


# --- datasets -------------------------------------------------------------------


class MaturityDistribution(enum.Enum):
    UNIFORM = "uniform"
    RSNA_LIKE = "rsna_like"


# Relative mass of each 12-month bin over [12, 216): two modes, at the 120-132
# bin and at 156-180. Levels are reciprocal integers so the age-balancing
# repetition factors land on whole numbers.
RSNA_LIKE_BIN_WEIGHTS = {
    1: 1 / 10, 2: 1 / 8, 3: 1 / 6, 4: 1 / 5, 5: 1 / 4, 6: 1 / 4, 7: 1 / 3, 8: 1 / 3,
    9: 1 / 2, 10: 1.0, 11: 1 / 2, 12: 1 / 2, 13: 1.0, 14: 1.0, 15: 1 / 2, 16: 1 / 4, 17: 1 / 8,
}


def sample_maturities(count: int, rng: np.random.Generator, distribution: MaturityDistribution) -> np.ndarray:
    if distribution is MaturityDistribution.UNIFORM:
        return rng.uniform(MIN_MATURITY, MAX_MATURITY, size=count)
    # stratified: exact per-bin quotas (largest remainder), uniform within a bin
    bins = np.array(sorted(RSNA_LIKE_BIN_WEIGHTS))
    weights = np.array([RSNA_LIKE_BIN_WEIGHTS[b] for b in bins])
    ideal = weights / weights.sum() * count
    quota = np.floor(ideal).astype(int)
    short = count - quota.sum()
    if short:
        order = np.argsort(-(ideal - quota), kind="stable")
        quota[order[:short]] += 1
    ages = np.concatenate([rng.uniform(12.0 * b, 12.0 * (b + 1), size=q) for b, q in zip(bins, quota)])
    ages = np.clip(ages, MIN_MATURITY, MAX_MATURITY)
    rng.shuffle(ages)
    return ages


def sample_specs(
    count: int,
    seed: int,
    distribution: MaturityDistribution = MaturityDistribution.UNIFORM,
    canvas_range: tuple[int, int] = (256, 320),
    max_artifacts: int = 3,
    channels: Sequence[str] = CHANNELS,
) -> list[SynthSpec]:
    """Draw ``count`` reproducible specs; each image gets its own derived seed."""
    if count < 1:
        raise InvalidSpec("count", "must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    ages = sample_maturities(count, rng, distribution)
    lo, hi = canvas_range
    specs = []
    for i in range(count):
        child = np.random.SeedSequence([int(seed), i]).generate_state(2, dtype=np.uint32)
        img_seed = int(child[0]) << 32 | int(child[1])
        specs.append(
            SynthSpec(
                seed=img_seed,
                maturity_months=float(ages[i]),
                rotation_deg=float(rng.uniform(-180.0, 180.0)),
                flipped=bool(rng.random() < 0.5),
                canvas=(int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))),
                background_level=float(rng.uniform(0.0, 0.3)),
                artifact_count=int(rng.integers(0, max_artifacts + 1)),
                sex=Sex.MALE if rng.random() < 0.5 else Sex.FEMALE,
                channels=tuple(channels),
            )
        )
    return specs


def corrected_shape(sample: SynthRadiograph) -> tuple[int, int]:
    """Shape of the image once its truth orientation has been undone (padded canvas)."""
    if sample.truth_rotation_deg == 0.0:
        return sample.radiograph.shape
    return rotated_canvas(sample.radiograph.shape, sample.truth_rotation_deg)


def corrected_boxes(sample: SynthRadiograph) -> RegionBoxSet:
    """Truth boxes on the orientation-corrected image."""
    return recentre_boxes(sample.truth_boxes, sample.radiograph.shape, corrected_shape(sample))


def truth_record(id_: str, sample: SynthRadiograph) -> dict:
    return {
        "id": id_,
        "maturity_months": sample.radiograph.bone_age_months,
        "rotation_deg": sample.truth_rotation_deg,
        "flipped": sample.truth_flipped,
        "canvas": list(sample.radiograph.shape),
        "boxes": sample.truth_boxes.to_json(),
        "corrected_boxes": corrected_boxes(sample).to_json(),
        "seed": int(sample.spec.seed) if sample.spec else None,
    }


def generate_dataset(
    count: int,
    seed: int,
    maturity_distribution: MaturityDistribution = MaturityDistribution.UNIFORM,
    out_dir: str | os.PathLike = "synth",
    canvas_range: tuple[int, int] = (256, 320),
    workers: int = 1,
    split: Split = Split.TRAIN,
) -> tuple[DatasetManifest, list[dict]]:
    """Render ``count`` images to ``out_dir`` with manifest and label files.

    Layout: ``images/<id>.png`` (16-bit), ``masks/<id>.png`` (0/255),
    ``manifest.csv``, ``truths.jsonl``, ``orientation.jsonl`` and
    ``boxes.jsonl``. Box labels refer to the orientation-corrected image.
    """
    out = Path(out_dir)
    specs = sample_specs(count, seed, maturity_distribution, canvas_range)
    ids = [str(i + 1) for i in range(count)]
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(out, str(exc)) from exc

    def render(i: int) -> dict:
        sample = generate(specs[i])
        try:
            write_grayscale(out / "images" / f"{ids[i]}.png", sample.radiograph.pixels, bits=16)
            write_grayscale(out / "masks" / f"{ids[i]}.png", sample.truth_mask.astype(np.float32), bits=8)
        except IoError:
            raise
        except OSError as exc:
            raise IoError(out, str(exc)) from exc
        return truth_record(ids[i], sample)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            truths = list(pool.map(render, range(count)))
    else:
        truths = [render(i) for i in range(count)]

    entries = tuple(
        ManifestEntry(ids[i], out / "images" / f"{ids[i]}.png", round(specs[i].maturity_months, 6), specs[i].sex)
        for i in range(count)
    )
    manifest = DatasetManifest(entries, split)
    save_manifest(manifest, out / "manifest.csv")
    with open(out / "truths.jsonl", "w") as fh:
        for t in truths:
            fh.write(json.dumps(t) + "\n")
    with open(out / "orientation.jsonl", "w") as fh:
        for t in truths:
            fh.write(json.dumps({"id": t["id"], "angle_deg": t["rotation_deg"], "flipped": t["flipped"]}) + "\n")
    with open(out / "boxes.jsonl", "w") as fh:
        for t in truths:
            for region, (cx, cy, side) in t["corrected_boxes"].items():
                fh.write(json.dumps({"id": t["id"], "region": region, "cx": cx, "cy": cy, "side": side}) + "\n")
    return manifest, truths
