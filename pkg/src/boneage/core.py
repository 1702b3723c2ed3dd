"""Domain types, CSV manifest ingestion and age-range filtering.

Ages are carried as real-valued months everywhere; years only show up when a
report is formatted.
"""

from __future__ import annotations

import csv
import enum
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

import cv2
import numpy as np

from .errors import (
    DuplicateId,
    IoError,
    MissingColumn,
    MissingLabel,
    UnparsableRow,
)

MAX_AGE_MONTHS = 240.0
MIN_SIDE = 32
MANIFEST_COLUMNS = ("id", "boneage", "male")


class Sex(enum.Enum):
    MALE = "male"
    FEMALE = "female"

    @property
    def as_scalar(self) -> float:
        return 1.0 if self is Sex.MALE else 0.0

    @classmethod
    def parse(cls, value: str | bool | "Sex") -> "Sex":
        if isinstance(value, Sex):
            return value
        if isinstance(value, bool):
            return cls.MALE if value else cls.FEMALE
        text = str(value).strip().lower()
        if text in ("male", "m", "true"):
            return cls.MALE
        if text in ("female", "f", "false"):
            return cls.FEMALE
        raise ValueError(f"unrecognised sex {value!r}")


class Region(enum.Enum):
    WHOLE_HAND = "whole_hand"
    WRIST_CARPAL = "wrist_carpal"
    THUMB = "thumb"
    MIDDLE_FINGER_TOP = "middle_finger_top"
    MIDDLE_FINGER_PROXIMAL = "middle_finger_proximal"

    @property
    def index(self) -> int:
        return REGIONS.index(self)


REGIONS: tuple[Region, ...] = tuple(Region)


class Split(enum.Enum):
    TRAIN = "train"
    VALIDATION = "validation"
    TEST = "test"


@dataclass(frozen=True, eq=False)
class Radiograph:
    """A grayscale hand radiograph with intensities in [0, 1]."""

    id: str
    pixels: np.ndarray
    sex: Sex
    bone_age_months: Optional[float] = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 2:
            raise ValueError(f"radiograph {self.id!r}: expected a 2-D grid, got shape {px.shape}")
        if px.shape[0] < MIN_SIDE or px.shape[1] < MIN_SIDE:
            raise ValueError(f"radiograph {self.id!r}: sides must be >= {MIN_SIDE}, got {px.shape}")
        if px.size and (float(px.min()) < 0.0 or float(px.max()) > 1.0):
            raise ValueError(f"radiograph {self.id!r}: intensities outside [0, 1]")
        if self.bone_age_months is not None and not (0.0 <= self.bone_age_months <= MAX_AGE_MONTHS):
            raise ValueError(f"radiograph {self.id!r}: bone age {self.bone_age_months} outside [0, 240]")
        if px is self.pixels and px.flags.writeable:
            px = px.copy()
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape  # type: ignore[return-value]

    def with_pixels(self, pixels: np.ndarray) -> "Radiograph":
        return replace(self, pixels=np.clip(pixels, 0.0, 1.0).astype(np.float32))


@dataclass(frozen=True)
class AgeRangeMonths:
    lo: float
    hi: float

    def __post_init__(self):
        if not (0.0 <= self.lo < self.hi <= MAX_AGE_MONTHS):
            raise ValueError(f"invalid age range [{self.lo}, {self.hi}]")

    def contains(self, months: float) -> bool:
        return self.lo <= months <= self.hi

    @classmethod
    def parse(cls, text: str) -> "AgeRangeMonths":
        """Parse ``"LO:HI"`` (months)."""
        lo, sep, hi = text.partition(":")
        if not sep:
            raise ValueError(f"expected LO:HI, got {text!r}")
        return cls(float(lo), float(hi))


# The 1-18 year focus range, inclusive on both ends.
CORE_RANGE = AgeRangeMonths(12.0, 216.0)
FULL_RANGE = AgeRangeMonths(0.0, 240.0)


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image_path: Path
    bone_age_months: Optional[float]
    sex: Sex


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    split: Split = Split.TRAIN

    def __post_init__(self):
        seen: set[str] = set()
        for e in self.entries:
            if e.id in seen:
                raise DuplicateId(e.id)
            seen.add(e.id)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def labeled_ages(self) -> list[float]:
        ages = []
        for e in self.entries:
            if e.bone_age_months is None:
                raise MissingLabel(e.id)
            ages.append(e.bone_age_months)
        return ages


def _parse_bool(text: str) -> bool:
    if text == "True":
        return True
    if text == "False":
        return False
    raise ValueError(f"male must be literal True/False, got {text!r}")


def load_manifest(
    path: str | os.PathLike,
    split: Split = Split.TRAIN,
    image_dir: str | os.PathLike | None = None,
) -> DatasetManifest:
    """Read an RSNA-style ``id,boneage,male`` CSV.

    Image paths resolve to ``<image_dir>/<id>.png``; ``image_dir`` defaults to
    an ``images`` directory next to the manifest.
    """
    path = Path(path)
    if image_dir is None:
        image_dir = path.parent / "images"
    image_dir = Path(image_dir)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise IoError(path, str(exc)) from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MissingColumn("id") from None
        header = [h.strip() for h in header]
        for col in MANIFEST_COLUMNS:
            if col not in header:
                raise MissingColumn(col)
        col_idx = {c: header.index(c) for c in MANIFEST_COLUMNS}
        entries: list[ManifestEntry] = []
        seen: set[str] = set()
        for row in reader:
            line_no = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            try:
                id_ = row[col_idx["id"]].strip()
                age = float(row[col_idx["boneage"]])
                male = _parse_bool(row[col_idx["male"]].strip())
            except (IndexError, ValueError) as exc:
                raise UnparsableRow(line_no, str(exc)) from None
            if not id_:
                raise UnparsableRow(line_no, "empty id")
            if not math.isfinite(age) or age < 0 or age > MAX_AGE_MONTHS:
                raise UnparsableRow(line_no, f"bone age {age} out of range")
            if id_ in seen:
                raise DuplicateId(id_)
            seen.add(id_)
            entries.append(
                ManifestEntry(id_, image_dir / f"{id_}.png", age, Sex.MALE if male else Sex.FEMALE)
            )
    return DatasetManifest(tuple(entries), split)


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_COLUMNS)
        for e in manifest.entries:
            if e.bone_age_months is None:
                raise MissingLabel(e.id)
            age = e.bone_age_months
            w.writerow([e.id, repr(float(age)) if age != int(age) else int(age), str(e.sex is Sex.MALE)])
    return path


def filter_age_range(manifest: DatasetManifest, age_range: AgeRangeMonths) -> DatasetManifest:
    ages = manifest.labeled_ages()
    kept = tuple(e for e, a in zip(manifest.entries, ages) if age_range.contains(a))
    return DatasetManifest(kept, manifest.split)


@dataclass(frozen=True)
class HistogramBin:
    bin_index: int
    counts: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def age_bin(months: float, bin_months: int) -> int:
    return int(math.floor(months / bin_months))


def age_histogram(manifest: DatasetManifest | Iterable[ManifestEntry], bin_months: int) -> list[HistogramBin]:
    """Count entries per ``floor(age / bin_months)`` bin, split by sex."""
    if bin_months <= 0:
        raise ValueError("bin_months must be positive")
    bins: dict[int, dict[Sex, int]] = {}
    for e in manifest:
        if e.bone_age_months is None:
            raise MissingLabel(e.id)
        counts = bins.setdefault(age_bin(e.bone_age_months, bin_months), {Sex.MALE: 0, Sex.FEMALE: 0})
        counts[e.sex] += 1
    return [HistogramBin(b, bins[b]) for b in sorted(bins)]


# --- image I/O ---------------------------------------------------------------


def read_grayscale(path: str | os.PathLike) -> np.ndarray:
    """Load an 8- or 16-bit image as float32 in [0, 1] (divided by the format max)."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise IoError(path, "unreadable image")
    if img.ndim == 3:
        if img.shape[2] == 4:
            img = cv2.cvtColor(img, cv2.COLOR_BGRA2GRAY)
        else:
            img = cv2.cvtColor(img, cv2.COLOR_BGR2GRAY)
    if img.dtype == np.uint8:
        return img.astype(np.float32) / 255.0
    if img.dtype == np.uint16:
        return img.astype(np.float32) / 65535.0
    raise IoError(path, f"unsupported pixel type {img.dtype}")


def decode_grayscale(data: bytes) -> np.ndarray:
    buf = np.frombuffer(data, dtype=np.uint8)
    img = cv2.imdecode(buf, cv2.IMREAD_UNCHANGED)
    if img is None:
        raise ValueError("cannot decode image bytes")
    if img.ndim == 3:
        img = cv2.cvtColor(img, cv2.COLOR_BGRA2GRAY if img.shape[2] == 4 else cv2.COLOR_BGR2GRAY)
    if img.dtype == np.uint8:
        return img.astype(np.float32) / 255.0
    if img.dtype == np.uint16:
        return img.astype(np.float32) / 65535.0
    raise ValueError(f"unsupported pixel type {img.dtype}")


def write_grayscale(path: str | os.PathLike, pixels: np.ndarray, bits: int = 16) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if bits == 16:
        data = np.round(np.clip(pixels, 0, 1) * 65535.0).astype(np.uint16)
    elif bits == 8:
        data = np.round(np.clip(pixels, 0, 1) * 255.0).astype(np.uint8)
    else:
        raise ValueError("bits must be 8 or 16")
    if not cv2.imwrite(str(path), data):
        raise IoError(path, "cv2.imwrite failed")
    return path


def encode_png(pixels: np.ndarray, bits: int = 8) -> bytes:
    scale, dtype = (255.0, np.uint8) if bits == 8 else (65535.0, np.uint16)
    ok, buf = cv2.imencode(".png", np.round(np.clip(pixels, 0, 1) * scale).astype(dtype))
    if not ok:
        raise ValueError("PNG encoding failed")
    return buf.tobytes()


def load_radiograph(entry: ManifestEntry) -> Radiograph:
    return Radiograph(entry.id, read_grayscale(entry.image_path), entry.sex, entry.bone_age_months)


# --- region boxes --------------------------------------------------------------


@dataclass(frozen=True)
class RegionBox:
    """A square box in normalized image coordinates.

    ``cx = x / W`` and ``cy = y / H``; ``side`` is the pixel side divided by
    ``min(H, W)`` so the box stays square in pixel space on any canvas.
    """

    region: Region
    cx: float
    cy: float
    side: float

    def __post_init__(self):
        if not self.side > 0:
            raise ValueError(f"{self.region}: side must be positive")

    def to_pixels(self, shape: tuple[int, int]) -> tuple[float, float, float]:
        h, w = shape
        return self.cx * w, self.cy * h, self.side * min(h, w)

    @classmethod
    def from_pixels(cls, region: Region, x: float, y: float, side_px: float, shape: tuple[int, int]) -> "RegionBox":
        h, w = shape
        return cls(region, x / w, y / h, side_px / min(h, w))

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.cx, self.cy, self.side)


@dataclass(frozen=True)
class RegionBoxSet:
    boxes: tuple[RegionBox, ...]

    def __post_init__(self):
        regions = [b.region for b in self.boxes]
        if sorted(r.index for r in regions) != list(range(len(REGIONS))):
            raise ValueError(f"box set must hold each region exactly once, got {regions}")
        ordered = tuple(sorted(self.boxes, key=lambda b: b.region.index))
        object.__setattr__(self, "boxes", ordered)

    def __getitem__(self, region: Region) -> RegionBox:
        return self.boxes[region.index]

    def __iter__(self):
        return iter(self.boxes)

    def __len__(self) -> int:
        return len(self.boxes)

    @classmethod
    def from_mapping(cls, mapping: dict) -> "RegionBoxSet":
        return cls(tuple(mapping.values()))

    def to_pixels(self, shape) -> dict:
        return {b.region: b.to_pixels(shape) for b in self.boxes}

    def to_json(self) -> dict:
        return {b.region.value: [b.cx, b.cy, b.side] for b in self.boxes}

    @classmethod
    def from_json(cls, data: dict) -> "RegionBoxSet":
        return cls(tuple(RegionBox(Region(k), *map(float, v)) for k, v in data.items()))
