"""Labeled dataset directories: images plus optional mask, orientation and box labels.

Layout (as written by ``synth generate``)::

    <root>/manifest.csv          id,boneage,male
    <root>/images/<id>.png
    <root>/masks/<id>.png        optional, nonzero = hand
    <root>/orientation.jsonl     optional, {"id", "angle_deg", "flipped"}
    <root>/boxes.jsonl           optional, {"id", "region", "cx", "cy", "side"} on the corrected image

Images are read lazily so large sets do not have to fit in memory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .core import (
    DatasetManifest,
    ManifestEntry,
    Radiograph,
    Region,
    RegionBox,
    Split,
    load_manifest,
    load_radiograph,
    read_grayscale,
)
from .errors import IoError, UnparsableRow
from .orient import Orientation, wrap_angle
from .segment import Mask


def _read_jsonl(path: Path) -> list[dict]:
    rows = []
    try:
        with open(path) as fh:
            for line_no, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise UnparsableRow(line_no, str(exc)) from None
    except OSError as exc:
        raise IoError(path, str(exc)) from exc
    return rows


def load_orientations(path) -> dict[str, Orientation]:
    return {
        str(r["id"]): Orientation(wrap_angle(float(r["angle_deg"])), bool(r["flipped"]))
        for r in _read_jsonl(Path(path))
    }


def load_box_labels(path) -> dict[str, dict[Region, RegionBox]]:
    """Per-image region boxes; incomplete sets are kept so training can report them."""
    out: dict[str, dict[Region, RegionBox]] = {}
    for r in _read_jsonl(Path(path)):
        region = Region(r["region"])
        out.setdefault(str(r["id"]), {})[region] = RegionBox(region, float(r["cx"]), float(r["cy"]), float(r["side"]))
    return out


@dataclass(frozen=True, eq=False)
class LabeledSample:
    entry: ManifestEntry
    radiograph: Radiograph
    mask: Optional[Mask]
    orientation: Optional[Orientation]
    boxes: Optional[dict]


class LabeledSet:
    def __init__(self, root, split: Split = Split.TRAIN, manifest: DatasetManifest | None = None):
        self.root = Path(root)
        self.manifest = manifest if manifest is not None else load_manifest(self.root / "manifest.csv", split)
        orient_path = self.root / "orientation.jsonl"
        boxes_path = self.root / "boxes.jsonl"
        self.orientations = load_orientations(orient_path) if orient_path.exists() else {}
        self.boxes = load_box_labels(boxes_path) if boxes_path.exists() else {}
        self.mask_dir = self.root / "masks"

    def __len__(self) -> int:
        return len(self.manifest)

    @property
    def entries(self) -> tuple[ManifestEntry, ...]:
        return self.manifest.entries

    def subset(self, indices) -> "LabeledSet":
        other = object.__new__(LabeledSet)
        other.__dict__.update(self.__dict__)
        other.manifest = DatasetManifest(tuple(self.manifest.entries[i] for i in indices), self.manifest.split)
        return other

    def mask(self, entry: ManifestEntry) -> Optional[Mask]:
        path = self.mask_dir / f"{entry.id}.png"
        return Mask(read_grayscale(path) > 0) if path.exists() else None

    def __getitem__(self, i: int) -> LabeledSample:
        entry = self.manifest.entries[i]
        return LabeledSample(
            entry,
            load_radiograph(entry),
            self.mask(entry),
            self.orientations.get(entry.id),
            self.boxes.get(entry.id),
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]
