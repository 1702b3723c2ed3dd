"""Square region crops for the regression ensemble."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .core import REGIONS, Radiograph, Region, RegionBoxSet, write_grayscale
from .errors import BoxDegenerate

DEFAULT_MARGIN = 1.15
DEFAULT_FINAL_SIDE = 128


@dataclass(frozen=True, eq=False)
class RegionCropSet:
    crops: dict
    margin: float = DEFAULT_MARGIN
    final_side: int = DEFAULT_FINAL_SIDE

    def __post_init__(self):
        if set(self.crops) != set(REGIONS):
            raise ValueError("crop set must hold all five regions")
        for region, crop in self.crops.items():
            if crop.shape != (self.final_side, self.final_side):
                raise ValueError(f"{region.value} crop has shape {crop.shape}")

    def __getitem__(self, region: Region) -> np.ndarray:
        return self.crops[region]

    def stacked(self) -> np.ndarray:
        """(5, side, side) array in canonical region order."""
        return np.stack([self.crops[r] for r in REGIONS])


def square_window(x: float, y: float, side_px: float, shape, margin: float) -> tuple[float, float, float]:
    """Expanded square (left, top, side) in continuous pixels, shifted to lie inside the image."""
    h, w = shape
    side = min(side_px * margin, float(min(h, w)))
    left = float(np.clip(x - side / 2.0, 0.0, w - side))
    top = float(np.clip(y - side / 2.0, 0.0, h - side))
    return left, top, side


def sample_window(pixels: np.ndarray, left: float, top: float, side: float, final_side: int) -> np.ndarray:
    """Bilinear resample of a continuous square window to ``final_side`` squared."""
    scale = final_side / side
    # pixel-centre convention: index i sits at continuous coordinate i + 0.5
    m = np.array([[scale, 0.0, (0.5 - left) * scale - 0.5],
                  [0.0, scale, (0.5 - top) * scale - 0.5]])
    out = cv2.warpAffine(pixels.astype(np.float32), m, (final_side, final_side),
                         flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)
    return np.clip(out, 0.0, 1.0)


def extract_crops(
    image: Radiograph,
    boxes: RegionBoxSet,
    margin: float = DEFAULT_MARGIN,
    final_side: int = DEFAULT_FINAL_SIDE,
) -> RegionCropSet:
    if margin < 1.0:
        raise ValueError("margin must be >= 1")
    if final_side < 32:
        raise ValueError("final_side must be >= 32")
    crops = {}
    for box in boxes:
        x, y, side_px = box.to_pixels(image.shape)
        left, top, side = square_window(x, y, side_px, image.shape, margin)
        if side * side < 4.0:
            raise BoxDegenerate(box.region.value)
        crops[box.region] = sample_window(image.pixels, left, top, side, final_side)
    return RegionCropSet(crops, margin, final_side)


def dump_crops(crops: RegionCropSet, out_dir, image_id: str) -> list[Path]:
    """Write ``<out_dir>/<id>/<region>.png``."""
    folder = Path(out_dir) / image_id
    folder.mkdir(parents=True, exist_ok=True)
    paths = []
    for region in REGIONS:
        path = folder / f"{region.value}.png"
        write_grayscale(path, crops[region], bits=8)
        paths.append(path)
    return paths
