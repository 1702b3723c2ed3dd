"""Resizing and canvas-geometry helpers shared by the stage models."""

from __future__ import annotations

from dataclasses import dataclass

import math

import cv2
import numpy as np

from .core import RegionBox, RegionBoxSet


@dataclass(frozen=True)
class Letterbox:
    """Geometry of a centred square padding of an H x W image."""

    height: int
    width: int
    pad_left: int
    pad_top: int

    @property
    def side(self) -> int:
        return max(self.height, self.width)

    @classmethod
    def of(cls, shape) -> "Letterbox":
        h, w = shape
        s = max(h, w)
        return cls(h, w, (s - w) // 2, (s - h) // 2)

    def to_square_norm(self, x: float, y: float) -> tuple[float, float]:
        return (x + self.pad_left) / self.side, (y + self.pad_top) / self.side

    def from_square_norm(self, u: float, v: float) -> tuple[float, float]:
        return u * self.side - self.pad_left, v * self.side - self.pad_top


def resize(img: np.ndarray, shape) -> np.ndarray:
    h, w = shape
    if img.shape == (h, w):
        return img.astype(np.float32, copy=False)
    interp = cv2.INTER_AREA if h < img.shape[0] or w < img.shape[1] else cv2.INTER_LINEAR
    return cv2.resize(img.astype(np.float32), (w, h), interpolation=interp)


def letterbox(img: np.ndarray, side: int) -> tuple[np.ndarray, Letterbox]:
    lb = Letterbox.of(img.shape)
    s = lb.side
    square = np.zeros((s, s), np.float32)
    square[lb.pad_top : lb.pad_top + lb.height, lb.pad_left : lb.pad_left + lb.width] = img
    return resize(square, (side, side)), lb


def rotated_canvas(shape, angle_deg: float) -> tuple[int, int]:
    h, w = shape
    a = math.radians(angle_deg)
    c, s = abs(math.cos(a)), abs(math.sin(a))
    new_w = int(math.ceil(w * c + h * s - 1e-6))
    new_h = int(math.ceil(w * s + h * c - 1e-6))
    return max(new_h, 1), max(new_w, 1)


def recentre_boxes(boxes: RegionBoxSet, src_shape, dst_shape) -> RegionBoxSet:
    """Re-express canonical-canvas boxes on a centred, padded canvas."""
    sh, sw = src_shape
    dh, dw = dst_shape
    out = []
    for b in boxes:
        x, y, side = b.to_pixels(src_shape)
        out.append(RegionBox.from_pixels(b.region, x + (dw - sw) / 2.0, y + (dh - sh) / 2.0, side, dst_shape))
    return RegionBoxSet(tuple(out))
