"""Hand angle and acquisition-direction models plus the geometric correction.

Angle convention: degrees in [-180, 180), clockwise positive, 0 when the
middle finger points straight up. ``Orientation(angle, flipped)`` describes
how a canonical hand was transformed: rotated clockwise by ``angle`` and then
mirrored if ``flipped``. Correction undoes that: mirror first, then rotate by
``-angle``.

The angle network reports the *apparent* angle of whatever image it is shown
(mirroring negates it), and the flip network looks at the image after it has
been rotated upright. :func:`orientation_from_predictions` combines the two.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Literal, Sequence

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field
from torch import nn

from .artifact import (
    ModelArtifact,
    Stage,
    epoch_order,
    finite_or_raise,
    make_artifact,
    materialize,
    minibatches,
    seed_torch,
)
from .core import Radiograph
from .errors import DegenerateDataset
from .imaging import letterbox, recentre_boxes, rotated_canvas  # noqa: F401
from .nets import DESK_STAGES, MobileBackbone

log = logging.getLogger(__name__)

ARCHITECTURE_ID = "orient-mobile-v1"


def wrap_angle(deg: float) -> float:
    """Map any angle to [-180, 180)."""
    out = (float(deg) + 180.0) % 360.0 - 180.0
    return -180.0 if out >= 180.0 else out


def angular_error(a: float, b: float) -> float:
    d = abs(wrap_angle(a) - wrap_angle(b)) % 360.0
    return min(d, 360.0 - d)


@dataclass(frozen=True)
class Orientation:
    angle_deg: float = 0.0
    flipped: bool = False

    def __post_init__(self):
        if not (-180.0 <= self.angle_deg < 180.0):
            raise ValueError(f"angle {self.angle_deg} outside [-180, 180)")


def apparent_angle(orientation: Orientation) -> float:
    """Angle of the middle finger as it appears in the transformed image."""
    return wrap_angle(-orientation.angle_deg) if orientation.flipped else orientation.angle_deg


def orientation_from_predictions(apparent_deg: float, flipped: bool) -> Orientation:
    return Orientation(wrap_angle(-apparent_deg) if flipped else wrap_angle(apparent_deg), bool(flipped))


# --- geometric correction -------------------------------------------------------------


def rotate_padded(pixels: np.ndarray, angle_ccw_deg: float) -> np.ndarray:
    """Rotate counter-clockwise about the centre onto a canvas that holds the whole result."""
    h, w = pixels.shape
    nh, nw = rotated_canvas((h, w), angle_ccw_deg)
    m = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), angle_ccw_deg, 1.0)
    m[0, 2] += (nw - w) / 2.0
    m[1, 2] += (nh - h) / 2.0
    return cv2.warpAffine(
        pixels.astype(np.float32), m, (nw, nh), flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_CONSTANT, borderValue=0,
    )


def correct_orientation(image: Radiograph, orientation: Orientation) -> Radiograph:
    """Mirror if flipped, then rotate by ``-angle`` with a padded (never cropped) canvas."""
    px = image.pixels
    if orientation.flipped:
        px = px[:, ::-1]
    if orientation.angle_deg != 0.0:
        # counter-clockwise by the clockwise angle
        px = rotate_padded(px, orientation.angle_deg)
    elif not orientation.flipped:
        return image
    return image.with_pixels(np.ascontiguousarray(px))


def centre_crop(pixels: np.ndarray, shape) -> np.ndarray:
    h, w = shape
    H, W = pixels.shape
    if H < h or W < w:
        raise ValueError("crop larger than source")
    top, left = (H - h) // 2, (W - w) // 2
    return pixels[top : top + h, left : left + w]


# --- networks ---------------------------------------------------------------------------


class OrientModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    head: Literal["angle", "flip"] = "angle"
    input_side: int = Field(128, ge=32)
    width_mult: float = Field(0.5, gt=0)
    lr: float = Field(1e-4, gt=0)
    epochs: int = Field(10, ge=1)
    batch_size: int = Field(16, ge=1)
    seed: int = 0


class OrientNet(nn.Module):
    def __init__(self, width_mult: float, outputs: int):
        super().__init__()
        self.backbone = MobileBackbone(1, width_mult, DESK_STAGES)
        self.pool = nn.AdaptiveAvgPool2d(2)
        self.fc = nn.Sequential(
            nn.Flatten(), nn.Linear(self.backbone.out_channels * 4, 64), nn.ReLU(), nn.Linear(64, outputs)
        )

    def forward(self, x):
        return self.fc(self.pool(self.backbone(x)))


def build_network(config: dict) -> OrientNet:
    cfg = OrientModelConfig(**config)
    return OrientNet(cfg.width_mult, 2 if cfg.head == "angle" else 1)


def _inputs(images: Sequence[Radiograph], side: int) -> np.ndarray:
    return np.stack([letterbox(img.pixels, side)[0] for img in images])


def rotate_input(img: np.ndarray, delta_ccw_deg: float) -> np.ndarray:
    h, w = img.shape
    m = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), delta_ccw_deg, 1.0)
    return cv2.warpAffine(img, m, (w, h), flags=cv2.INTER_LINEAR, borderValue=0)


def augmented_angle_label(angle_deg: float, delta_deg: float) -> float:
    """Label after rotating the image counter-clockwise by ``delta_deg``."""
    return wrap_angle(angle_deg - delta_deg)


def _fit(net, xs, targets, config: OrientModelConfig, make_batch, loss_fn, tag: str) -> list[float]:
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    losses = []
    for epoch in range(config.epochs):
        net.train()
        rng = np.random.default_rng([config.seed, epoch, 0x0A1])
        total, count = 0.0, 0
        for idx in minibatches(epoch_order(len(xs), config.seed, epoch), config.batch_size):
            bx, by = make_batch(idx, rng)
            loss = loss_fn(net(torch.from_numpy(bx).unsqueeze(1)), torch.from_numpy(by))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        losses.append(finite_or_raise(total / count, f"{tag} loss"))
        log.info("%s epoch %d loss %.4f", tag, epoch + 1, losses[-1])
    return losses


def train_angle_model(data: Sequence[tuple[Radiograph, float]], config: OrientModelConfig) -> ModelArtifact:
    """Regress (sin, cos) of the apparent angle; every epoch re-rotates every image."""
    if len(data) < 2:
        raise DegenerateDataset("angle model needs at least 2 samples")
    config = config.model_copy(update={"head": "angle"})
    seed_torch(config.seed)
    net = build_network(config.model_dump())
    xs = _inputs([d[0] for d in data], config.input_side)
    angles = np.array([wrap_angle(d[1]) for d in data])

    def make_batch(idx, rng):
        deltas = rng.uniform(-180.0, 180.0, size=len(idx))
        bx = np.stack([rotate_input(xs[i], d) for i, d in zip(idx, deltas)])
        labels = np.radians([augmented_angle_label(angles[i], d) for i, d in zip(idx, deltas)])
        by = np.stack([np.sin(labels), np.cos(labels)], axis=1).astype(np.float32)
        return bx, by

    losses = _fit(net, xs, angles, config, make_batch, F.mse_loss, "angle")
    return make_artifact(Stage.ANGLE, ARCHITECTURE_ID, net, config.model_dump(),
                         {"epoch_losses": losses, "n_train": len(data)})


def mirrored_dataset(xs: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Double a flip dataset: every image plus its mirror with the opposite label."""
    return np.concatenate([xs, xs[:, :, ::-1]]), np.concatenate([labels, 1.0 - labels])


def train_flip_model(data: Sequence[tuple[Radiograph, bool]], config: OrientModelConfig) -> ModelArtifact:
    """Binary mirrored/not-mirrored classifier on upright, masked hands."""
    if len(data) < 2:
        raise DegenerateDataset("flip model needs at least 2 samples")
    config = config.model_copy(update={"head": "flip"})
    seed_torch(config.seed)
    net = build_network(config.model_dump())
    xs = _inputs([d[0] for d in data], config.input_side)
    labels = np.array([1.0 if d[1] else 0.0 for d in data], np.float32)
    xs, labels = mirrored_dataset(xs, labels)

    def make_batch(idx, rng):
        # residual angle error from the angle model
        deltas = rng.uniform(-12.0, 12.0, size=len(idx))
        bx = np.stack([rotate_input(xs[i], d) for i, d in zip(idx, deltas)])
        return bx, labels[idx][:, None]

    losses = _fit(net, xs, labels, config, make_batch, F.binary_cross_entropy_with_logits, "flip")
    return make_artifact(Stage.FLIP, ARCHITECTURE_ID, net, config.model_dump(),
                         {"epoch_losses": losses, "n_train": len(data), "n_effective": int(len(xs))})


# --- inference -------------------------------------------------------------------------


def angle_from_outputs(sin_out: float, cos_out: float) -> float:
    return wrap_angle(math.degrees(math.atan2(sin_out, cos_out)))


def _forward(model: ModelArtifact, images: Sequence[Radiograph]) -> np.ndarray:
    cfg = OrientModelConfig(**model.config_snapshot)
    net = materialize(model, build_network)
    with torch.no_grad():
        return net(torch.from_numpy(_inputs(images, cfg.input_side)).unsqueeze(1)).numpy()


def predict_angles(model: ModelArtifact, images: Sequence[Radiograph]) -> list[float]:
    model.require(Stage.ANGLE)
    return [angle_from_outputs(float(s), float(c)) for s, c in _forward(model, images)]


def predict_angle(model: ModelArtifact, image: Radiograph) -> float:
    return predict_angles(model, [image])[0]


def predict_flips(model: ModelArtifact, images: Sequence[Radiograph]) -> list[bool]:
    model.require(Stage.FLIP)
    return [bool(v > 0.0) for v in _forward(model, images)[:, 0]]


def predict_flip(model: ModelArtifact, image: Radiograph) -> bool:
    return predict_flips(model, [image])[0]


def upright(image: Radiograph, apparent_deg: float) -> Radiograph:
    return correct_orientation(image, Orientation(wrap_angle(apparent_deg), False))


def estimate_orientation(angle_model: ModelArtifact, flip_model: ModelArtifact, image: Radiograph) -> Orientation:
    apparent = predict_angle(angle_model, image)
    flipped = predict_flip(flip_model, upright(image, apparent))
    return orientation_from_predictions(apparent, flipped)
