"""Anchor-free five-region detector: pyramid backbone, BiFPN fusion, one square box per region."""

from __future__ import annotations

import logging
from typing import Mapping, Sequence, Union

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
from .core import REGIONS, Radiograph, Region, RegionBox, RegionBoxSet
from .errors import DegenerateDataset, IncompleteTruth
from .imaging import Letterbox, letterbox
from .nets import PYRAMID_STAGES, BiFPN, MobileBackbone, add_coord_channels

log = logging.getLogger(__name__)

ARCHITECTURE_ID = "bifpn-direct-box-v1"
N_OUTPUTS = 3 * len(REGIONS)
PYRAMID_LEVELS = 3
HEAD_GRID = 4

__all__ = [
    "DetectModelConfig", "DetectorNet", "RegionBox", "RegionBoxSet", "box_loss", "iou",
    "complete_boxes", "predict_boxes", "predict_boxes_batch", "train_detector",
]


class DetectModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    input_side: int = Field(256, ge=64)
    width_mult: float = Field(0.5, gt=0)
    bifpn_layers: int = Field(3, ge=1)
    bifpn_channels: int = Field(32, ge=4)
    lr: float = Field(1e-4, gt=0)
    epochs: int = Field(15, ge=1)
    batch_size: int = Field(16, ge=1)
    augment: bool = True
    seed: int = 0


class DetectorNet(nn.Module):
    def __init__(self, width_mult: float = 0.5, bifpn_channels: int = 32, bifpn_layers: int = 3):
        super().__init__()
        self.backbone = MobileBackbone(3, width_mult, PYRAMID_STAGES, head_channels=None)
        in_ch = self.backbone.stage_channels[-PYRAMID_LEVELS:]
        self.bifpn = BiFPN(in_ch, bifpn_channels, bifpn_layers)
        self.pool = nn.AdaptiveAvgPool2d(HEAD_GRID)
        self.head = nn.Sequential(
            nn.Flatten(),
            nn.Linear(PYRAMID_LEVELS * bifpn_channels * HEAD_GRID**2, 128),
            nn.ReLU(),
            nn.Linear(128, N_OUTPUTS),
        )

    def raw(self, x: torch.Tensor) -> torch.Tensor:
        feats = self.backbone.forward_features(add_coord_channels(x))
        levels = [feats[f"stage{i}"] for i in range(len(self.backbone.stages))][-PYRAMID_LEVELS:]
        fused = self.bifpn(levels)
        return self.head(torch.cat([self.pool(f) for f in fused], dim=1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.raw(x))


def build_network(config: dict) -> DetectorNet:
    cfg = DetectModelConfig(**config)
    return DetectorNet(cfg.width_mult, cfg.bifpn_channels, cfg.bifpn_layers)


def box_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean L1 over the 15 normalized box parameters."""
    return F.l1_loss(pred, target)


def iou(a: RegionBox, b: RegionBox, shape=None) -> float:
    """Overlap of two square boxes, measured in pixels when ``shape`` is given."""
    if shape is None:
        (ax, ay, asd), (bx, by, bsd) = a.as_tuple(), b.as_tuple()
    else:
        (ax, ay, asd), (bx, by, bsd) = a.to_pixels(shape), b.to_pixels(shape)
    ix = max(0.0, min(ax + asd / 2, bx + bsd / 2) - max(ax - asd / 2, bx - bsd / 2))
    iy = max(0.0, min(ay + asd / 2, by + bsd / 2) - max(ay - asd / 2, by - bsd / 2))
    inter = ix * iy
    union = asd * asd + bsd * bsd - inter
    return float(inter / union) if union > 0 else 0.0


# --- coordinate frames ----------------------------------------------------------------


def encode_boxes(boxes: RegionBoxSet, shape) -> np.ndarray:
    """Image-frame boxes -> 15 targets in the letterboxed square frame."""
    lb = Letterbox.of(shape)
    out = []
    for b in boxes:
        x, y, side = b.to_pixels(shape)
        u, v = lb.to_square_norm(x, y)
        out += [u, v, side / lb.side]
    return np.asarray(out, np.float32)


def decode_boxes(values: np.ndarray, shape) -> RegionBoxSet:
    lb = Letterbox.of(shape)
    h, w = shape
    boxes = []
    for region, (u, v, s) in zip(REGIONS, np.asarray(values, np.float64).reshape(len(REGIONS), 3)):
        x, y = lb.from_square_norm(u, v)
        side_px = min(max(s * lb.side, 1e-6), min(h, w))
        boxes.append(RegionBox.from_pixels(region, x, y, side_px, shape))
    return RegionBoxSet(tuple(boxes))


BoxTruth = Union[RegionBoxSet, Mapping[Region, RegionBox]]


def complete_boxes(image_id: str, truth: BoxTruth) -> RegionBoxSet:
    if isinstance(truth, RegionBoxSet):
        return truth
    for region in REGIONS:
        if region not in truth:
            raise IncompleteTruth(image_id, region.value)
    return RegionBoxSet(tuple(truth[r] for r in REGIONS))


def _rotate_sample(img: np.ndarray, target: np.ndarray, angle_ccw: float) -> tuple[np.ndarray, np.ndarray]:
    """Rotate a square input and its box centres together (sides unchanged)."""
    side = img.shape[0]
    c = (side - 1) / 2.0
    m = cv2.getRotationMatrix2D((c, c), angle_ccw, 1.0)
    out = cv2.warpAffine(img, m, (side, side), flags=cv2.INTER_LINEAR, borderValue=0)
    t = target.reshape(-1, 3).copy()
    # centres are continuous coordinates; pixel index = continuous - 0.5
    px = t[:, :2] * side - 0.5
    moved = px @ m[:, :2].T + m[:, 2]
    t[:, :2] = np.clip((moved + 0.5) / side, 0.0, 1.0)
    return out, t.reshape(-1)


# --- training & inference --------------------------------------------------------------


def train_detector(data: Sequence[tuple[Radiograph, BoxTruth]], config: DetectModelConfig) -> ModelArtifact:
    if len(data) < 2:
        raise DegenerateDataset("detector needs at least 2 samples")
    truths = [complete_boxes(img.id, t) for img, t in data]
    seed_torch(config.seed)
    net = build_network(config.model_dump())
    xs = np.stack([letterbox(img.pixels, config.input_side)[0] for img, _ in data])
    ys = np.stack([encode_boxes(t, img.shape) for (img, _), t in zip(data, truths)])
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    losses = []
    for epoch in range(config.epochs):
        net.train()
        rng = np.random.default_rng([config.seed, epoch, 0xDE7])
        total, count = 0.0, 0
        for idx in minibatches(epoch_order(len(xs), config.seed, epoch), config.batch_size):
            if config.augment:
                pairs = [_rotate_sample(xs[i], ys[i], rng.uniform(-8.0, 8.0)) for i in idx]
                bx, by = np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])
            else:
                bx, by = xs[idx], ys[idx]
            loss = box_loss(net(torch.from_numpy(bx).unsqueeze(1)), torch.from_numpy(by))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        losses.append(finite_or_raise(total / count, "detector loss"))
        log.info("detect epoch %d loss %.4f", epoch + 1, losses[-1])
    return make_artifact(Stage.DETECT, ARCHITECTURE_ID, net, config.model_dump(),
                         {"epoch_losses": losses, "n_train": len(data)})


def predict_boxes_batch(model: ModelArtifact, images: Sequence[Radiograph]) -> list[RegionBoxSet]:
    model.require(Stage.DETECT)
    cfg = DetectModelConfig(**model.config_snapshot)
    net = materialize(model, build_network)
    xs = np.stack([letterbox(img.pixels, cfg.input_side)[0] for img in images])
    with torch.no_grad():
        out = net(torch.from_numpy(xs).unsqueeze(1)).numpy()
    return [decode_boxes(o, img.shape) for o, img in zip(out, images)]


def predict_boxes(model: ModelArtifact, image: Radiograph) -> RegionBoxSet:
    return predict_boxes_batch(model, [image])[0]
