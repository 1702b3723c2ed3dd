"""Background removal: hand segmentation, mask post-processing, in-mask equalization."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, model_validator
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
from .errors import ConstantRegion, DegenerateDataset, EmptyMask, ShapeMismatch
from .imaging import resize
from .nets import ConvBNAct

log = logging.getLogger(__name__)

ARCHITECTURE_ID = "atrous-encoder-decoder-v1"
THRESHOLD = 0.5
EQ_BINS = 256


@dataclass(frozen=True, eq=False)
class Mask:
    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels).astype(bool)
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self):
        return self.pixels.shape

    @property
    def area(self) -> int:
        return int(self.pixels.sum())


class SegModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    input_side: int = 256
    encoder_depth: int = Field(4, ge=1, le=6)
    base_channels: int = Field(16, ge=2)
    loss_mix: float = Field(0.5, ge=0.0, le=1.0)
    lr: float = Field(1e-4, gt=0)
    epochs: int = Field(10, ge=1)
    batch_size: int = Field(8, ge=1)
    augment: bool = True
    seed: int = 0

    @model_validator(mode="after")
    def _side_divisible(self):
        if self.input_side % (2 ** self.encoder_depth):
            raise ValueError("input_side must be a multiple of 2**encoder_depth")
        return self


class AtrousBottleneck(nn.Module):
    def __init__(self, channels: int, dilations=(1, 2, 4)):
        super().__init__()
        self.branches = nn.ModuleList([ConvBNAct(channels, channels, 3, dilation=d) for d in dilations])
        self.pool_proj = ConvBNAct(channels, channels, 1)
        self.project = ConvBNAct(channels * (len(dilations) + 1), channels, 1)

    def forward(self, x):
        pooled = self.pool_proj(F.adaptive_avg_pool2d(x, 1)).expand_as(x)
        return self.project(torch.cat([b(x) for b in self.branches] + [pooled], dim=1))


class SegNet(nn.Module):
    def __init__(self, depth: int = 4, base: int = 16):
        super().__init__()
        chans = [min(base * 2**i, base * 8) for i in range(depth + 1)]
        self.inc = ConvBNAct(1, chans[0], 3)
        self.down = nn.ModuleList(
            nn.Sequential(ConvBNAct(chans[i], chans[i + 1], 3, stride=2), ConvBNAct(chans[i + 1], chans[i + 1], 3))
            for i in range(depth)
        )
        self.bottleneck = AtrousBottleneck(chans[-1])
        self.up = nn.ModuleList(ConvBNAct(chans[i + 1] + chans[i], chans[i], 3) for i in reversed(range(depth)))
        self.out = nn.Conv2d(chans[0], 1, 1)

    def forward(self, x):
        skips = [self.inc(x)]
        for d in self.down:
            skips.append(d(skips[-1]))
        y = self.bottleneck(skips.pop())
        for up in self.up:
            skip = skips.pop()
            y = F.interpolate(y, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            y = up(torch.cat([y, skip], dim=1))
        return self.out(y)


def build_network(config: dict) -> SegNet:
    cfg = SegModelConfig(**config)
    return SegNet(cfg.encoder_depth, cfg.base_channels)


# --- training -------------------------------------------------------------------


def segmentation_loss(logits: torch.Tensor, target: torch.Tensor, mix: float) -> torch.Tensor:
    """mix * BCE + (1 - mix) * (1 - soft Dice)."""
    bce = F.binary_cross_entropy_with_logits(logits, target)
    prob = torch.sigmoid(logits)
    dims = tuple(range(1, logits.ndim))
    inter = (prob * target).sum(dims)
    dice = (2 * inter + 1.0) / (prob.sum(dims) + target.sum(dims) + 1.0)
    return mix * bce + (1.0 - mix) * (1.0 - dice.mean())


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    denom = a.sum() + b.sum()
    return 1.0 if denom == 0 else float(2.0 * np.logical_and(a, b).sum() / denom)


def augment_pair(img: np.ndarray, mask: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Apply one random geometric transform identically to an image and its mask."""
    h, w = img.shape
    angle = rng.uniform(-180.0, 180.0)
    scale = rng.uniform(0.9, 1.1)
    m = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), angle, scale)
    m[:, 2] += rng.uniform(-0.05, 0.05, size=2) * (w, h)
    if rng.random() < 0.5:
        # compose with a horizontal mirror
        m = m @ np.array([[-1.0, 0.0, w - 1.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    img_t = cv2.warpAffine(img, m, (w, h), flags=cv2.INTER_LINEAR, borderValue=0)
    mask_t = cv2.warpAffine(mask.astype(np.float32), m, (w, h), flags=cv2.INTER_LINEAR, borderValue=0)
    return img_t, mask_t


def _prepare(pairs, side: int) -> tuple[np.ndarray, np.ndarray]:
    # targets keep fractional edge coverage; binarizing at network resolution caps Dice after upsampling
    xs = np.stack([resize(img.pixels, (side, side)) for img, _ in pairs])
    ys = np.stack([resize(m.pixels.astype(np.float32), (side, side)) for _, m in pairs])
    return xs, ys


def train_segmenter(pairs: Sequence[tuple[Radiograph, Mask]], config: SegModelConfig) -> ModelArtifact:
    if len(pairs) < 2:
        raise DegenerateDataset("segmenter needs at least 2 pairs")
    any_fg = any_bg = False
    for img, m in pairs:
        if img.shape != m.shape:
            raise ShapeMismatch(img.id, f"image {img.shape} vs mask {m.shape}")
        any_fg |= bool(m.pixels.any())
        any_bg |= bool((~m.pixels).any())
    if not (any_fg and any_bg):
        raise DegenerateDataset("masks are all background or all foreground")

    seed_torch(config.seed)
    net = SegNet(config.encoder_depth, config.base_channels)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    xs, ys = _prepare(pairs, config.input_side)
    losses: list[float] = []
    for epoch in range(config.epochs):
        net.train()
        rng = np.random.default_rng([config.seed, epoch, 0x5E6])
        order = epoch_order(len(xs), config.seed, epoch)
        total, count = 0.0, 0
        for idx in minibatches(order, config.batch_size):
            if config.augment:
                batch = [augment_pair(xs[i], ys[i], rng) for i in idx]
                bx = np.stack([b[0] for b in batch])
                by = np.stack([b[1] for b in batch])
            else:
                bx, by = xs[idx], ys[idx]
            x = torch.from_numpy(bx).unsqueeze(1)
            y = torch.from_numpy(by).unsqueeze(1)
            loss = segmentation_loss(net(x), y, config.loss_mix)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        losses.append(finite_or_raise(total / count, "segmentation loss"))
        log.info("segment epoch %d loss %.4f", epoch + 1, losses[-1])
    return make_artifact(
        Stage.SEGMENT, ARCHITECTURE_ID, net, config.model_dump(),
        {"epoch_losses": losses, "n_train": len(pairs)},
    )


# --- inference --------------------------------------------------------------------


def largest_component(binary: np.ndarray) -> np.ndarray:
    """Keep only the largest 4-connected foreground component (ties: lowest label)."""
    n, labels, stats, _ = cv2.connectedComponentsWithStats(binary.astype(np.uint8), connectivity=4)
    if n <= 1:
        return np.zeros(binary.shape, bool)
    areas = stats[1:, cv2.CC_STAT_AREA]
    return labels == (1 + int(np.argmax(areas)))


def postprocess(prob: np.ndarray) -> Mask:
    """Threshold a probability map and keep its largest component."""
    keep = largest_component(prob >= THRESHOLD)
    if not keep.any():
        raise EmptyMask("segmentation found no foreground")
    return Mask(keep)


def predict_probabilities(model: ModelArtifact, images: Sequence[Radiograph]) -> list[np.ndarray]:
    model.require(Stage.SEGMENT)
    cfg = SegModelConfig(**model.config_snapshot)
    net = materialize(model, build_network)
    out = []
    with torch.no_grad():
        for img in images:
            x = torch.from_numpy(resize(img.pixels, (cfg.input_side, cfg.input_side)))[None, None]
            logits = F.interpolate(net(x), size=img.shape, mode="bilinear", align_corners=False)
            out.append(torch.sigmoid(logits)[0, 0].numpy())
    return out


def predict_mask(model: ModelArtifact, image: Radiograph) -> Mask:
    return postprocess(predict_probabilities(model, [image])[0])


# --- mask application ----------------------------------------------------------------


def _check(image: Radiograph, mask: Mask) -> None:
    if image.shape != mask.shape:
        raise ShapeMismatch(image.id, f"image {image.shape} vs mask {mask.shape}")
    if not mask.pixels.any():
        raise EmptyMask(f"mask for {image.id!r} has no foreground")


def apply_mask(image: Radiograph, mask: Mask) -> Radiograph:
    _check(image, mask)
    return image.with_pixels(np.where(mask.pixels, image.pixels, 0.0))


def equalize_in_mask(image: Radiograph, mask: Mask) -> Radiograph:
    """Histogram-equalize the foreground only (256-bin CDF map); background becomes 0."""
    _check(image, mask)
    values = image.pixels[mask.pixels]
    if values.min() == values.max():
        raise ConstantRegion(f"in-mask intensities of {image.id!r} are constant")
    bins = np.minimum((values.astype(np.float64) * EQ_BINS).astype(np.int64), EQ_BINS - 1)
    cdf = np.cumsum(np.bincount(bins, minlength=EQ_BINS)) / values.size
    out = np.zeros(image.shape, np.float32)
    out[mask.pixels] = cdf[bins]
    return image.with_pixels(out)


def mask_and_equalize(image: Radiograph, mask: Mask) -> Radiograph:
    return equalize_in_mask(apply_mask(image, mask), mask)
