"""Lightweight network building blocks shared by the stage models."""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

# (expansion t, channels c, repeats n, stride s), MobileNetV2 notation, scaled down
# for desk-scale CPU training.
DESK_STAGES: tuple[tuple[int, int, int, int], ...] = (
    (1, 16, 1, 2),
    (4, 24, 1, 2),
    (4, 32, 1, 2),
    (4, 64, 1, 1),
)
PYRAMID_STAGES: tuple[tuple[int, int, int, int], ...] = (
    (1, 16, 1, 2),
    (4, 24, 1, 2),
    (4, 32, 1, 2),
    (4, 64, 1, 2),
)


def make_divisible(v: float, divisor: int = 4, minimum: int = 4) -> int:
    new_v = max(minimum, int(v + divisor / 2) // divisor * divisor)
    if new_v < 0.9 * v:
        new_v += divisor
    return new_v


class ConvBNAct(nn.Sequential):
    def __init__(self, cin, cout, kernel=3, stride=1, groups=1, dilation=1, act=True):
        padding = dilation * (kernel - 1) // 2
        layers = [
            nn.Conv2d(cin, cout, kernel, stride, padding, dilation=dilation, groups=groups, bias=False),
            nn.BatchNorm2d(cout),
        ]
        if act:
            layers.append(nn.ReLU6(inplace=False))
        super().__init__(*layers)


class InvertedResidual(nn.Module):
    """Expand (1x1) -> depthwise (3x3) -> linear project (1x1)."""

    def __init__(self, cin: int, cout: int, stride: int, expand: int):
        super().__init__()
        hidden = cin * expand
        layers: list[nn.Module] = []
        if expand != 1:
            layers.append(ConvBNAct(cin, hidden, 1))
        layers += [
            ConvBNAct(hidden, hidden, 3, stride, groups=hidden),
            ConvBNAct(hidden, cout, 1, act=False),
        ]
        self.block = nn.Sequential(*layers)
        self.use_residual = stride == 1 and cin == cout

    def forward(self, x):
        out = self.block(x)
        return x + out if self.use_residual else out


class MobileBackbone(nn.Module):
    """Width-scaled inverted-residual backbone.

    ``forward_features`` returns every stage output keyed by layer id
    (``stem``, ``stage0`` ... ``stageN``, ``head``) so callers can tap any
    level without registering hooks.
    """

    def __init__(
        self,
        in_channels: int = 1,
        width_mult: float = 0.35,
        stages: Sequence[Sequence[int]] = DESK_STAGES,
        stem_channels: int = 32,
        head_channels: int | None = 128,
    ):
        super().__init__()
        c = make_divisible(stem_channels * width_mult)
        self.stem = ConvBNAct(in_channels, c, 3, 2)
        self.stages = nn.ModuleList()
        self.stage_channels: list[int] = []
        for t, ch, n, s in stages:
            cout = make_divisible(ch * width_mult)
            blocks = []
            for i in range(n):
                blocks.append(InvertedResidual(c, cout, s if i == 0 else 1, t))
                c = cout
            self.stages.append(nn.Sequential(*blocks))
            self.stage_channels.append(cout)
        if head_channels:
            hc = make_divisible(max(head_channels * width_mult, c))
            self.head = ConvBNAct(c, hc, 1)
            self.out_channels = hc
        else:
            self.head = None
            self.out_channels = c

    @property
    def layer_ids(self) -> list[str]:
        ids = ["stem"] + [f"stage{i}" for i in range(len(self.stages))]
        return ids + (["head"] if self.head is not None else [])

    def forward_features(self, x) -> dict[str, torch.Tensor]:
        feats = {}
        x = self.stem(x)
        feats["stem"] = x
        for i, stage in enumerate(self.stages):
            x = stage(x)
            feats[f"stage{i}"] = x
        if self.head is not None:
            x = self.head(x)
            feats["head"] = x
        return feats

    def forward(self, x):
        return self.forward_features(x)[self.layer_ids[-1]]


def add_coord_channels(x: torch.Tensor) -> torch.Tensor:
    """Append normalized x/y coordinate planes in [-1, 1]."""
    n, _, h, w = x.shape
    ys = torch.linspace(-1.0, 1.0, h, dtype=x.dtype, device=x.device).view(1, 1, h, 1).expand(n, 1, h, w)
    xs = torch.linspace(-1.0, 1.0, w, dtype=x.dtype, device=x.device).view(1, 1, 1, w).expand(n, 1, h, w)
    return torch.cat([x, xs, ys], dim=1)


class SeparableConv(nn.Sequential):
    def __init__(self, channels: int):
        super().__init__(
            nn.Conv2d(channels, channels, 3, 1, 1, groups=channels, bias=False),
            nn.Conv2d(channels, channels, 1, bias=False),
            nn.BatchNorm2d(channels),
            nn.SiLU(),
        )


class FastFusion(nn.Module):
    """Weighted sum with non-negative weights normalized by their sum plus eps."""

    def __init__(self, n_inputs: int, eps: float = 1e-4):
        super().__init__()
        self.weights = nn.Parameter(torch.ones(n_inputs))
        self.eps = eps

    def normalized(self) -> torch.Tensor:
        w = F.relu(self.weights)
        return w / (w.sum() + self.eps)

    def forward(self, inputs: Sequence[torch.Tensor]) -> torch.Tensor:
        w = self.normalized()
        return sum(w[i] * x for i, x in enumerate(inputs))


def _resize_to(x: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    if x.shape[-2:] == ref.shape[-2:]:
        return x
    if x.shape[-1] > ref.shape[-1]:
        return F.adaptive_max_pool2d(x, ref.shape[-2:])
    return F.interpolate(x, size=ref.shape[-2:], mode="nearest")


class BiFPNLayer(nn.Module):
    """One bidirectional pyramid fusion layer over L levels (finest first)."""

    def __init__(self, channels: int, levels: int):
        super().__init__()
        if levels < 2:
            raise ValueError("BiFPN needs at least two levels")
        self.levels = levels
        self.td_fuse = nn.ModuleList([FastFusion(2) for _ in range(levels - 1)])
        self.td_conv = nn.ModuleList([SeparableConv(channels) for _ in range(levels - 1)])
        self.bu_fuse = nn.ModuleList([FastFusion(3 if i < levels - 1 else 2) for i in range(1, levels)])
        self.bu_conv = nn.ModuleList([SeparableConv(channels) for _ in range(levels - 1)])

    def forward(self, feats: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        if len(feats) != self.levels:
            raise ValueError(f"expected {self.levels} levels, got {len(feats)}")
        # top-down: coarsest to finest
        td = [None] * self.levels
        td[-1] = feats[-1]
        for i in range(self.levels - 2, -1, -1):
            j = self.levels - 2 - i
            td[i] = self.td_conv[j](self.td_fuse[j]([feats[i], _resize_to(td[i + 1], feats[i])]))
        # bottom-up: finest to coarsest
        out = [None] * self.levels
        out[0] = td[0]
        for i in range(1, self.levels):
            down = _resize_to(out[i - 1], feats[i])
            if i < self.levels - 1:
                fused = self.bu_fuse[i - 1]([feats[i], td[i], down])
            else:
                fused = self.bu_fuse[i - 1]([feats[i], down])
            out[i] = self.bu_conv[i - 1](fused)
        return out


class BiFPN(nn.Module):
    def __init__(self, in_channels: Sequence[int], channels: int, layers: int):
        super().__init__()
        if layers < 1:
            raise ValueError("bifpn_layers must be >= 1")
        self.lateral = nn.ModuleList([nn.Conv2d(c, channels, 1) for c in in_channels])
        self.layers = nn.ModuleList([BiFPNLayer(channels, len(in_channels)) for _ in range(layers)])

    def forward(self, feats: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        x = [lat(f) for lat, f in zip(self.lateral, feats)]
        for layer in self.layers:
            x = layer(x)
        return x


def set_trainable(module: nn.Module, trainable: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(trainable)
