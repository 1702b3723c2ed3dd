"""Grad-CAM saliency for the ensemble branches and a zone-level attention summary."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .artifact import ModelArtifact, Stage, materialize
from .core import REGIONS, Region, Sex, encode_png
from .errors import UnknownLayer, ZonesNotPartition
from .regress import CropInput, EnsembleConfig, build_ensemble, fit_side, _crop_array, _sex_value

DEFAULT_LAYER = "head"

# zone rectangle: (x0, y0, x1, y1) as fractions of the crop side
Rect = tuple[float, float, float, float]


@dataclass(frozen=True, eq=False)
class SaliencyMap:
    values: np.ndarray
    region: Region
    target_layer: str

    def to_png(self) -> bytes:
        return encode_png(self.values, bits=8)


def gradcam_from(features: torch.Tensor, grads: torch.Tensor, out_size) -> np.ndarray:
    """Normalized Grad-CAM from (C, h, w) activations and their gradients."""
    weights = grads.mean(dim=(1, 2))
    cam = F.relu((weights[:, None, None] * features).sum(dim=0))
    cam = F.interpolate(cam[None, None], size=tuple(out_size), mode="bilinear", align_corners=False)[0, 0]
    cam = cam.clamp_min(0.0)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    return cam.detach().double().numpy()


def grad_cam(model: ModelArtifact, crops: CropInput, sex: Sex, region: Region, layer: str = DEFAULT_LAYER) -> SaliencyMap:
    """Saliency of one branch's output over its own crop.

    Uses ``torch.autograd.grad`` on a fresh input, so concurrent calls on a
    shared model do not interfere.
    """
    model.require(Stage.REGRESS)
    cfg = EnsembleConfig(**model.config_snapshot)
    net = materialize(model, build_ensemble)
    branch = net.branches[Region(region).index]
    if layer not in branch.backbone.layer_ids:
        raise UnknownLayer(layer)
    img = fit_side(_crop_array(crops, region), cfg.input_side)
    x = torch.from_numpy(np.ascontiguousarray(img))[None, None].requires_grad_(True)
    sex_t = torch.tensor([_sex_value(sex)], dtype=torch.float32)
    with torch.enable_grad():
        feats = branch.backbone.forward_features(x)
        out = branch.from_features(feats[branch.backbone.layer_ids[-1]], sex_t)
        (grads,) = torch.autograd.grad(out.sum(), feats[layer])
    values = gradcam_from(feats[layer][0].detach(), grads[0], img.shape)
    return SaliencyMap(values, region, layer)


def explain_all(model: ModelArtifact, crops: CropInput, sex: Sex, layer: str = DEFAULT_LAYER) -> dict:
    return {r: grad_cam(model, crops, sex, r, layer) for r in REGIONS}


# --- zones ------------------------------------------------------------------------------------


def zone_masks(zones: Mapping[str, Rect], side: int) -> dict[str, np.ndarray]:
    """Rasterize fractional rectangles; raises unless they tile the crop exactly once."""
    cover = np.zeros((side, side), np.int32)
    masks = {}
    for name, (x0, y0, x1, y1) in zones.items():
        m = np.zeros((side, side), bool)
        c0, c1 = int(round(x0 * side)), int(round(x1 * side))
        r0, r1 = int(round(y0 * side)), int(round(y1 * side))
        m[max(r0, 0) : r1, max(c0, 0) : c1] = True
        masks[name] = m
        cover += m
    if not np.all(cover == 1):
        raise ZonesNotPartition("zones must cover every crop pixel exactly once")
    return masks


def zone_masses(values: np.ndarray, masks: Mapping[str, np.ndarray]) -> dict[str, float] | None:
    total = float(values.sum())
    if total <= 0:
        return None
    return {name: float(values[m].sum() / total) for name, m in masks.items()}


def attention_report(
    model: ModelArtifact,
    dataset: Sequence[tuple[CropInput, Sex]],
    zones: Mapping[Region, Mapping[str, Rect]],
    layer: str = DEFAULT_LAYER,
) -> list[tuple[str, str, float]]:
    """Rows of (region, zone, mean saliency mass) over the images with a nonzero map."""
    side = EnsembleConfig(**model.config_snapshot).input_side
    rows = []
    for region, region_zones in zones.items():
        masks = zone_masks(region_zones, side)
        sums = {name: 0.0 for name in masks}
        n = 0
        for crops, sex in dataset:
            masses = zone_masses(grad_cam(model, crops, sex, region, layer).values, masks)
            if masses is None:
                continue
            n += 1
            for name, v in masses.items():
                sums[name] += v
        for name in masks:
            rows.append((Region(region).value, name, sums[name] / n if n else 0.0))
    return rows
