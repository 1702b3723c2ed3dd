"""Bone-age regressors.

:class:`EnsembleNet` is the final five-branch model: each region crop goes
through its own inverted-residual backbone, the pooled features get the sex
scalar appended, and a small head turns them into months. The reported age is
the plain mean of the five branch outputs.

:class:`BaselineNet` is the earlier single-trunk design: one shared backbone
with pyramid fusion applied to every region, one auxiliary output per input,
and a fused head over all of them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field
from torch import nn

from .artifact import (
    ModelArtifact,
    Stage,
    finite_or_raise,
    make_artifact,
    materialize,
    minibatches,
    seed_torch,
)
from .augment import (
    AugmentPolicy,
    augment_crop,
    balance_plan_from_ages,
    center_crop,
    epoch_subsample,
    expand_indices,
    random_crop,
    sample_rng,
)
from .core import REGIONS, Region, Sex
from .crop import RegionCropSet
from .errors import DegenerateDataset, MissingRegion
from .imaging import resize
from .nets import DESK_STAGES, PYRAMID_STAGES, BiFPN, MobileBackbone, set_trainable

log = logging.getLogger(__name__)

ENSEMBLE_ARCH = "five-branch-mobile-v1"
BASELINE_ARCH = "shared-trunk-bifpn-v1"

CropInput = Union[RegionCropSet, Mapping[Region, np.ndarray]]
Sample = tuple  # (crops, sex, age_months)


class EnsembleConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    input_side: int = Field(128, ge=32)
    width_mult: float = Field(0.35, gt=0)
    head_width: int = Field(64, ge=1)
    branch_loss_weight: float = Field(0.2, ge=0.0)
    mean_loss_weight: float = Field(1.0, ge=0.0)
    lr: float = Field(1e-4, gt=0)
    freeze_epochs: int = Field(2, ge=0)
    finetune_epochs: int = Field(10, ge=0)
    batch_size: int = Field(16, ge=1)
    # outputs are predicted as age_center + age_scale * z
    age_center: float = 114.0
    age_scale: float = Field(60.0, gt=0)
    subsample_fraction: float = Field(1.0, gt=0.0, le=1.0)
    balance_cap: int = Field(10, ge=1)
    augment: Optional[AugmentPolicy] = AugmentPolicy()
    seed: int = 0

    @property
    def total_epochs(self) -> int:
        return self.freeze_epochs + self.finetune_epochs


@dataclass(frozen=True)
class Prediction:
    per_region: dict
    mean_months: float
    ensemble_members: Optional[list] = None

    def to_json(self) -> dict:
        out = {
            "mean_months": self.mean_months,
            "per_region": {r.value: self.per_region[r] for r in REGIONS},
        }
        if self.ensemble_members is not None:
            out["ensemble_members"] = list(self.ensemble_members)
        return out


def _mean(values) -> float:
    return float(np.mean(np.asarray(values, np.float64)))


# --- networks ------------------------------------------------------------------------------


class Branch(nn.Module):
    def __init__(self, width_mult: float, head_width: int, stages=DESK_STAGES):
        super().__init__()
        self.backbone = MobileBackbone(1, width_mult, stages)
        self.head = nn.Sequential(
            nn.Linear(self.backbone.out_channels + 1, head_width), nn.ReLU(), nn.Linear(head_width, 1)
        )

    def from_features(self, feat: torch.Tensor, sex: torch.Tensor) -> torch.Tensor:
        pooled = F.adaptive_avg_pool2d(feat, 1).flatten(1)
        return self.head(torch.cat([pooled, sex[:, None]], dim=1))[:, 0]

    def forward(self, x: torch.Tensor, sex: torch.Tensor) -> torch.Tensor:
        return self.from_features(self.backbone(x), sex)


class EnsembleNet(nn.Module):
    def __init__(self, config: EnsembleConfig):
        super().__init__()
        self.branches = nn.ModuleList(Branch(config.width_mult, config.head_width) for _ in REGIONS)
        self.register_buffer("age_center", torch.tensor(float(config.age_center)))
        self.register_buffer("age_scale", torch.tensor(float(config.age_scale)))

    def forward(self, x: torch.Tensor, sex: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """x: (N, 5, S, S), sex: (N,) -> (per-region months (N, 5), mean months (N,))."""
        z = torch.stack([b(x[:, i : i + 1], sex) for i, b in enumerate(self.branches)], dim=1)
        per_region = self.age_center + self.age_scale * z
        return per_region, per_region.mean(dim=1)

    def backbones(self) -> list[nn.Module]:
        return [b.backbone for b in self.branches]


def build_ensemble(config: dict) -> EnsembleNet:
    return EnsembleNet(EnsembleConfig(**config))


def ensemble_loss(per_region, mean, ages, config: EnsembleConfig) -> torch.Tensor:
    """mean_w * MSE(mean) + branch_w * sum over regions of MSE(branch), in months squared."""
    loss = config.mean_loss_weight * F.mse_loss(mean, ages)
    if config.branch_loss_weight:
        branch = sum(F.mse_loss(per_region[:, i], ages) for i in range(per_region.shape[1]))
        loss = loss + config.branch_loss_weight * branch
    return loss


# --- inputs --------------------------------------------------------------------------------


def _crop_array(crops: CropInput, region: Region) -> np.ndarray:
    table = crops.crops if isinstance(crops, RegionCropSet) else crops
    if region not in table:
        raise MissingRegion(region.value)
    return np.asarray(table[region], np.float32)


def fit_side(img: np.ndarray, side: int) -> np.ndarray:
    """Centre-crop when the crop carries a margin, otherwise resize."""
    if img.shape == (side, side):
        return img
    if img.shape[0] > side and img.shape[1] > side and img.shape[0] <= round(side * 1.25):
        return center_crop(img, side)
    return resize(img, (side, side))


def stack_inputs(crops: CropInput, side: int) -> np.ndarray:
    return np.stack([fit_side(_crop_array(crops, r), side) for r in REGIONS])


def _sex_value(sex) -> float:
    return Sex.parse(sex).as_scalar


# --- inference -------------------------------------------------------------------------------


def predict_batch(model: ModelArtifact, items: Sequence[tuple[CropInput, Sex]]) -> list[Prediction]:
    model.require(Stage.REGRESS)
    cfg = EnsembleConfig(**model.config_snapshot)
    net = materialize(model, build_ensemble)
    if not items:
        return []
    x = torch.from_numpy(np.stack([stack_inputs(c, cfg.input_side) for c, _ in items]))
    sex = torch.tensor([_sex_value(s) for _, s in items], dtype=torch.float32)
    with torch.no_grad():
        per_region, _ = net(x, sex)
    out = []
    for row in per_region.double().numpy():
        values = {r: float(v) for r, v in zip(REGIONS, row)}
        out.append(Prediction(values, _mean(row)))
    return out


def forward(model: ModelArtifact, crops: CropInput, sex: Sex) -> Prediction:
    return predict_batch(model, [(crops, sex)])[0]


def combine_members(member_predictions: Sequence[Prediction]) -> Prediction:
    """Stacked prediction: average the members' region outputs and their means."""
    per_region = {r: _mean([p.per_region[r] for p in member_predictions]) for r in REGIONS}
    members = [p.mean_months for p in member_predictions]
    return Prediction(per_region, _mean(members), members)


def predict_stacked(models: Sequence[ModelArtifact], crops: CropInput, sex: Sex) -> Prediction:
    return combine_members([forward(m, crops, sex) for m in models])


def predict_stacked_batch(models: Sequence[ModelArtifact], items) -> list[Prediction]:
    per_member = [predict_batch(m, items) for m in models]
    return [combine_members(list(group)) for group in zip(*per_member)]


# --- training --------------------------------------------------------------------------------


def _training_view(img: np.ndarray, side: int, rng: np.random.Generator) -> np.ndarray:
    if img.shape[0] > side and img.shape[1] > side:
        return random_crop(img, side, rng)
    return fit_side(img, side)


def _make_batch(dataset, idx, config: EnsembleConfig, epoch: int, repeat_of: dict):
    side = config.input_side
    xs, sexes, ages = [], [], []
    for k in idx:
        crops, sex, age = dataset[k]
        rng = sample_rng(config.seed, k, epoch, repeat_of.get(k, 0))
        repeat_of[k] = repeat_of.get(k, 0) + 1
        planes = []
        for region in REGIONS:
            img = _crop_array(crops, region)
            if config.augment is not None:
                img = augment_crop(img, config.augment, rng)
            planes.append(_training_view(img, side, rng))
        xs.append(np.stack(planes))
        sexes.append(_sex_value(sex))
        ages.append(float(age))
    return (
        torch.from_numpy(np.stack(xs)),
        torch.tensor(sexes, dtype=torch.float32),
        torch.tensor(ages, dtype=torch.float32),
    )


def _set_phase(net: EnsembleNet, frozen: bool) -> None:
    net.train()
    for bb in net.backbones():
        set_trainable(bb, not frozen)
        if frozen:
            bb.eval()


def train_ensemble(dataset: Sequence[Sample], config: EnsembleConfig) -> ModelArtifact:
    """Heads first with frozen backbones, then everything."""
    if len(dataset) < 2:
        raise DegenerateDataset("ensemble needs at least 2 samples")
    if config.total_epochs < 1:
        raise ValueError("at least one epoch is required")
    seed_torch(config.seed)
    net = EnsembleNet(config)
    ages = [float(a) for _, _, a in dataset]
    plan = balance_plan_from_ages(ages, 12, config.balance_cap)
    pool = np.asarray(expand_indices(ages, plan))
    opt = None
    losses: list[float] = []
    for epoch in range(config.total_epochs):
        frozen = epoch < config.freeze_epochs
        if epoch == 0 or epoch == config.freeze_epochs:
            _set_phase(net, frozen)
            opt = torch.optim.Adam([p for p in net.parameters() if p.requires_grad], lr=config.lr)
        picked = pool[epoch_subsample(len(pool), config.subsample_fraction, epoch, config.seed)]
        order = picked[np.random.default_rng([config.seed, epoch, 0x0DE]).permutation(len(picked))]
        repeat_of: dict = {}
        total, count = 0.0, 0
        for idx in minibatches(order, config.batch_size):
            if len(idx) < 2 and not frozen:
                # a singleton batch carries no batch statistics
                continue
            x, sex, y = _make_batch(dataset, idx, config, epoch, repeat_of)
            per_region, mean = net(x, sex)
            loss = ensemble_loss(per_region, mean, y, config)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        losses.append(finite_or_raise(total / max(count, 1), "ensemble loss"))
        log.info("regress epoch %d (%s) loss %.3f", epoch + 1, "frozen" if frozen else "full", losses[-1])
    net.eval()
    metrics = {
        "epoch_losses": losses,
        "n_train": len(dataset),
        "balance_factors": {str(k): v for k, v in plan.factors.items()},
    }
    return make_artifact(Stage.REGRESS, ENSEMBLE_ARCH, net, config.model_dump(mode="json"), metrics)


def train_stacked(dataset: Sequence[Sample], config: EnsembleConfig, members: int = 3) -> list[ModelArtifact]:
    """Independently trained members with seeds seed, seed+1, ..."""
    if members < 2:
        raise ValueError("a stack needs at least 2 members")
    return [
        train_ensemble(dataset, config.model_copy(update={"seed": config.seed + k})) for k in range(members)
    ]


# --- baseline --------------------------------------------------------------------------------


class BaselineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    input_side: int = Field(224, ge=64)
    width_mult: float = Field(0.35, gt=0)
    bifpn_channels: int = Field(32, ge=4)
    bifpn_layers: int = Field(2, ge=1)
    aux_loss_weight: float = Field(0.2, ge=0.0)
    lr: float = Field(1e-4, gt=0)
    epochs: int = Field(10, ge=1)
    batch_size: int = Field(8, ge=1)
    age_center: float = 114.0
    age_scale: float = Field(60.0, gt=0)
    seed: int = 0


class BaselineNet(nn.Module):
    """Shared trunk applied to each region, with an auxiliary output per input."""

    levels = 3

    def __init__(self, config: BaselineConfig):
        super().__init__()
        self.trunk = MobileBackbone(1, config.width_mult, PYRAMID_STAGES, head_channels=None)
        self.fpn = BiFPN(self.trunk.stage_channels[-self.levels :], config.bifpn_channels, config.bifpn_layers)
        feat = self.levels * config.bifpn_channels
        self.aux = nn.ModuleList(nn.Linear(feat + 1, 1) for _ in REGIONS)
        self.fused = nn.Sequential(nn.Linear(len(REGIONS) * feat + 1, 64), nn.ReLU(), nn.Linear(64, 1))
        self.register_buffer("age_center", torch.tensor(float(config.age_center)))
        self.register_buffer("age_scale", torch.tensor(float(config.age_scale)))

    def forward(self, x: torch.Tensor, sex: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        n, k = x.shape[:2]
        feats = self.trunk.forward_features(x.reshape(n * k, 1, *x.shape[2:]))
        levels = [feats[f"stage{i}"] for i in range(len(self.trunk.stages))][-self.levels :]
        pooled = torch.cat([F.adaptive_avg_pool2d(f, 1).flatten(1) for f in self.fpn(levels)], dim=1)
        pooled = pooled.reshape(n, k, -1)
        s = sex[:, None]
        aux = torch.stack([head(torch.cat([pooled[:, i], s], 1))[:, 0] for i, head in enumerate(self.aux)], 1)
        main = self.fused(torch.cat([pooled.flatten(1), s], 1))[:, 0]
        return self.age_center + self.age_scale * aux, self.age_center + self.age_scale * main


def build_baseline(config: dict) -> BaselineNet:
    return BaselineNet(BaselineConfig(**config))


def train_baseline(dataset: Sequence[Sample], config: BaselineConfig) -> ModelArtifact:
    if len(dataset) < 2:
        raise DegenerateDataset("baseline needs at least 2 samples")
    seed_torch(config.seed)
    net = BaselineNet(config)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    x_all = torch.from_numpy(np.stack([stack_inputs(c, config.input_side) for c, _, _ in dataset]))
    sex_all = torch.tensor([_sex_value(s) for _, s, _ in dataset], dtype=torch.float32)
    age_all = torch.tensor([float(a) for _, _, a in dataset], dtype=torch.float32)
    losses = []
    for epoch in range(config.epochs):
        net.train()
        order = np.random.default_rng([config.seed, epoch, 0xBA5]).permutation(len(dataset))
        total, count = 0.0, 0
        for idx in minibatches(order, config.batch_size):
            if len(idx) < 2:
                continue
            idx_t = torch.from_numpy(idx)
            aux, main = net(x_all[idx_t], sex_all[idx_t])
            y = age_all[idx_t]
            loss = F.mse_loss(main, y) + config.aux_loss_weight * sum(
                F.mse_loss(aux[:, i], y) for i in range(aux.shape[1])
            )
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        losses.append(finite_or_raise(total / max(count, 1), "baseline loss"))
        log.info("baseline epoch %d loss %.3f", epoch + 1, losses[-1])
    return make_artifact(Stage.BASELINE, BASELINE_ARCH, net, config.model_dump(), {"epoch_losses": losses})


def predict_baseline(model: ModelArtifact, crops: CropInput, sex: Sex) -> tuple[float, dict]:
    """Fused estimate plus the per-region auxiliary outputs."""
    model.require(Stage.BASELINE)
    cfg = BaselineConfig(**model.config_snapshot)
    net = materialize(model, build_baseline)
    x = torch.from_numpy(stack_inputs(crops, cfg.input_side))[None]
    with torch.no_grad():
        aux, main = net(x, torch.tensor([_sex_value(sex)]))
    return float(main[0]), {r: float(v) for r, v in zip(REGIONS, aux[0])}
