"""Persistable trained-stage artifacts and shared training plumbing."""

from __future__ import annotations

import enum
import hashlib
import json
import math
import threading
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import torch
from safetensors.torch import load as st_load
from safetensors.torch import save as st_save
from torch import nn

from .errors import HashMismatch, WrongStage


class Stage(enum.Enum):
    SEGMENT = "segment"
    ANGLE = "angle"
    FLIP = "flip"
    DETECT = "detect"
    REGRESS = "regress"
    BASELINE = "baseline"


def weights_to_bytes(module: nn.Module) -> bytes:
    state = {k: v.detach().cpu().contiguous() for k, v in module.state_dict().items()}
    return st_save(state)


def bytes_to_state(blob: bytes) -> dict[str, torch.Tensor]:
    return st_load(blob)


def sha256(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class ModelArtifact:
    stage: Stage
    architecture_id: str
    weights: bytes
    config_snapshot: dict
    metrics: dict = field(default_factory=dict)
    version: int = 0
    content_hash: str = ""

    def __post_init__(self):
        digest = sha256(self.weights)
        if not self.content_hash:
            object.__setattr__(self, "content_hash", digest)
        elif self.content_hash != digest:
            raise HashMismatch(f"{self.stage.value} artifact hash does not match its weights")

    def require(self, stage: Stage) -> "ModelArtifact":
        if self.stage is not stage:
            raise WrongStage(stage.value, self.stage.value)
        return self

    def with_version(self, version: int) -> "ModelArtifact":
        return replace(self, version=version)


def make_artifact(stage: Stage, architecture_id: str, module: nn.Module, config: dict, metrics: dict) -> ModelArtifact:
    return ModelArtifact(stage, architecture_id, weights_to_bytes(module), json.loads(json.dumps(config)), metrics)


_CACHE: dict[tuple, nn.Module] = {}
_CACHE_LOCK = threading.Lock()
_CACHE_LIMIT = 32


def materialize(artifact: ModelArtifact, build: Callable[[dict], nn.Module]) -> nn.Module:
    """Rebuild (or fetch from cache) the eval-mode network for an artifact.

    Cached modules are shared between threads and must only be used for
    gradient-free inference or via ``torch.autograd.grad`` on fresh inputs.
    """
    key = (artifact.stage, artifact.architecture_id, artifact.content_hash,
           json.dumps(artifact.config_snapshot, sort_keys=True))
    with _CACHE_LOCK:
        net = _CACHE.get(key)
        if net is None:
            net = build(artifact.config_snapshot)
            net.load_state_dict(bytes_to_state(artifact.weights))
            net.eval()
            for p in net.parameters():
                p.requires_grad_(False)
            if len(_CACHE) >= _CACHE_LIMIT:
                _CACHE.pop(next(iter(_CACHE)))
            _CACHE[key] = net
    return net


# --- training helpers ---------------------------------------------------------


def seed_torch(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def minibatches(indices: np.ndarray, batch_size: int) -> list[np.ndarray]:
    n = len(indices)
    return [indices[i : i + batch_size] for i in range(0, n, batch_size)]


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0xBA7C4]).permutation(n)


def loss_decreased(losses: list[float]) -> bool:
    return bool(losses) and losses[-1] <= losses[0]


def finite_or_raise(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise FloatingPointError(f"{what} became non-finite")
    return value
