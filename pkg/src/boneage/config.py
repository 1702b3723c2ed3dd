"""Run configuration: one YAML document with a section per stage.

Every field has a default, unknown keys are rejected, and a top-level ``seed``
fills every section seed that the document does not set explicitly.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .augment import AugmentPolicy
from .core import CORE_RANGE, AgeRangeMonths
from .crop import DEFAULT_MARGIN
from .detect import DetectModelConfig
from .errors import InvalidSpec, IoError
from .orient import OrientModelConfig
from .regress import BaselineConfig, EnsembleConfig
from .segment import SegModelConfig
from .synth import MaturityDistribution


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class RangeConfig(_Section):
    lo: float = CORE_RANGE.lo
    hi: float = CORE_RANGE.hi

    def to_range(self) -> AgeRangeMonths:
        return AgeRangeMonths(self.lo, self.hi)


class DataConfig(_Section):
    train: Path = Path("data/train")
    val: Optional[Path] = None
    test: Optional[Path] = None
    range: RangeConfig = RangeConfig()


class SynthConfig(_Section):
    count: int = Field(2000, ge=1)
    out: Path = Path("data/train")
    distribution: MaturityDistribution = MaturityDistribution.UNIFORM
    canvas_range: tuple[int, int] = (256, 320)
    workers: int = Field(1, ge=1)
    seed: int = 0


class OrientConfig(_Section):
    angle: OrientModelConfig = OrientModelConfig(head="angle")
    flip: OrientModelConfig = OrientModelConfig(head="flip")

    @model_validator(mode="before")
    @classmethod
    def _default_heads(cls, data):
        if isinstance(data, dict):
            data = dict(data)
            for head in ("angle", "flip"):
                if isinstance(data.get(head), dict):
                    data[head] = {"head": head, **data[head]}
        return data

    @model_validator(mode="after")
    def _heads(self):
        if self.angle.head != "angle" or self.flip.head != "flip":
            raise ValueError("orient.angle must use head 'angle' and orient.flip head 'flip'")
        return self


class AugmentConfig(_Section):
    policy: AugmentPolicy = AugmentPolicy()
    enabled: bool = True
    balance_cap: int = Field(10, ge=1)
    subsample_fraction: float = Field(1.0, gt=0.0, le=1.0)
    train_margin: float = Field(DEFAULT_MARGIN, ge=1.0)


# fields of EnsembleConfig owned by the augment section
_AUGMENT_OWNED = ("augment", "balance_cap", "subsample_fraction")


class EvalConfig(_Section):
    range: RangeConfig = RangeConfig()
    out: Path = Path("reports")


class ServeConfig(_Section):
    host: str = "127.0.0.1"
    port: int = Field(8000, ge=1, le=65535)
    bundle: Path = Path("bundle")


class RunConfig(_Section):
    seed: int = 0
    registry: Optional[Path] = None
    data: DataConfig = DataConfig()
    synth: SynthConfig = SynthConfig()
    segment: SegModelConfig = SegModelConfig()
    orient: OrientConfig = OrientConfig()
    detect: DetectModelConfig = DetectModelConfig()
    augment: AugmentConfig = AugmentConfig()
    regress: EnsembleConfig = EnsembleConfig()
    baseline: BaselineConfig = BaselineConfig()
    eval: EvalConfig = EvalConfig()
    serve: ServeConfig = ServeConfig()

    @model_validator(mode="before")
    @classmethod
    def _spread_seed(cls, data):
        if not isinstance(data, dict):
            return data
        regress = data.get("regress")
        if isinstance(regress, dict):
            owned = [k for k in _AUGMENT_OWNED if k in regress]
            if owned:
                raise ValueError(f"regress.{owned[0]} belongs in the augment section")
        seed = data.get("seed")
        if seed is None:
            return data
        data = dict(data)

        def fill(section: dict | None) -> dict:
            section = dict(section or {})
            section.setdefault("seed", seed)
            return section

        for name in ("synth", "segment", "detect", "regress", "baseline"):
            data[name] = fill(data.get(name))
        orient = dict(data.get("orient") or {})
        orient["angle"] = fill(orient.get("angle"))
        orient["flip"] = fill(orient.get("flip"))
        data["orient"] = orient
        augment = dict(data.get("augment") or {})
        augment["policy"] = fill(augment.get("policy"))
        data["augment"] = augment
        return data

    def ensemble_config(self) -> EnsembleConfig:
        """The regress section with the augmentation settings merged in."""
        aug = self.augment
        return self.regress.model_copy(update={
            "augment": aug.policy if aug.enabled else None,
            "balance_cap": aug.balance_cap,
            "subsample_fraction": aug.subsample_fraction,
        })


def load_config(path=None) -> RunConfig:
    """Read a YAML run config; ``None`` gives all defaults."""
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoError(path, str(exc)) from exc
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise InvalidSpec(str(path), f"not valid YAML: {exc}") from exc
    return parse_config(data, str(path))


def parse_config(data: dict, source: str = "config") -> RunConfig:
    if not isinstance(data, dict):
        raise InvalidSpec(source, "top level must be a mapping")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        first = exc.errors()[0]
        where = ".".join(str(p) for p in first["loc"]) or source
        raise InvalidSpec(where, first["msg"]) from exc


def dump_config(config: RunConfig) -> str:
    data = config.model_dump(mode="json")
    for key in _AUGMENT_OWNED:
        data["regress"].pop(key)
    return yaml.safe_dump(data, sort_keys=False)
