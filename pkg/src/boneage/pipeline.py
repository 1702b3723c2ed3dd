"""End-to-end inference: segment, equalize, orient, correct, detect, crop, regress.

A bundle directory is an ordinary registry root: the latest version of each
stage is used, and the latest regress version pulls in the other members of
its stack, if it belongs to one.
"""

from __future__ import annotations

import hashlib
import uuid
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .artifact import ModelArtifact, Stage
from .core import Radiograph, RegionBoxSet, Sex
from .crop import RegionCropSet, extract_crops
from .detect import predict_boxes_batch
from .errors import BoneAgeError, EmptyMask, NotFound, PipelineStageError
from .orient import (
    Orientation,
    correct_orientation,
    orientation_from_predictions,
    predict_angles,
    predict_flips,
    upright,
)
from .registry import load_stack, registry_load, registry_save
from .regress import EnsembleConfig, Prediction, predict_stacked_batch
from .segment import Mask, mask_and_equalize, postprocess, predict_probabilities

INFERENCE_MARGIN = 1.0
STACK_SIZES = (1, 3)


@dataclass(frozen=True)
class PipelineBundle:
    segment: ModelArtifact
    angle: ModelArtifact
    flip: ModelArtifact
    detect: ModelArtifact
    regress: tuple[ModelArtifact, ...]

    def __post_init__(self):
        object.__setattr__(self, "regress", tuple(self.regress))
        for art, stage in ((self.segment, Stage.SEGMENT), (self.angle, Stage.ANGLE),
                           (self.flip, Stage.FLIP), (self.detect, Stage.DETECT)):
            art.require(stage)
        if len(self.regress) not in STACK_SIZES:
            raise ValueError(f"bundle needs 1 or 3 regress models, got {len(self.regress)}")
        for art in self.regress:
            art.require(Stage.REGRESS)
        sides = {EnsembleConfig(**a.config_snapshot).input_side for a in self.regress}
        if len(sides) != 1:
            raise ValueError(f"stacked models disagree on input side: {sorted(sides)}")

    @property
    def crop_side(self) -> int:
        return EnsembleConfig(**self.regress[0].config_snapshot).input_side

    @property
    def artifacts(self) -> list[ModelArtifact]:
        return [self.segment, self.angle, self.flip, self.detect, *self.regress]

    def versions(self) -> dict:
        out = {a.stage.value: a.version for a in (self.segment, self.angle, self.flip, self.detect)}
        out["regress"] = [a.version for a in self.regress]
        return out


def bundle_hash(bundle: PipelineBundle) -> str:
    h = hashlib.sha256()
    for art in bundle.artifacts:
        h.update(art.content_hash.encode())
    return h.hexdigest()


def load_bundle(root) -> PipelineBundle:
    def latest(stage: Stage) -> ModelArtifact:
        try:
            return registry_load(root, stage)
        except NotFound as exc:
            raise NotFound(f"bundle at {root} has no {stage.value} model") from exc

    regress = latest(Stage.REGRESS)
    return PipelineBundle(
        latest(Stage.SEGMENT), latest(Stage.ANGLE), latest(Stage.FLIP), latest(Stage.DETECT),
        tuple(load_stack(root, regress)),
    )


def save_bundle(bundle: PipelineBundle, root) -> None:
    for art in (bundle.segment, bundle.angle, bundle.flip, bundle.detect):
        registry_save(art, root)
    for art in stack_members(bundle.regress):
        registry_save(art, root)


def stack_members(models: Sequence[ModelArtifact]) -> list[ModelArtifact]:
    """Tag models as one stack so the registry can regroup them."""
    if len(models) == 1:
        return list(models)
    stack_id = uuid.uuid4().hex
    out = []
    for k, art in enumerate(models):
        metrics = dict(art.metrics, stack_id=stack_id, stack_size=len(models), stack_member=k)
        out.append(ModelArtifact(art.stage, art.architecture_id, art.weights, art.config_snapshot,
                                 metrics, art.version, art.content_hash))
    return out


# --- inference ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Intermediates:
    mask: Mask
    prepared: Radiograph
    orientation: Orientation
    corrected: Radiograph
    boxes: RegionBoxSet
    crops: RegionCropSet


@contextmanager
def _stage(name: str):
    try:
        yield
    except PipelineStageError:
        raise
    except (BoneAgeError, ValueError) as exc:
        raise PipelineStageError(name, exc) from exc


def _masks(bundle: PipelineBundle, images: Sequence[Radiograph]) -> list[Mask]:
    for img in images:
        if float(np.ptp(img.pixels)) == 0.0:
            # a constant image carries nothing to segment
            raise EmptyMask(f"image {img.id!r} is constant")
    return [postprocess(p) for p in predict_probabilities(bundle.segment, images)]


def predict_pipeline_batch(
    bundle: PipelineBundle, items: Sequence[tuple[Radiograph, Sex]]
) -> list[tuple[Prediction, Intermediates]]:
    """Run every stage over a batch; any failure names the stage it came from."""
    images = [img for img, _ in items]
    with _stage("SEGMENT"):
        masks = _masks(bundle, images)
        prepared = [mask_and_equalize(img, m) for img, m in zip(images, masks)]
    with _stage("ORIENT"):
        apparent = predict_angles(bundle.angle, prepared)
        flips = predict_flips(bundle.flip, [upright(p, a) for p, a in zip(prepared, apparent)])
        orientations = [orientation_from_predictions(a, f) for a, f in zip(apparent, flips)]
    with _stage("CORRECT"):
        corrected = [correct_orientation(p, o) for p, o in zip(prepared, orientations)]
    with _stage("DETECT"):
        boxes = predict_boxes_batch(bundle.detect, corrected)
    with _stage("CROP"):
        crops = [extract_crops(c, b, INFERENCE_MARGIN, bundle.crop_side) for c, b in zip(corrected, boxes)]
    with _stage("REGRESS"):
        preds = predict_stacked_batch(bundle.regress, [(c, s) for c, (_, s) in zip(crops, items)])
        if len(bundle.regress) == 1:
            preds = [Prediction(p.per_region, p.mean_months) for p in preds]
    return [
        (pred, Intermediates(m, p, o, c, b, cr))
        for pred, m, p, o, c, b, cr in zip(preds, masks, prepared, orientations, corrected, boxes, crops)
    ]


def predict_pipeline(bundle: PipelineBundle, image: Radiograph, sex: Sex) -> tuple[Prediction, Intermediates]:
    return predict_pipeline_batch(bundle, [(image, sex)])[0]


def predict_many(bundle: PipelineBundle, items: Sequence[tuple[Radiograph, Sex]], batch_size: int = 16):
    """Batched pipeline over a long sequence.

    Yields ``(prediction, intermediates)`` per item, or ``(None, error)`` for
    an item whose own run fails; one bad image does not sink its batch.
    """
    for i in range(0, len(items), batch_size):
        chunk = items[i : i + batch_size]
        try:
            yield from predict_pipeline_batch(bundle, chunk)
        except PipelineStageError:
            for item in chunk:
                try:
                    yield predict_pipeline(bundle, *item)
                except PipelineStageError as exc:
                    yield None, exc


__all__ = [
    "INFERENCE_MARGIN", "Intermediates", "PipelineBundle", "bundle_hash", "load_bundle",
    "predict_many", "predict_pipeline", "predict_pipeline_batch", "save_bundle", "stack_members",
]
