"""Per-stage training data built from labels, plus stage-level training entry points.

Every downstream stage trains on inputs produced with the *label* for the
stages before it (truth mask, truth orientation, truth boxes), so each model
sees clean inputs and the stages can be trained independently.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable

from .core import ManifestEntry, Radiograph
from .crop import DEFAULT_MARGIN, extract_crops
from .detect import complete_boxes
from .datasets import LabeledSample
from .errors import IncompleteTruth
from .orient import Orientation, apparent_angle, correct_orientation, upright
from .segment import Mask, mask_and_equalize
from .synth import SynthRadiograph, corrected_boxes


def from_synth(sample: SynthRadiograph, id_: str | None = None) -> LabeledSample:
    rad = sample.radiograph
    entry = ManifestEntry(id_ or rad.id, Path(f"{id_ or rad.id}.png"), rad.bone_age_months, rad.sex)
    boxes = {b.region: b for b in corrected_boxes(sample)}
    return LabeledSample(
        entry, rad, Mask(sample.truth_mask), Orientation(sample.truth_rotation_deg, sample.truth_flipped), boxes
    )


def _need(sample: LabeledSample, what: str):
    value = getattr(sample, what)
    if value is None:
        raise IncompleteTruth(sample.entry.id, what)
    return value


def prepared(sample: LabeledSample) -> Radiograph:
    """Masked and equalized with the labeled mask."""
    return mask_and_equalize(sample.radiograph, _need(sample, "mask"))


def corrected(sample: LabeledSample) -> Radiograph:
    return correct_orientation(prepared(sample), _need(sample, "orientation"))


def segment_pairs(samples: Iterable[LabeledSample]) -> list:
    return [(s.radiograph, _need(s, "mask")) for s in samples]


def angle_pairs(samples: Iterable[LabeledSample]) -> list:
    return [(prepared(s), apparent_angle(_need(s, "orientation"))) for s in samples]


def flip_pairs(samples: Iterable[LabeledSample]) -> list:
    out = []
    for s in samples:
        ori = _need(s, "orientation")
        out.append((upright(prepared(s), apparent_angle(ori)), ori.flipped))
    return out


def detect_pairs(samples: Iterable[LabeledSample]) -> list:
    return [(corrected(s), _need(s, "boxes")) for s in samples]


def training_crop_side(input_side: int, margin: float = DEFAULT_MARGIN) -> int:
    """Crops carry the margin so the ensemble can random-crop back to ``input_side``."""
    return int(round(input_side * margin))


def regress_samples(
    samples: Iterable[LabeledSample], input_side: int = 128, margin: float = DEFAULT_MARGIN
) -> list:
    side = training_crop_side(input_side, margin)
    out = []
    for s in samples:
        boxes = complete_boxes(s.entry.id, _need(s, "boxes"))
        crops = extract_crops(corrected(s), boxes, margin, side)
        age = s.entry.bone_age_months
        if age is None:
            raise IncompleteTruth(s.entry.id, "bone_age_months")
        out.append((crops, s.entry.sex, float(age)))
    return out
