"""Exception hierarchy shared by every pipeline stage."""

from __future__ import annotations


class BoneAgeError(Exception):
    """Base class for all errors raised by this package."""


# --- data ingestion ---------------------------------------------------------


class MissingColumn(BoneAgeError):
    def __init__(self, column: str):
        super().__init__(f"manifest is missing required column {column!r}")
        self.column = column


class UnparsableRow(BoneAgeError):
    def __init__(self, line_no: int, reason: str = ""):
        msg = f"cannot parse manifest line {line_no}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)
        self.line_no = line_no


class DuplicateId(BoneAgeError):
    def __init__(self, id: str):
        super().__init__(f"duplicate id {id!r}")
        self.id = id


class MissingLabel(BoneAgeError):
    def __init__(self, id: str):
        super().__init__(f"entry {id!r} has no bone age label")
        self.id = id


class EmptyManifest(BoneAgeError):
    pass


class InvalidSpec(BoneAgeError):
    def __init__(self, field: str, reason: str = ""):
        super().__init__(f"invalid value for {field!r}" + (f": {reason}" if reason else ""))
        self.field = field


class IoError(BoneAgeError):
    def __init__(self, path, reason: str = ""):
        super().__init__(f"I/O failure at {path}" + (f": {reason}" if reason else ""))
        self.path = path


# --- images and models --------------------------------------------------------


class ShapeMismatch(BoneAgeError):
    def __init__(self, id: str = "", detail: str = ""):
        super().__init__(f"shape mismatch for {id!r}" + (f": {detail}" if detail else ""))
        self.id = id


class DegenerateDataset(BoneAgeError):
    pass


class WrongStage(BoneAgeError):
    def __init__(self, expected, got):
        super().__init__(f"expected a {expected} model, got {got}")
        self.expected = expected
        self.got = got


class EmptyMask(BoneAgeError):
    pass


class ConstantRegion(BoneAgeError):
    pass


class IncompleteTruth(BoneAgeError):
    def __init__(self, id: str, region):
        super().__init__(f"sample {id!r} has no box for region {region}")
        self.id = id
        self.region = region


class BoxDegenerate(BoneAgeError):
    def __init__(self, region):
        super().__init__(f"box for {region} covers fewer than 4 source pixels")
        self.region = region


class MissingRegion(BoneAgeError):
    def __init__(self, region):
        super().__init__(f"crop for {region} is missing")
        self.region = region


class UnknownLayer(BoneAgeError):
    pass


class ZonesNotPartition(BoneAgeError):
    pass


# --- evaluation ---------------------------------------------------------------


class LengthMismatch(BoneAgeError):
    pass


class EmptyInput(BoneAgeError):
    pass


# --- registry / orchestration -------------------------------------------------


class HashMismatch(BoneAgeError):
    pass


class NotFound(BoneAgeError):
    pass


class PipelineStageError(BoneAgeError):
    """Wraps any failure inside :func:`boneage.pipeline.predict_pipeline` with the stage name."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
