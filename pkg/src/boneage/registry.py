"""Versioned on-disk model registry: ``<root>/<stage>/<version>/{config.json, weights.bin, metrics.json}``."""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from pathlib import Path

from .artifact import ModelArtifact, Stage
from .errors import HashMismatch, IoError, NotFound

ENV_ROOT = "BONEAGE_REGISTRY"
DEFAULT_ROOT = "registry"


def registry_root(root=None) -> Path:
    return Path(root or os.environ.get(ENV_ROOT) or DEFAULT_ROOT)


def versions(root, stage: Stage) -> list[int]:
    folder = registry_root(root) / stage.value
    if not folder.is_dir():
        return []
    return sorted(int(p.name) for p in folder.iterdir() if p.is_dir() and p.name.isdigit())


def _write_version(folder: Path, artifact: ModelArtifact) -> None:
    (folder / "weights.bin").write_bytes(artifact.weights)
    meta = {
        "stage": artifact.stage.value,
        "architecture_id": artifact.architecture_id,
        "version": artifact.version,
        "content_hash": artifact.content_hash,
        "config": artifact.config_snapshot,
    }
    (folder / "config.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    (folder / "metrics.json").write_text(json.dumps(artifact.metrics, indent=2, sort_keys=True))


def registry_save(artifact: ModelArtifact, root=None) -> Path:
    """Store as the next version. Files land in a temp dir first and appear via one rename."""
    stage_dir = registry_root(root) / artifact.stage.value
    try:
        stage_dir.mkdir(parents=True, exist_ok=True)
        while True:
            existing = versions(root, artifact.stage)
            version = (existing[-1] if existing else 0) + 1
            stamped = artifact.with_version(version)
            tmp = Path(tempfile.mkdtemp(prefix=".tmp-", dir=stage_dir))
            try:
                _write_version(tmp, stamped)
                os.rename(tmp, stage_dir / str(version))
                return stage_dir / str(version)
            except FileExistsError:
                # another writer took this version number
                shutil.rmtree(tmp, ignore_errors=True)
            except OSError as exc:
                shutil.rmtree(tmp, ignore_errors=True)
                if (stage_dir / str(version)).exists():
                    continue
                raise IoError(stage_dir, str(exc)) from exc
    except OSError as exc:
        raise IoError(stage_dir, str(exc)) from exc


def registry_load(root, stage: Stage, version: int | None = None) -> ModelArtifact:
    """Load a version (latest when omitted); the weights must match the stored hash."""
    available = versions(root, stage)
    if not available:
        raise NotFound(f"no {stage.value} artifacts under {registry_root(root)}")
    version = available[-1] if version is None else int(version)
    if version not in available:
        raise NotFound(f"{stage.value} version {version} not found")
    folder = registry_root(root) / stage.value / str(version)
    try:
        meta = json.loads((folder / "config.json").read_text())
        weights = (folder / "weights.bin").read_bytes()
        metrics = json.loads((folder / "metrics.json").read_text())
    except (OSError, ValueError) as exc:
        raise IoError(folder, str(exc)) from exc
    if meta["stage"] != stage.value:
        raise HashMismatch(f"{folder} holds a {meta['stage']} artifact")
    return ModelArtifact(
        stage=stage,
        architecture_id=meta["architecture_id"],
        weights=weights,
        config_snapshot=meta["config"],
        metrics=metrics,
        version=int(meta["version"]),
        content_hash=meta["content_hash"],
    )


def load_stack(root, latest: ModelArtifact) -> list[ModelArtifact]:
    """All REGRESS versions that were saved as one stacked group with ``latest``."""
    stack_id = latest.metrics.get("stack_id")
    if stack_id is None:
        return [latest]
    members = []
    for v in versions(root, Stage.REGRESS):
        art = latest if v == latest.version else registry_load(root, Stage.REGRESS, v)
        if art.metrics.get("stack_id") == stack_id:
            members.append(art)
    return members
