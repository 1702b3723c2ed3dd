"""HTTP inference endpoint over a loaded, immutable pipeline bundle."""

from __future__ import annotations

import base64
import logging
import threading
from typing import Optional

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from starlette.concurrency import run_in_threadpool
from starlette.datastructures import UploadFile

from .core import REGIONS, Radiograph, Sex, decode_grayscale
from .errors import PipelineStageError
from .explain import explain_all
from .pipeline import PipelineBundle, bundle_hash, predict_pipeline

log = logging.getLogger(__name__)

_TRUE = {"true", "1", "yes"}
_FALSE = {"false", "0", "no", ""}


class _Counters:
    def __init__(self):
        self._lock = threading.Lock()
        self.requests = 0
        self.failures = 0

    def bump(self, failed: bool) -> None:
        with self._lock:
            self.requests += 1
            self.failures += int(failed)


def _error(status: int, message: str, stage: Optional[str] = None) -> JSONResponse:
    body = {"error": message}
    if stage is not None:
        body["stage"] = stage
    return JSONResponse(body, status_code=status)


def create_app(bundle: Optional[PipelineBundle]) -> FastAPI:
    """App bound to ``bundle``; with ``None`` every prediction answers 503."""
    app = FastAPI(title="boneage", docs_url=None, redoc_url=None)
    counters = _Counters()
    digest = bundle_hash(bundle) if bundle is not None else None
    versions = bundle.versions() if bundle is not None else None

    @app.get("/healthz")
    def healthz():
        return {
            "status": "ok" if bundle is not None else "no_bundle",
            "bundle_hash": digest,
            "requests": counters.requests,
        }

    @app.post("/predict")
    async def predict(request: Request):
        if bundle is None:
            return _error(503, "no model bundle loaded")
        try:
            form = await request.form()
        except Exception as exc:  # noqa: BLE001 - any body parse failure is the client's
            return _error(400, f"expected multipart form data: {exc}")
        upload = form.get("image")
        if not isinstance(upload, UploadFile):
            return _error(400, "missing image file field 'image'")
        sex_text = form.get("sex")
        if not isinstance(sex_text, str) or sex_text.strip().lower() not in ("male", "female"):
            return _error(400, "field 'sex' must be 'male' or 'female'")
        explain_text = str(form.get("explain", "false")).strip().lower()
        if explain_text not in _TRUE | _FALSE:
            return _error(400, "field 'explain' must be true or false")
        data = await upload.read()
        try:
            image = Radiograph(upload.filename or "upload", decode_grayscale(data), Sex.parse(sex_text))
        except ValueError as exc:
            return _error(400, f"bad image: {exc}")
        try:
            # inference is CPU-bound; keep it off the event loop
            body = await run_in_threadpool(_run, bundle, image, explain_text in _TRUE, versions)
        except PipelineStageError as exc:
            counters.bump(True)
            return _error(422, str(exc), exc.stage)
        counters.bump(False)
        return body

    return app


def _run(bundle: PipelineBundle, image: Radiograph, explain: bool, versions: dict) -> dict:
    prediction, inter = predict_pipeline(bundle, image, image.sex)
    body = {
        "bone_age_months": prediction.mean_months,
        "per_region": {r.value: prediction.per_region[r] for r in REGIONS},
        "model_versions": versions,
    }
    if explain:
        try:
            maps = explain_all(bundle.regress[0], inter.crops, image.sex)
        except Exception as exc:  # noqa: BLE001
            raise PipelineStageError("EXPLAIN", exc) from exc
        body["saliency"] = {r.value: base64.b64encode(m.to_png()).decode("ascii") for r, m in maps.items()}
    return body


def serve(bundle: Optional[PipelineBundle], port: int, host: str = "127.0.0.1") -> None:
    import uvicorn

    uvicorn.run(create_app(bundle), host=host, port=port, log_level="info")
