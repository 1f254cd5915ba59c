"""HTTP inference service: upload an X-ray, get probability, label, overlay.

The loaded model is shared read-only across requests; every CAM pass
builds its own tape, so concurrent identical uploads return bitwise
identical probabilities and PNG bytes. The service labels PNEUMONIA only
for probability strictly greater than the threshold (the metrics module
uses >= for its sweeps; both rules are pinned by tests).
"""

from __future__ import annotations

import base64
import time
from dataclasses import dataclass

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles

from . import __version__
from .datapipe import DecodeError, decode_image, resize_bilinear, to_tensor
from .explain import grad_cam, overlay_to_png, render_overlay
from .model import ModelGraph, predict

MAX_UPLOAD_BYTES = 10 * 1024 * 1024


@dataclass
class ServiceState:
    model: ModelGraph | None = None
    threshold: float = 0.5
    blend: float = 0.4

    @property
    def model_version(self) -> str:
        if self.model is None:
            return "none"
        meta = self.model.metadata
        epoch = meta.get("epoch", "?")
        created = meta.get("created_at", "unknown")
        return f"pneunet-{created}-epoch{epoch}"


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": message})


def infer_bytes(state: ServiceState, payload: bytes,
                always_cam: bool = False) -> dict:
    """Decode -> resize -> predict (-> CAM overlay); shared with the CLI.

    Raises DecodeError for undecodable payloads; the HTTP layer maps that
    to a 400.
    """
    started = time.perf_counter()
    img = decode_image(payload)
    model = state.model
    _, in_h, in_w = model.input_shape
    resized = resize_bilinear(img, in_w, in_h)
    image_tensor = to_tensor(resized, model.input_shape[0])
    probability, _ = predict(model, image_tensor, state.threshold)
    label = "PNEUMONIA" if probability > state.threshold else "NORMAL"

    result = {
        "label": label,
        "probability": probability,
        "threshold": state.threshold,
        "model_version": state.model_version,
    }
    if label == "PNEUMONIA" or always_cam:
        heatmap = grad_cam(model, image_tensor)
        overlay = render_overlay(resized, heatmap, blend=state.blend)
        result["heatmap_png"] = base64.b64encode(
            overlay_to_png(overlay)).decode("ascii")
    result["latency_ms"] = (time.perf_counter() - started) * 1000.0
    return result


def create_app(state: ServiceState, static_dir=None) -> FastAPI:
    app = FastAPI(title="PneuNet", version=__version__)

    @app.exception_handler(RequestValidationError)
    async def invalid_request(request: Request, exc: RequestValidationError):
        return _error(400, "missing or invalid multipart field 'image'")

    @app.get("/api/health")
    def health():
        return {"status": "ok", "model_loaded": state.model is not None,
                "version": __version__}

    @app.get("/api/model")
    def model_card():
        if state.model is None:
            return _error(503, "model not loaded")
        model = state.model
        return {"input_shape": list(model.input_shape),
                "threshold": state.threshold,
                "backbone_preset": model.config.backbone_preset,
                "metadata": model.metadata,
                "model_version": state.model_version}

    @app.post("/api/predict")
    async def predict_endpoint(request: Request, always_cam: int = 0):
        if state.model is None:
            return _error(503, "model not loaded")
        form = await request.form()
        upload = form.get("image")
        if upload is None or isinstance(upload, str):
            return _error(400, "missing or invalid multipart field 'image'")
        payload = await upload.read()
        if len(payload) > MAX_UPLOAD_BYTES:
            return _error(413, f"payload exceeds {MAX_UPLOAD_BYTES} bytes")
        if not payload:
            return _error(400, "empty image payload")
        try:
            return infer_bytes(state, payload, always_cam=bool(always_cam))
        except DecodeError as exc:
            return _error(400, f"undecodable image: {exc}")

    if static_dir is not None:
        app.mount("/", StaticFiles(directory=static_dir, html=True),
                  name="static")
    return app
