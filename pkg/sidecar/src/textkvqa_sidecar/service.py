"""HTTP OCR sidecar.

POST /ocr takes a base64-encoded image and returns word tokens in the shared
token schema. /healthz reports warmup state (503 until the glyph atlas is
rendered, or on load failure). /v1/chat/completions proxies to an upstream
model server when LMM_UPSTREAM_URL is configured.

Handlers are synchronous and run on the framework's worker pool; backends
are read-only after warmup, so sharing them across requests is safe.
"""

from __future__ import annotations

import base64
import binascii
import os
import threading
from contextlib import asynccontextmanager

import cv2
import httpx
import numpy as np
from fastapi import FastAPI
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel, Field

from . import __version__
from .backends import DEFAULT_BACKEND, OcrBackend, default_registry

# Fixed preprocessing: reported by /healthz so runs are reproducible.
PREPROCESSING = {
    "grayscale": "bt601-luma",
    "resize": "none",
    "binarize": "otsu-global",
}


class OcrRequest(BaseModel):
    image_b64: str = Field(min_length=1)
    backend: str | None = None


class TokenModel(BaseModel):
    text: str = Field(min_length=1)
    bbox: list[float] = Field(min_length=4, max_length=4)
    conf: float = Field(ge=0.0, le=1.0)


class OcrResponse(BaseModel):
    tokens: list[TokenModel]
    backend: str


class Engine:
    """Backend registry plus its warmup lifecycle."""

    def __init__(
        self,
        registry: dict[str, OcrBackend] | None = None,
        default: str = DEFAULT_BACKEND,
    ):
        self.registry = default_registry() if registry is None else registry
        if default not in self.registry:
            raise ValueError(f"default backend {default!r} not in registry")
        self.default = default
        self.ready = False
        self.load_error: str | None = None
        self._lock = threading.Lock()

    def warmup(self) -> None:
        with self._lock:
            if self.ready or self.load_error is not None:
                return
            try:
                for backend in self.registry.values():
                    backend.load()
            except Exception as exc:
                self.load_error = f"{type(exc).__name__}: {exc}"
                return
            self.ready = True


def _error(status: int, kind: str, detail: str) -> JSONResponse:
    return JSONResponse({"error": kind, "detail": detail}, status_code=status)


def create_app(
    *,
    engine: Engine | None = None,
    warm_on_startup: bool = True,
    upstream_url: str | None = None,
    upstream_client: httpx.Client | None = None,
) -> FastAPI:
    eng = engine or Engine()
    upstream = upstream_url if upstream_url is not None else os.environ.get("LMM_UPSTREAM_URL")

    lifespan = None
    if warm_on_startup:

        @asynccontextmanager
        async def lifespan(app: FastAPI):
            eng.warmup()
            yield

    app = FastAPI(title="textkvqa-sidecar", version=__version__, lifespan=lifespan)
    app.state.engine = eng

    @app.get("/healthz")
    def healthz():
        if eng.load_error is not None:
            return _error(503, "LoadError", eng.load_error)
        if not eng.ready:
            return JSONResponse({"status": "warming_up"}, status_code=503)
        return {
            "status": "ok",
            "version": __version__,
            "backends": {name: backend.tag for name, backend in sorted(eng.registry.items())},
            "default_backend": eng.default,
            "preprocessing": PREPROCESSING,
        }

    @app.post("/ocr")
    def ocr(request: OcrRequest):
        if eng.load_error is not None:
            return _error(503, "LoadError", eng.load_error)
        if not eng.ready:
            return _error(503, "NotReady", "backends are still warming up")
        name = request.backend or eng.default
        backend = eng.registry.get(name)
        if backend is None:
            return _error(400, "UnknownBackend", f"{name!r}; known: {sorted(eng.registry)}")
        try:
            raw = base64.b64decode(request.image_b64, validate=True)
        except (binascii.Error, ValueError) as exc:
            return _error(400, "BadImage", f"image_b64 is not valid base64: {exc}")
        image = cv2.imdecode(np.frombuffer(raw, dtype=np.uint8), cv2.IMREAD_COLOR)
        if image is None:
            return _error(400, "BadImage", "payload did not decode as an image")
        tokens = backend.run(image)
        return OcrResponse(tokens=[TokenModel(**t) for t in tokens], backend=backend.tag)

    @app.post("/v1/chat/completions")
    def chat_completions(payload: dict):
        if not upstream:
            return _error(503, "NoUpstream", "set LMM_UPSTREAM_URL to enable the proxy")
        url = upstream.rstrip("/") + "/v1/chat/completions"
        client = upstream_client or httpx.Client(timeout=120.0)
        try:
            try:
                response = client.post(url, json=payload)
            finally:
                if upstream_client is None:
                    client.close()
        except httpx.HTTPError as exc:
            return _error(502, "UpstreamUnreachable", str(exc))
        return Response(
            content=response.content,
            status_code=response.status_code,
            media_type=response.headers.get("content-type", "application/json"),
        )

    return app


def main() -> None:
    import uvicorn

    port = int(os.environ.get("SIDECAR_PORT", "8100"))
    uvicorn.run(create_app(), host="0.0.0.0", port=port)


if __name__ == "__main__":
    main()
