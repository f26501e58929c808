"""
HTTP screening service: model registry, `/screen` inference, JSON-lines audit log, webhook sync.

One model is active per process. Requests take a snapshot of the active entry when they start, so a
concurrent `/model/reload` never mixes two models inside one request.
"""

from collections.abc import AsyncIterator
from concurrent.futures import ThreadPoolExecutor
from contextlib import asynccontextmanager
from dataclasses import dataclass
from datetime import datetime

try:
    from datetime import UTC
except ImportError:  # Python < 3.11
    from datetime import timezone

    UTC = timezone.utc
import logging
from pathlib import Path
import queue
import threading
import time
from typing import Any

try:
    from typing import Self
except ImportError:  # Python < 3.11
    from typing_extensions import Self
import uuid

from fastapi import FastAPI, Request
from fastapi.concurrency import run_in_threadpool
from fastapi.responses import JSONResponse
import httpx
import numpy as np
from pydantic import BaseModel, model_validator
from starlette.datastructures import UploadFile
from starlette.types import Message
import uvicorn

from covilearn.architectures import ArchitectureGraph, assemble_model
from covilearn.config import ServiceConfig
from covilearn.dataset import LABELS, Label
from covilearn.errors import CovilearnError, FormatError, UnsupportedFeatureError
from covilearn.imaging import decode_image, preprocess
from covilearn.training import predict
from covilearn.weights import ParameterStore, load_weights

logger = logging.getLogger(__name__)


# ------------------------------------------------------------------------------
# Model registry
# ------------------------------------------------------------------------------


class ModelRegistryEntry(BaseModel):
    model_id: str
    variant: str
    tag: str
    weights_path: str
    digest: str
    loaded_at: datetime
    active: bool = False


@dataclass(frozen=True)
class LoadedModel:
    entry: ModelRegistryEntry
    graph: ArchitectureGraph
    params: ParameterStore


def load_model(weights_path: Path, variant: str) -> LoadedModel:
    """Raises `WeightsError`/`FormatError` naming the problem when the weights do not fit the variant."""
    graph = assemble_model(variant)
    params, digest = load_weights(weights_path, graph)
    entry = ModelRegistryEntry(
        model_id=f"{graph.variant}-{digest[:12]}",
        variant=graph.variant,
        tag=graph.tag,
        weights_path=str(weights_path),
        digest=digest,
        loaded_at=datetime.now(UTC),
    )
    return LoadedModel(entry, graph, params)


class ModelRegistry:
    def __init__(self) -> None:
        self._active: LoadedModel | None = None
        self._lock = threading.Lock()

    @property
    def active(self) -> LoadedModel:
        model = self._active
        if model is None:
            raise CovilearnError("no model loaded")
        return model

    @property
    def has_model(self) -> bool:
        return self._active is not None

    def activate(self, model: LoadedModel) -> LoadedModel:
        entry = model.entry.model_copy(update={"active": True})
        with self._lock:
            previous = self._active
            self._active = LoadedModel(entry, model.graph, model.params)
        if previous is not None:
            logger.info("replaced model %s with %s", previous.entry.model_id, entry.model_id)
        else:
            logger.info("activated model %s", entry.model_id)
        return self._active

    def reload(self, weights_path: Path, variant: str) -> LoadedModel:
        return self.activate(load_model(weights_path, variant))


# ------------------------------------------------------------------------------
# Results, audit log and webhook
# ------------------------------------------------------------------------------


class ScreeningResult(BaseModel):
    request_id: str
    label: Label
    probabilities: list[float]
    model_id: str
    processing_ms: float
    timestamp: datetime

    @model_validator(mode="after")
    def _check_probabilities(self) -> Self:
        if len(self.probabilities) != len(LABELS):
            raise ValueError(f"expected {len(LABELS)} probabilities, got {len(self.probabilities)}")
        if abs(sum(self.probabilities) - 1.0) > 1e-6:
            raise ValueError("probabilities must sum to 1")
        if LABELS[int(np.argmax(self.probabilities))] != self.label:
            raise ValueError("label must be the argmax of the probabilities")
        return self


def record_result(result: ScreeningResult, store: Path) -> None:
    """Append one JSON line. Earlier lines are never rewritten."""
    line = result.model_dump_json() + "\n"
    with store.open("a", encoding="utf-8") as f:
        f.write(line)
        f.flush()


def read_audit_log(store: Path) -> list[ScreeningResult]:
    lines = store.read_text(encoding="utf-8").splitlines()
    return [ScreeningResult.model_validate_json(line) for line in lines if line.strip()]


class AuditLog:
    """Single writer thread fed by a queue; a write failure marks the log degraded."""

    _STOP = object()

    def __init__(self, path: Path) -> None:
        self.path = path
        self.degraded = False
        self._queue: queue.Queue[Any] = queue.Queue()
        self._thread = threading.Thread(target=self._run, name="covilearn-audit", daemon=True)
        self._thread.start()

    def submit(self, result: ScreeningResult) -> None:
        self._queue.put(result)

    def flush(self) -> None:
        self._queue.join()

    def close(self) -> None:
        self._queue.put(self._STOP)
        self._thread.join()

    def _run(self) -> None:
        while True:
            item = self._queue.get()
            try:
                if item is self._STOP:
                    return
                record_result(item, self.path)
            except OSError as e:
                if not self.degraded:
                    logger.error("audit log %s is not writable: %s", self.path, e)
                self.degraded = True
            finally:
                self._queue.task_done()


class WebhookNotifier:
    """
    Fire-and-forget POST of each result; `retries` extra attempts after the first failure.

    At most `max_pending` payloads wait for delivery; results arriving while the backlog is full are
    dropped with a warning.
    """

    def __init__(
        self, url: str, retries: int = 3, *, max_pending: int = 256, transport: httpx.BaseTransport | None = None
    ) -> None:
        self.url = url
        self.retries = retries
        self.max_pending = max_pending
        self.dropped = 0
        self._pending = threading.BoundedSemaphore(max_pending)
        self._client = httpx.Client(timeout=5.0, transport=transport)
        self._executor = ThreadPoolExecutor(max_workers=1, thread_name_prefix="covilearn-webhook")

    def notify(self, result: ScreeningResult) -> bool:
        if not self._pending.acquire(blocking=False):
            self.dropped += 1
            logger.warning(
                "webhook backlog full (%d pending), dropping request %s", self.max_pending, result.request_id
            )
            return False
        future = self._executor.submit(self._send, result.model_dump(mode="json"))
        future.add_done_callback(lambda _: self._pending.release())
        return True

    def _send(self, payload: dict[str, Any]) -> bool:
        for attempt in range(1, self.retries + 2):
            try:
                response = self._client.post(self.url, json=payload)
                response.raise_for_status()
                return True
            except httpx.HTTPError as e:
                logger.warning("webhook attempt %d/%d to %s failed: %s", attempt, self.retries + 1, self.url, e)
        logger.error("giving up on webhook for request %s", payload.get("request_id"))
        return False

    def close(self) -> None:
        self._executor.shutdown(wait=True)
        self._client.close()


# ------------------------------------------------------------------------------
# Inference
# ------------------------------------------------------------------------------


def screen_bytes(model: LoadedModel, data: bytes, config: ServiceConfig) -> ScreeningResult:
    started = time.perf_counter()
    raw = decode_image(data)
    size = model.graph.input_shape[-1]
    image = preprocess(raw.pixels, config.subtract_mean, max_value=raw.max_value, size=size, mean=config.mean)
    (prediction,) = predict(model.graph, model.params, image.numpy()[np.newaxis], conv_method=config.conv_method)
    return ScreeningResult(
        request_id=uuid.uuid4().hex,
        label=prediction.label,
        probabilities=prediction.probabilities.tolist(),
        model_id=model.entry.model_id,
        processing_ms=(time.perf_counter() - started) * 1000.0,
        timestamp=datetime.now(UTC),
    )


def _error(status: int, error: str, reason: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": error, "reason": reason})


def _error_for(e: CovilearnError) -> JSONResponse:
    if isinstance(e, FormatError) and str(e) == "unrecognized image format":
        return _error(415, "unsupported_media_type", str(e))
    if isinstance(e, UnsupportedFeatureError):
        return _error(415, "unsupported_feature", str(e))
    if isinstance(e, FormatError):
        return _error(422, "malformed_image", str(e))
    return _error(400, "bad_request", str(e))


async def _read_upload(request: Request, limit: int) -> bytes | JSONResponse:
    declared = request.headers.get("content-length")
    if declared is not None and declared.isdigit() and int(declared) > limit:
        return _error(413, "payload_too_large", f"body of {declared} bytes exceeds the {limit}-byte limit")
    received = bytearray()
    async for chunk in request.stream():
        received += chunk
        if len(received) > limit:
            return _error(413, "payload_too_large", f"body exceeds the {limit}-byte limit")
    data = body = bytes(received)

    if request.headers.get("content-type", "").startswith("multipart/form-data"):
        # The stream is spent, so the form parser reads the buffered body
        async def replay() -> Message:
            return {"type": "http.request", "body": body, "more_body": False}

        async with Request(request.scope, replay).form() as form:
            uploads = [value for value in form.values() if isinstance(value, UploadFile)]
            if not uploads:
                return _error(422, "missing_file", "multipart body carries no file field")
            upload = form.get("file")
            chosen = upload if isinstance(upload, UploadFile) else uploads[0]
            data = await chosen.read()
    if not data:
        return _error(422, "empty_body", "request body is empty")
    return data


class ReloadRequest(BaseModel):
    weights_path: str | None = None
    variant: str | None = None


def create_app(config: ServiceConfig, registry: ModelRegistry | None = None) -> FastAPI:
    if config.subtract_mean and config.mean is None:
        raise CovilearnError("mean subtraction is enabled but no dataset mean is configured")
    registry = registry or ModelRegistry()
    if not registry.has_model:
        if config.weights_path is None:
            raise CovilearnError("no weights path configured (use --weights or CVL_WEIGHTS)")
        registry.reload(config.weights_path, config.variant)

    @asynccontextmanager
    async def lifespan(app: FastAPI) -> AsyncIterator[None]:
        app.state.audit = AuditLog(config.audit_log)
        app.state.webhook = (
            WebhookNotifier(config.webhook_url, config.webhook_retries, max_pending=config.webhook_max_pending)
            if config.webhook_url
            else None
        )
        yield
        app.state.audit.close()
        if app.state.webhook is not None:
            app.state.webhook.close()

    app = FastAPI(title="covilearn screening service", lifespan=lifespan)
    app.state.registry = registry
    app.state.config = config

    @app.exception_handler(CovilearnError)
    async def covilearn_error(request: Request, e: CovilearnError) -> JSONResponse:
        return _error_for(e)

    @app.get("/health")
    async def health(request: Request) -> dict[str, Any]:
        audit: AuditLog = request.app.state.audit
        return {
            "status": "degraded" if audit.degraded else "ok",
            "model_id": registry.active.entry.model_id,
            "audit_log_writable": not audit.degraded,
        }

    @app.get("/model")
    async def model() -> ModelRegistryEntry:
        return registry.active.entry

    @app.post("/model/reload")
    async def reload(request: Request) -> Any:
        body = await request.body()
        wanted = ReloadRequest.model_validate_json(body) if body.strip() else ReloadRequest()
        path = Path(wanted.weights_path) if wanted.weights_path else config.weights_path
        if path is None:
            return _error(422, "missing_weights", "no weights path given or configured")
        try:
            loaded = await run_in_threadpool(registry.reload, path, wanted.variant or registry.active.entry.variant)
        except CovilearnError as e:
            logger.error("reload from %s failed, keeping %s: %s", path, registry.active.entry.model_id, e)
            return _error(422, "bad_weights", str(e))
        return loaded.entry

    @app.post("/screen")
    async def screen(request: Request) -> Any:
        data = await _read_upload(request, config.max_body_bytes)
        if isinstance(data, JSONResponse):
            logger.info("rejected upload: %s", bytes(data.body).decode())
            return data
        snapshot = registry.active
        try:
            result = await run_in_threadpool(screen_bytes, snapshot, data, config)
        except CovilearnError as e:
            logger.info("rejected upload: %s", e)
            return _error_for(e)
        request.app.state.audit.submit(result)
        if request.app.state.webhook is not None:
            request.app.state.webhook.notify(result)
        return result

    return app


def serve(config: ServiceConfig) -> None:
    """Load the model, then run uvicorn until interrupted. Bad weights abort before binding."""
    app = create_app(config)
    logger.info("serving %s on %s", app.state.registry.active.entry.model_id, config.address)
    uvicorn.run(app, host=config.host, port=config.port, log_config=None)
