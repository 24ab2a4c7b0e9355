"""HTTP service: completion inference plus benchmark mask annotation.

All payloads travel as base64-encoded PNG inside JSON. The service never
mutates checkpoints or benchmark ground truth; only group source masks are
writable (atomic replace, raw uploaded bytes stored verbatim so client-side
rasterization round trips byte-exactly).

Configuration comes from the environment:
    REFCOMPLETE_CHECKPOINT     path to a model checkpoint (required to serve)
    REFCOMPLETE_BENCHMARK_DIR  benchmark directory (optional)
    REFCOMPLETE_PORT           default 8080
    REFCOMPLETE_QUEUE_DEPTH    max concurrent/queued completions, default 4
"""

from __future__ import annotations

import base64
import binascii
import json
import os
import tempfile
import threading
import time
from collections import defaultdict
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .benchmark import MANIFEST_NAME
from .diffusion import SamplerConfig, make_schedule, sample_completion
from .model import load_checkpoint
from .pngio import decode_mask, decode_raster
from .synth import PART_LABELS, ReferencePart

DEFAULT_PORT = 8080
DEFAULT_QUEUE_DEPTH = 4


class ApiError(Exception):
    def __init__(self, status: int, code: str, detail: str):
        self.status = status
        self.code = code
        self.detail = detail
        super().__init__(detail)


class ReferencePayload(BaseModel):
    label: str
    image: str
    mask: str


class CompletionRequest(BaseModel):
    source: str
    mask: str
    references: list[ReferencePayload] = Field(default_factory=list)
    prompt: str | None = None
    seed: int = 0
    steps: int | None = None
    guidance: float | None = None


class MaskPayload(BaseModel):
    mask: str


def _b64_decode(field: str, payload: str) -> bytes:
    try:
        return base64.b64decode(payload, validate=True)
    except (binascii.Error, ValueError):
        raise ApiError(400, "malformed_payload", f"field {field!r} is not valid base64")


def _decode_image(field: str, payload: str) -> np.ndarray:
    raw = _b64_decode(field, payload)
    try:
        return decode_raster(raw)
    except Exception:
        raise ApiError(400, "malformed_payload", f"field {field!r} is not a decodable PNG")


def _decode_mask(field: str, payload: str) -> np.ndarray:
    raw = _b64_decode(field, payload)
    try:
        return decode_mask(raw)
    except Exception:
        raise ApiError(400, "malformed_payload", f"field {field!r} is not a decodable PNG")


def create_app(checkpoint_path: str | Path,
               benchmark_dir: str | Path | None = None,
               queue_depth: int = DEFAULT_QUEUE_DEPTH) -> FastAPI:
    model = load_checkpoint(checkpoint_path)
    schedule = make_schedule()
    bench_root = Path(benchmark_dir) if benchmark_dir else None
    slots = threading.Semaphore(queue_depth)
    mask_locks: dict[str, threading.Lock] = defaultdict(threading.Lock)

    app = FastAPI(title="refcomplete", version="0.1.0")

    @app.exception_handler(ApiError)
    async def handle_api_error(request: Request, exc: ApiError):
        return JSONResponse(status_code=exc.status,
                            content={"error": exc.code, "detail": exc.detail})

    @app.exception_handler(RequestValidationError)
    async def handle_validation_error(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400,
                            content={"error": "malformed_payload",
                                     "detail": str(exc.errors()[:3])})

    def _group_dir(group_id: str) -> Path:
        if bench_root is None:
            raise ApiError(404, "no_benchmark", "no benchmark directory configured")
        gdir = bench_root / group_id
        if not (bench_root / MANIFEST_NAME).exists() or not gdir.is_dir():
            raise ApiError(404, "unknown_group", f"no benchmark group {group_id!r}")
        return gdir

    def _manifest_entry(group_id: str) -> dict:
        manifest = json.loads((bench_root / MANIFEST_NAME).read_text())
        for entry in manifest.get("groups", []):
            if entry.get("group_id") == group_id:
                return entry
        raise ApiError(404, "unknown_group", f"no benchmark group {group_id!r}")

    @app.post("/v1/complete")
    def complete(req: CompletionRequest):
        size = model.config.image_size
        steps = req.steps if req.steps is not None else 50
        guidance = req.guidance if req.guidance is not None else 7.5
        if not 1 <= steps <= 250:
            raise ApiError(422, "bad_steps", f"steps must be in [1, 250], got {steps}")
        if not 0.0 <= guidance <= 30.0:
            raise ApiError(422, "bad_guidance",
                           f"guidance must be in [0, 30], got {guidance}")
        source = _decode_image("source", req.source)
        mask = _decode_mask("mask", req.mask)
        if source.shape[:2] != (size, size):
            raise ApiError(422, "size_mismatch",
                           f"model expects {size}x{size} images")
        if mask.shape != source.shape[:2]:
            raise ApiError(422, "size_mismatch", "mask does not match source size")
        if mask.sum() == 0:
            raise ApiError(422, "empty_mask", "source mask selects no pixels")
        references = []
        for i, ref in enumerate(req.references):
            if ref.label not in PART_LABELS:
                raise ApiError(422, "bad_reference_label",
                               f"unknown part label {ref.label!r}")
            img = _decode_image(f"references[{i}].image", ref.image)
            rmask = _decode_mask(f"references[{i}].mask", ref.mask)
            if img.shape[:2] != (size, size) or rmask.shape != img.shape[:2]:
                raise ApiError(422, "size_mismatch",
                               f"reference {i} does not match model size")
            if rmask.sum() == 0:
                raise ApiError(422, "empty_reference_mask",
                               f"reference {i} mask selects no pixels")
            references.append(ReferencePart(label=ref.label, image=img, mask=rmask))

        if not slots.acquire(blocking=False):
            raise ApiError(503, "busy", "inference queue is full")
        try:
            started = time.monotonic()
            completed = sample_completion(
                model, references, source, mask, schedule,
                SamplerConfig(steps=steps, guidance_scale=guidance),
                seed=req.seed, prompt=req.prompt)
            duration_ms = (time.monotonic() - started) * 1000.0
        finally:
            slots.release()
        from .pngio import encode_raster

        return {"image": base64.b64encode(encode_raster(completed)).decode(),
                "duration_ms": duration_ms, "seed": req.seed,
                "steps": steps, "guidance": guidance}

    @app.get("/v1/benchmark/groups")
    def list_groups():
        if bench_root is None or not (bench_root / MANIFEST_NAME).exists():
            raise ApiError(404, "no_benchmark", "no benchmark directory configured")
        manifest = json.loads((bench_root / MANIFEST_NAME).read_text())
        groups = [{"group_id": e["group_id"], "prompt": e.get("prompt"),
                   "reference_labels": [r["label"] for r in e.get("references", [])]}
                  for e in manifest.get("groups", [])]
        return {"groups": groups}

    @app.get("/v1/benchmark/groups/{group_id}")
    def get_group(group_id: str):
        gdir = _group_dir(group_id)
        entry = _manifest_entry(group_id)

        def asset(rel: str) -> str:
            return base64.b64encode((bench_root / rel).read_bytes()).decode()

        return {
            "group_id": group_id,
            "prompt": entry.get("prompt"),
            "source": asset(entry["source"]),
            "mask": asset(entry["mask"]),
            "ground_truth": asset(entry["ground_truth"]),
            "references": [
                {"label": r["label"], "image": asset(r["image"]),
                 "mask": asset(r["mask"]), "caption": r.get("caption", "")}
                for r in entry.get("references", [])
            ],
        }

    @app.put("/v1/benchmark/groups/{group_id}/mask")
    def put_mask(group_id: str, payload: MaskPayload):
        gdir = _group_dir(group_id)
        entry = _manifest_entry(group_id)
        raw = _b64_decode("mask", payload.mask)
        try:
            mask = decode_mask(raw)
        except Exception:
            raise ApiError(400, "malformed_payload", "mask is not a decodable PNG")
        source = decode_raster((bench_root / entry["source"]).read_bytes())
        if mask.shape != source.shape[:2]:
            raise ApiError(409, "dimension_mismatch",
                           f"mask {mask.shape} != source {source.shape[:2]}")
        target = bench_root / entry["mask"]
        with mask_locks[group_id]:
            fd, tmp = tempfile.mkstemp(dir=target.parent, suffix=".png.tmp")
            try:
                with os.fdopen(fd, "wb") as f:
                    f.write(raw)
                os.replace(tmp, target)
            finally:
                if os.path.exists(tmp):
                    os.unlink(tmp)
        response = {"stored": True, "group_id": group_id}
        if mask.sum() == 0:
            response["warning"] = "empty_mask"
        return response

    return app


def main() -> None:
    import uvicorn

    checkpoint = os.environ.get("REFCOMPLETE_CHECKPOINT")
    if not checkpoint:
        raise SystemExit("REFCOMPLETE_CHECKPOINT is required")
    app = create_app(
        checkpoint,
        os.environ.get("REFCOMPLETE_BENCHMARK_DIR") or None,
        int(os.environ.get("REFCOMPLETE_QUEUE_DEPTH", DEFAULT_QUEUE_DEPTH)))
    uvicorn.run(app, host="127.0.0.1",
                port=int(os.environ.get("REFCOMPLETE_PORT", DEFAULT_PORT)),
                log_level="warning")


if __name__ == "__main__":
    main()
