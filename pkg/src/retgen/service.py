"""HTTP chat service over a loaded ensemble.

Wire contract (all JSON, UTF-8):

* ``POST /chat``  ChatRequest -> ChatResponseWire; 400 for an empty query,
  422 for a malformed body or unknown mode.
* ``GET /health`` -> {"status": "ok", "uptime_s": ...}
* ``GET /config`` -> effective config plus sha256 checksums of every
  artifact file, recomputed per call.

Errors are ``{"error": ..., "detail": ...}``.  Artifacts are read-only;
requests never mutate shared state.
"""

from __future__ import annotations

import hashlib
import time
from pathlib import Path
from typing import Literal

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import __version__
from .ensemble import Candidate, ChatResponse, EmptyQueryError, Ensemble

WIRE_CONTRACT_VERSION = 1


class UTF8JSONResponse(JSONResponse):
    media_type = "application/json; charset=utf-8"


class ChatRequestBody(BaseModel):
    query: str
    mode: Literal["ensemble", "retrieval_only", "generation_only"] | None = None
    max_len: int | None = Field(default=None, ge=1)
    beam_width: int | None = Field(default=None, ge=1)


def _candidate_wire(cand: Candidate) -> dict:
    wire = {
        "text": " ".join(cand.reply),
        "provenance": cand.provenance,
        "score": cand.score,
    }
    if cand.source_pair_id is not None:
        wire["source_pair_id"] = cand.source_pair_id
    return wire


def response_wire(resp: ChatResponse, model_versions: dict) -> dict:
    return {
        "reply": " ".join(resp.reply),
        "provenance": resp.provenance,
        "candidates": [_candidate_wire(c) for c in resp.candidates],
        "timings_ms": resp.timings_ms,
        "model_versions": model_versions,
    }


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def create_app(ensemble: Ensemble, cors: bool = True) -> FastAPI:
    app = FastAPI(title="retgen chat service",
                  default_response_class=UTF8JSONResponse)
    started = time.monotonic()
    model_versions = {
        "service": __version__,
        "wire_contract": WIRE_CONTRACT_VERSION,
        "generator": (ensemble.generator.hyper.arch
                      if ensemble.generator is not None else None),
    }

    if cors:
        app.add_middleware(
            CORSMiddleware,
            allow_origins=["*"],
            allow_methods=["*"],
            allow_headers=["*"],
        )

    @app.exception_handler(RequestValidationError)
    async def on_validation_error(request: Request, exc: RequestValidationError):
        return UTF8JSONResponse(
            status_code=422,
            content={"error": "validation_error", "detail": exc.errors()},
        )

    @app.exception_handler(Exception)
    async def on_error(request: Request, exc: Exception):
        return UTF8JSONResponse(
            status_code=500,
            content={"error": "internal_error", "detail": str(exc)},
        )

    @app.post("/chat")
    async def chat(body: ChatRequestBody):
        try:
            resp = ensemble.respond(body.query, mode=body.mode,
                                    max_len=body.max_len,
                                    beam_width=body.beam_width)
        except EmptyQueryError as exc:
            return UTF8JSONResponse(
                status_code=400,
                content={"error": "empty_query", "detail": str(exc)},
            )
        return response_wire(resp, model_versions)

    @app.get("/health")
    async def health():
        return {"status": "ok", "uptime_s": time.monotonic() - started}

    @app.get("/config")
    async def config():
        cfg = ensemble.config
        checksums = {}
        for name, path in cfg.artifact_paths().items():
            if path and Path(path).exists():
                checksums[name] = _sha256(path)
        return {
            "mode": cfg.mode,
            "k": cfg.k,
            "decode": {"max_len": cfg.decode.max_len,
                       "beam_width": cfg.decode.beam_width},
            "apology": cfg.apology,
            "artifacts": cfg.artifact_paths(),
            "checksums": checksums,
            "versions": model_versions,
        }

    return app
