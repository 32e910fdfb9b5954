"""HTTP API for the blinded rating study.

Endpoints:
  GET  /study/{study_id}/next?rater=...   -> next Trial payload or done sentinel
  POST /study/{study_id}/rating           -> durable ack
  GET  /study/{study_id}/report?token=... -> unblinded analysis (token required)
  GET  /assets/{name}                     -> content-hashed image asset

All payloads carry a ``v`` schema version field. Rater-facing payloads
never contain method labels; the report endpoint is the only unblinded
surface and requires the study's report token.
"""

from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI, HTTPException, Query
from fastapi.responses import FileResponse, JSONResponse
from pydantic import BaseModel, Field

from ..errors import EarsrError, NoData, OutOfRange, UnknownRater, UnknownTrial
from .store import PAYLOAD_VERSION, RatingRecord, StudyStore, now_timestamp
from .study import analyze, next_trial, submit_rating


class TrialPayload(BaseModel):
    v: int = PAYLOAD_VERSION
    done: bool
    trial_id: str | None = None
    index: int | None = None
    total: int
    completed: int | None = None
    lr_asset: str | None = None
    candidates: list[str] | None = None
    criteria: list[str] | None = None


class RatingIn(BaseModel):
    v: int = PAYLOAD_VERSION
    rater_id: str
    trial_id: str
    candidate_index: int = Field(ge=0)
    criterion: str
    score: int


class RatingAck(BaseModel):
    v: int = PAYLOAD_VERSION
    status: str
    key: list


def _http_error(exc: EarsrError) -> HTTPException:
    status = 404 if isinstance(exc, (UnknownRater, UnknownTrial, NoData)) else 422
    if isinstance(exc, OutOfRange):
        status = 422
    return HTTPException(status_code=status, detail=str(exc))


def create_app(studies_root: str | Path) -> FastAPI:
    """Serve every study directory found under ``studies_root``."""
    studies_root = Path(studies_root)
    app = FastAPI(title="blinded rating service")
    stores: dict[str, StudyStore] = {}

    def store_for(study_id: str) -> StudyStore:
        if study_id not in stores:
            path = studies_root / study_id
            if not (path / "manifest.json").exists():
                raise HTTPException(status_code=404, detail=f"unknown study {study_id!r}")
            stores[study_id] = StudyStore(path)
        return stores[study_id]

    @app.get("/study/{study_id}/next", response_model=TrialPayload,
             response_model_exclude_none=True)
    def get_next(study_id: str, rater: str = Query(...)):
        store = store_for(study_id)
        try:
            return next_trial(store, rater)
        except EarsrError as exc:
            raise _http_error(exc)

    @app.post("/study/{study_id}/rating", response_model=RatingAck)
    def post_rating(study_id: str, rating: RatingIn):
        store = store_for(study_id)
        record = RatingRecord(
            rater_id=rating.rater_id,
            trial_id=rating.trial_id,
            candidate_index=rating.candidate_index,
            criterion=rating.criterion,
            score=rating.score,
            timestamp=now_timestamp(),
        )
        try:
            return submit_rating(store, record)
        except EarsrError as exc:
            raise _http_error(exc)

    @app.get("/study/{study_id}/report")
    def get_report(study_id: str, token: str = Query(...), anonymize: bool = False):
        store = store_for(study_id)
        if token != store.manifest["report_token"]:
            raise HTTPException(status_code=403, detail="invalid report token")
        try:
            return JSONResponse(analyze(store, anonymize=anonymize))
        except EarsrError as exc:
            raise _http_error(exc)

    @app.get("/assets/{name}")
    def get_asset(name: str):
        for store in stores.values():
            try:
                return FileResponse(store.asset_path(name), media_type="image/png")
            except EarsrError:
                continue
        # Fall back to a directory scan so assets resolve before any
        # study endpoint has been hit.
        for manifest in studies_root.glob("*/manifest.json"):
            store = store_for(manifest.parent.name)
            try:
                return FileResponse(store.asset_path(name), media_type="image/png")
            except EarsrError:
                continue
        raise HTTPException(status_code=404, detail=f"unknown asset {name!r}")

    return app
