"""HTTP JSON API over the corpus and annotation sessions, for the browser UI.

Every mutation is durably appended to the session log before the response is
sent; replaying the logs after a restart reproduces the exact state.
"""

from __future__ import annotations

import copy
import json
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from . import bandit
from .corpus import (
    CorpusError,
    CorpusHandle,
    LookupQueryEncoder,
    UnknownQueryError,
    ingest_corpus,
    search,
)
from .modeling import (
    CVConfig,
    DiversityConfig,
    InsufficientClassCountError,
    SingleClassError,
    TrainConfig,
)
from .session import (
    BuildInProgressError,
    GateNotMetError,
    NoModelError,
    Session,
    SessionStore,
    UnknownClipError,
    create_session,
)


@dataclass(frozen=True)
class ServiceConfig:
    manifest_path: str
    data_dir: str
    listen_address: str = "127.0.0.1:8321"
    query_embeddings_path: str | None = None
    query_texts_path: str | None = None
    dedup_threshold: float | None = None
    page_size: int = 16
    thumbnail_dir: str | None = None
    recommend_sources: bool = False
    train: TrainConfig = TrainConfig()
    cv: CVConfig = CVConfig()
    diversity: DiversityConfig = DiversityConfig()

    @classmethod
    def from_file(cls, path: str | Path) -> "ServiceConfig":
        raw = json.loads(Path(path).read_text())
        raw["train"] = TrainConfig(**raw.get("train", {}))
        raw["cv"] = CVConfig(**raw.get("cv", {}))
        raw["diversity"] = DiversityConfig(**raw.get("diversity", {}))
        cfg = cls(**raw)
        # env overrides for deploy-time knobs
        listen = os.environ.get("CLIPLAB_LISTEN")
        data_dir = os.environ.get("CLIPLAB_DATA_DIR")
        if listen or data_dir:
            cfg = dataclass_replace(
                cfg,
                listen_address=listen or cfg.listen_address,
                data_dir=data_dir or cfg.data_dir,
            )
        return cfg


def dataclass_replace(cfg: ServiceConfig, **changes) -> ServiceConfig:
    from dataclasses import replace

    return replace(cfg, **changes)


class ApiError(Exception):
    """Error with a stable machine code the UI can switch on."""

    def __init__(self, status: int, code: str, message: str, retriable: bool = False,
                 extra: dict | None = None):
        super().__init__(message)
        self.status = status
        self.code = code
        self.retriable = retriable
        self.extra = extra or {}

    def response(self) -> JSONResponse:
        body = {"code": self.code, "message": str(self), "retriable": self.retriable}
        body.update(self.extra)
        return JSONResponse(status_code=self.status, content=body)


class LabelIn(BaseModel):
    clip_id: str
    value: str
    source: str = "external"
    annotator_id: str = "default"


class SessionIn(BaseModel):
    label_name: str


class _Workspace:
    """Everything the endpoints share."""

    def __init__(self, cfg: ServiceConfig):
        self.cfg = cfg
        self.corpus: CorpusHandle = ingest_corpus(cfg.manifest_path, cfg.dedup_threshold)
        self.encoder: LookupQueryEncoder | None = None
        if cfg.query_embeddings_path and cfg.query_texts_path:
            self.encoder = LookupQueryEncoder.from_files(
                cfg.query_embeddings_path, cfg.query_texts_path
            )
        self.store = SessionStore(cfg.data_dir)
        self.sessions: dict[str, Session] = {}
        self.bandits: dict[str, bandit.BanditState] = {}
        self.last_quality: dict[str, float] = {}
        self.pending_sources: dict[str, list[str]] = {}
        self._lock = threading.Lock()
        for session_id in self.store.list_sessions():
            self.sessions[session_id] = self.store.load(session_id, self.corpus)

    def session(self, session_id: str) -> Session:
        try:
            return self.sessions[session_id]
        except KeyError:
            raise ApiError(404, "unknown_session", f"no session {session_id!r}")

    def thumbnail_url(self, clip_id: str) -> str | None:
        if not self.cfg.thumbnail_dir:
            return None
        candidate = Path(self.cfg.thumbnail_dir) / f"{clip_id}.jpg"
        return f"/thumbnails/{clip_id}.jpg" if candidate.exists() else None


_ARM_BY_SOURCE = {
    "search": bandit.SOURCE_ZERO_SHOT,
    "feed_random": bandit.SOURCE_RANDOM,
    "feed_top_positive": bandit.SOURCE_INTERACTIVE,
    "feed_top_negative": bandit.SOURCE_INTERACTIVE,
    "feed_borderline": bandit.SOURCE_INTERACTIVE,
    "external": bandit.SOURCE_INTERACTIVE,
}


def create_app(cfg: ServiceConfig) -> FastAPI:
    ws = _Workspace(cfg)
    app = FastAPI(title="cliplab annotation service")
    app.state.workspace = ws

    if cfg.thumbnail_dir:
        app.mount("/thumbnails", StaticFiles(directory=cfg.thumbnail_dir), name="thumbnails")

    @app.exception_handler(ApiError)
    async def api_error_handler(request: Request, exc: ApiError):
        return exc.response()

    @app.get("/healthz")
    def healthz():
        return {
            "status": "ok",
            "corpus_digest": ws.corpus.ingest_manifest_digest,
            "clips": len(ws.corpus),
        }

    @app.get("/search")
    def search_endpoint(q: str, m: int = 16):
        if ws.encoder is None:
            raise ApiError(404, "search_disabled", "no query encoder configured")
        try:
            query = ws.encoder.encode(q)
        except UnknownQueryError:
            raise ApiError(404, "unknown_query", f"no embedding for query: {q!r}")
        if m < 1:
            raise ApiError(400, "invalid_request", "m must be >= 1")
        results = []
        for clip_id, similarity in search(ws.corpus, query, top_m=m):
            clip = ws.corpus.clip(clip_id)
            results.append(
                {
                    "clip_id": clip_id,
                    "similarity": similarity,
                    "video_id": clip.video_id,
                    "start_s": clip.start_s,
                    "end_s": clip.end_s,
                    "thumbnail_url": ws.thumbnail_url(clip_id),
                }
            )
        return {"query": q, "results": results}

    @app.post("/sessions", status_code=201)
    def create_session_endpoint(body: SessionIn):
        session = create_session(body.label_name, ws.corpus, store=ws.store)
        with ws._lock:
            ws.sessions[session.session_id] = session
            if cfg.recommend_sources:
                ws.bandits[session.session_id] = bandit.init(
                    [0.0, 0.0, 0.0], 0.0, bandit.BanditConfig()
                )
                ws.pending_sources[session.session_id] = []
        return {"session_id": session.session_id, "label_name": session.label_name}

    @app.get("/sessions")
    def list_sessions_endpoint():
        with ws._lock:
            rows = [
                {
                    "session_id": s.session_id,
                    "label_name": s.label_name,
                    "versions": len(s.snapshots),
                }
                for s in ws.sessions.values()
            ]
        return {"sessions": sorted(rows, key=lambda r: r["session_id"])}

    @app.post("/sessions/{session_id}/labels")
    def submit_labels_endpoint(session_id: str, body: list[LabelIn]):
        session = ws.session(session_id)
        try:
            pos, neg = session.submit_labels([item.model_dump() for item in body])
        except UnknownClipError as exc:
            raise ApiError(404, "unknown_clip", str(exc))
        except ValueError as exc:
            raise ApiError(400, "invalid_request", str(exc))
        if cfg.recommend_sources:
            with ws._lock:
                ws.pending_sources.setdefault(session_id, []).extend(
                    item.source for item in body
                )
        ok, reason = session.can_build()
        return {"positive": pos, "negative": neg, "can_build": ok, "reason": reason}

    @app.post("/sessions/{session_id}/build")
    def build_endpoint(session_id: str):
        session = ws.session(session_id)
        try:
            snapshot = session.build(cfg.train, cfg.cv, cfg.diversity)
        except GateNotMetError as exc:
            raise ApiError(
                412,
                "gate_not_met",
                str(exc),
                extra={
                    "need_positive": exc.need_positive,
                    "need_negative": exc.need_negative,
                },
            )
        except BuildInProgressError as exc:
            raise ApiError(409, "build_in_flight", str(exc), retriable=True)
        except (SingleClassError, InsufficientClassCountError) as exc:
            raise ApiError(422, "training_failed", str(exc))
        if cfg.recommend_sources:
            _observe_build(ws, session_id, snapshot.quality_score)
        return {
            "version": snapshot.version,
            "quality_score": snapshot.quality_score,
            "diversity_score": snapshot.diversity_score,
            "train_size": snapshot.trained_at_n,
        }

    @app.get("/sessions/{session_id}/feeds/{kind}")
    def feed_endpoint(session_id: str, kind: str, page: int = 0, size: int | None = None):
        session = ws.session(session_id)
        try:
            feed = session.get_feed(kind, page, size or cfg.page_size)
        except NoModelError as exc:
            raise ApiError(412, "no_model", str(exc))
        except ValueError as exc:
            raise ApiError(400, "invalid_request", str(exc))
        return {
            "kind": feed.kind,
            "page_index": feed.page_index,
            "page_size": feed.page_size,
            "model_version": feed.model_version,
            "total": feed.total,
            "entries": [
                {
                    "clip_id": e.clip_id,
                    "score": e.score,
                    "labeled_status": e.labeled_status,
                    "thumbnail_url": ws.thumbnail_url(e.clip_id),
                }
                for e in feed.entries
            ],
        }

    @app.get("/sessions/{session_id}/review")
    def review_endpoint(session_id: str):
        return {"labels": ws.session(session_id).review()}

    @app.get("/sessions/{session_id}/history")
    def history_endpoint(session_id: str):
        return {
            "snapshots": [
                {
                    "version": s.version,
                    "quality_score": s.quality_score,
                    "diversity_score": s.diversity_score,
                    "train_size": s.trained_at_n,
                }
                for s in ws.session(session_id).history()
            ]
        }

    @app.get("/clips/{clip_id}")
    def clip_endpoint(clip_id: str):
        try:
            clip = ws.corpus.clip(clip_id)
        except KeyError:
            raise ApiError(404, "unknown_clip", f"clip {clip_id!r} is not in the corpus")
        return {
            "clip_id": clip.clip_id,
            "video_id": clip.video_id,
            "start_s": clip.start_s,
            "end_s": clip.end_s,
            "thumbnail_url": ws.thumbnail_url(clip_id),
        }

    @app.get("/sessions/{session_id}/recommendation")
    def recommendation_endpoint(session_id: str):
        if not cfg.recommend_sources:
            raise ApiError(404, "feature_disabled", "source recommendation is off")
        ws.session(session_id)  # 404 on unknown
        with ws._lock:
            state = ws.bandits.get(session_id)
            if state is None:
                state = bandit.init([0.0, 0.0, 0.0], 0.0, bandit.BanditConfig())
                ws.bandits[session_id] = state
            peek = copy.deepcopy(state)
        recommended = bandit.select(peek, bandit.BanditConfig())
        return {"recommended_source": recommended, "scores": dict(zip(peek.sources, peek.scores))}

    return app


def _observe_build(ws: _Workspace, session_id: str, quality_score: float) -> None:
    """Attribute the quality change since the previous build to the dominant
    source of labels submitted in between, and update the session's bandit."""
    with ws._lock:
        state = ws.bandits.get(session_id)
        if state is None:
            return
        sources = ws.pending_sources.get(session_id, [])
        ws.pending_sources[session_id] = []
    arms = [_ARM_BY_SOURCE.get(s, bandit.SOURCE_INTERACTIVE) for s in sources]
    if arms:
        dominant = max(bandit.SOURCES, key=lambda a: (arms.count(a), -bandit.SOURCES.index(a)))
    else:
        dominant = bandit.SOURCE_INTERACTIVE
    bandit.record_oracle_step(state, dominant, quality_score / 100.0)


def serve(cfg: ServiceConfig) -> None:
    """Run the service until interrupted."""
    import uvicorn

    host, port = cfg.listen_address.rsplit(":", 1)
    uvicorn.run(create_app(cfg), host=host, port=int(port))
