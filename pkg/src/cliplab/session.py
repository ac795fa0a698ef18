"""Annotation session lifecycle: label intake with latest-wins semantics, the
minimum-annotation gate, building classifier versions, and the four scored
feeds (top positive, top negative, borderline, random).

Sessions persist as an append-only event log (one JSON object per line) plus
a binary score-table sidecar per snapshot; replaying the log reconstructs the
exact state.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import threading
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .corpus import CorpusHandle
from .modeling import (
    ClassifierSnapshot,
    CVConfig,
    DiversityConfig,
    LabeledSet,
    TrainConfig,
    cluster_corpus,
    data_diversity_score,
    model_quality_score,
    predict_scores,
    train,
)

MIN_POSITIVE = 10
MIN_NEGATIVE = 10

FEED_TOP_POSITIVE = "top_positive"
FEED_TOP_NEGATIVE = "top_negative"
FEED_BORDERLINE = "borderline"
FEED_RANDOM = "random"
FEED_KINDS = (FEED_TOP_POSITIVE, FEED_TOP_NEGATIVE, FEED_BORDERLINE, FEED_RANDOM)

LABEL_SOURCES = (
    "search",
    "feed_top_positive",
    "feed_top_negative",
    "feed_borderline",
    "feed_random",
    "external",
)

DEFAULT_PAGE_SIZE = 16

_SCORES_MAGIC = b"VASC"
_SCORES_HEADER = struct.Struct("<4sII")  # magic, version, rows


class UnknownClipError(KeyError):
    def __str__(self) -> str:
        return self.args[0] if self.args else ""


class GateNotMetError(RuntimeError):
    def __init__(self, message: str, need_positive: int, need_negative: int):
        super().__init__(message)
        self.need_positive = need_positive
        self.need_negative = need_negative


class BuildInProgressError(RuntimeError):
    """Another build is running for this session; safe to retry."""


class NoModelError(RuntimeError):
    """Feed requested before the first build."""


@dataclass(frozen=True)
class LabelEvent:
    clip_id: str
    value: str  # positive | negative
    source: str
    ordinal: int
    annotator_id: str = "default"


@dataclass(frozen=True)
class FeedEntry:
    clip_id: str
    score: float
    labeled_status: str  # unlabeled | positive | negative


@dataclass(frozen=True)
class FeedPage:
    kind: str
    entries: tuple[FeedEntry, ...]
    page_index: int
    page_size: int
    model_version: int
    total: int


def _normalize_submission(item: object) -> tuple[str, str, str, str]:
    if isinstance(item, LabelEvent):
        clip_id, value, source, annotator = (
            item.clip_id,
            item.value,
            item.source,
            item.annotator_id,
        )
    elif isinstance(item, dict):
        clip_id = item["clip_id"]
        value = item["value"]
        source = item.get("source", "external")
        annotator = item.get("annotator_id", "default")
    else:
        clip_id, value, source = item  # (clip_id, value, source) tuple
        annotator = "default"
    if value not in ("positive", "negative"):
        raise ValueError(f"label value must be positive|negative, got {value!r}")
    if source not in LABEL_SOURCES:
        raise ValueError(f"unknown label source: {source!r}")
    return str(clip_id), value, source, str(annotator)


class Session:
    """One label's annotation state bound to an immutable corpus."""

    def __init__(
        self,
        session_id: str,
        label_name: str,
        corpus: CorpusHandle,
        store: "SessionStore | None" = None,
    ):
        self.session_id = session_id
        self.label_name = label_name
        self.corpus = corpus
        self.corpus_digest = corpus.ingest_manifest_digest
        self.events: list[LabelEvent] = []
        self.snapshots: list[ClassifierSnapshot] = []
        self.current_scores: np.ndarray | None = None
        self._effective: dict[str, LabelEvent] = {}
        self._store = store
        self._lock = threading.Lock()
        self._build_lock = threading.Lock()
        self._feed_orders: dict[tuple[int, str], np.ndarray] = {}

    # -- labels ------------------------------------------------------------

    def submit_labels(self, submissions: Iterable[object]) -> tuple[int, int]:
        """Append label events (latest wins per clip) and return effective
        (positive, negative) counts. The whole batch is validated first."""
        normalized = [_normalize_submission(item) for item in submissions]
        for clip_id, _, _, _ in normalized:
            if clip_id not in self.corpus:
                raise UnknownClipError(f"clip {clip_id!r} is not in the corpus")
        with self._lock:
            appended = []
            for clip_id, value, source, annotator in normalized:
                event = LabelEvent(
                    clip_id=clip_id,
                    value=value,
                    source=source,
                    ordinal=len(self.events) + 1,
                    annotator_id=annotator,
                )
                self.events.append(event)
                self._effective[clip_id] = event
                appended.append(event)
            counts = self._counts_locked()
        if self._store is not None:
            for event in appended:
                self._store.append_event(self.session_id, event)
        return counts

    def _counts_locked(self) -> tuple[int, int]:
        pos = sum(1 for e in self._effective.values() if e.value == "positive")
        return pos, len(self._effective) - pos

    def counts(self) -> tuple[int, int]:
        with self._lock:
            return self._counts_locked()

    def can_build(self) -> tuple[bool, str]:
        pos, neg = self.counts()
        need_pos = max(0, MIN_POSITIVE - pos)
        need_neg = max(0, MIN_NEGATIVE - neg)
        if need_pos == 0 and need_neg == 0:
            return True, "ready"
        parts = []
        if need_pos:
            parts.append(f"need {need_pos} more positive{'s' if need_pos != 1 else ''}")
        if need_neg:
            parts.append(f"need {need_neg} more negative{'s' if need_neg != 1 else ''}")
        return False, " and ".join(parts)

    def effective_labeled_set(self) -> LabeledSet:
        """Current training data in canonical (clip_id-sorted) order."""
        with self._lock:
            items = sorted(self._effective.values(), key=lambda e: e.clip_id)
        return LabeledSet.from_items(
            (e.clip_id, self.corpus.embedding(e.clip_id), e.value) for e in items
        )

    # -- build ---------------------------------------------------------------

    def build(
        self,
        tcfg: TrainConfig = TrainConfig(),
        cv: CVConfig = CVConfig(),
        dcfg: DiversityConfig = DiversityConfig(),
    ) -> ClassifierSnapshot:
        """Train on the effective labeled set, score the whole corpus, and
        append a new snapshot version. One build at a time per session; labels
        submitted while training lands affect only the next build."""
        ok, reason = self.can_build()
        if not ok:
            pos, neg = self.counts()
            raise GateNotMetError(
                f"cannot build: {reason}",
                need_positive=max(0, MIN_POSITIVE - pos),
                need_negative=max(0, MIN_NEGATIVE - neg),
            )
        if not self._build_lock.acquire(blocking=False):
            raise BuildInProgressError("a build is already running for this session")
        try:
            data = self.effective_labeled_set()
            model = train(data, tcfg)
            quality = model_quality_score(data, tcfg, cv)
            assignments = cluster_corpus(self.corpus, dcfg)
            diversity = data_diversity_score(data, assignments, dcfg) * 100.0
            scores = predict_scores(model, self.corpus)
            with self._lock:
                version = len(self.snapshots) + 1
                snapshot = model.with_scores(quality, diversity, version)
                self.snapshots.append(snapshot)
                self.current_scores = scores
            if self._store is not None:
                self._store.append_snapshot(self.session_id, snapshot, scores)
            return snapshot
        finally:
            self._build_lock.release()

    # -- feeds ---------------------------------------------------------------

    def random_feed_seed(self, version: int) -> int:
        digest = hashlib.sha256(f"{self.session_id}:{version}".encode()).digest()
        return int.from_bytes(digest[:8], "big")

    def _feed_order(self, kind: str, version: int) -> np.ndarray:
        key = (version, kind)
        order = self._feed_orders.get(key)
        if order is not None:
            return order
        scores = self.current_scores
        rank = self.corpus.id_rank
        if kind == FEED_TOP_POSITIVE:
            order = np.lexsort((rank, -scores))
        elif kind == FEED_TOP_NEGATIVE:
            order = np.lexsort((rank, scores))
        elif kind == FEED_BORDERLINE:
            order = np.lexsort((rank, np.abs(scores - 0.5)))
        elif kind == FEED_RANDOM:
            rng = np.random.default_rng(self.random_feed_seed(version))
            order = rng.permutation(len(self.corpus))
        else:
            raise ValueError(f"unknown feed kind: {kind!r}")
        self._feed_orders[key] = order
        return order

    def get_feed(
        self, kind: str, page_index: int = 0, page_size: int = DEFAULT_PAGE_SIZE
    ) -> FeedPage:
        """One page of a feed under the latest model. Labeled clips stay in
        the ranking and are flagged through labeled_status."""
        if kind not in FEED_KINDS:
            raise ValueError(f"unknown feed kind: {kind!r}")
        if page_index < 0 or page_size < 1:
            raise ValueError("page_index must be >= 0 and page_size >= 1")
        with self._lock:
            if not self.snapshots:
                raise NoModelError("no classifier built yet; feeds need a build")
            version = self.snapshots[-1].version
            scores = self.current_scores
            effective = dict(self._effective)
        order = self._feed_order(kind, version)
        lo = page_index * page_size
        slice_ = order[lo : lo + page_size]
        entries = []
        for idx in slice_:
            clip_id = self.corpus.clips[int(idx)].clip_id
            event = effective.get(clip_id)
            entries.append(
                FeedEntry(
                    clip_id=clip_id,
                    score=float(scores[int(idx)]),
                    labeled_status=event.value if event is not None else "unlabeled",
                )
            )
        return FeedPage(
            kind=kind,
            entries=tuple(entries),
            page_index=page_index,
            page_size=page_size,
            model_version=version,
            total=len(self.corpus),
        )

    # -- review / history ------------------------------------------------------

    def review(self) -> list[dict]:
        """Every effective label, ordered by the ordinal of its latest event."""
        with self._lock:
            effective = sorted(self._effective.values(), key=lambda e: e.ordinal)
            scores = self.current_scores
        rows = []
        for event in effective:
            row = {
                "clip_id": event.clip_id,
                "value": event.value,
                "source": event.source,
                "ordinal": event.ordinal,
            }
            if scores is not None:
                row["score"] = float(scores[self.corpus.index_of(event.clip_id)])
            rows.append(row)
        return rows

    def history(self) -> list[ClassifierSnapshot]:
        with self._lock:
            return list(self.snapshots)

    # -- integrity ---------------------------------------------------------------

    def state_digest(self) -> str:
        """Content hash of the full session state, for replay verification."""
        h = hashlib.sha256()
        h.update(self.session_id.encode())
        h.update(self.label_name.encode())
        h.update(self.corpus_digest.encode())
        with self._lock:
            for e in self.events:
                h.update(
                    json.dumps(
                        [e.ordinal, e.clip_id, e.value, e.source, e.annotator_id]
                    ).encode()
                )
            for s in self.snapshots:
                h.update(
                    json.dumps(
                        [s.version, s.train_digest, s.trained_at_n],
                    ).encode()
                )
                h.update(np.ascontiguousarray(s.weights, dtype=np.float64).tobytes())
                h.update(struct.pack("<d", s.bias))
                h.update(struct.pack("<dd", s.quality_score, s.diversity_score))
            if self.current_scores is not None:
                h.update(
                    np.ascontiguousarray(self.current_scores, dtype=np.float64).tobytes()
                )
        return h.hexdigest()


def create_session(
    label_name: str,
    corpus: CorpusHandle,
    session_id: str | None = None,
    store: "SessionStore | None" = None,
) -> Session:
    """New empty session bound to the corpus digest. A deterministic
    session_id may be supplied; the default is a fresh UUID."""
    if session_id is None:
        session_id = uuid.uuid4().hex
    session = Session(session_id, label_name, corpus, store=store)
    if store is not None:
        store.append_header(session)
    return session


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def _write_scores_file(path: Path, scores: np.ndarray) -> None:
    data = np.ascontiguousarray(scores, dtype="<f8")
    with open(path, "wb") as f:
        f.write(_SCORES_HEADER.pack(_SCORES_MAGIC, 1, len(data)))
        f.write(data.tobytes())
        f.flush()
        os.fsync(f.fileno())


def _read_scores_file(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    magic, version, rows = _SCORES_HEADER.unpack_from(raw, 0)
    if magic != _SCORES_MAGIC or version != 1:
        raise ValueError(f"bad score sidecar header in {path}")
    data = np.frombuffer(raw, dtype="<f8", offset=_SCORES_HEADER.size)
    if len(data) != rows:
        raise ValueError(f"score sidecar row mismatch in {path}")
    return data.astype(np.float64, copy=True)


class SessionStore:
    """Append-only session logs under one directory, one log per session."""

    def __init__(self, data_dir: str | Path):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)

    def log_path(self, session_id: str) -> Path:
        return self.data_dir / f"{session_id}.log"

    def scores_path(self, session_id: str, version: int) -> Path:
        return self.data_dir / f"{session_id}.v{version}.scores"

    def _append_line(self, session_id: str, record: dict) -> None:
        line = json.dumps(record, sort_keys=True)
        with open(self.log_path(session_id), "a") as f:
            f.write(line + "\n")
            f.flush()
            os.fsync(f.fileno())

    def append_header(self, session: Session) -> None:
        self._append_line(
            session.session_id,
            {
                "type": "session",
                "session_id": session.session_id,
                "label_name": session.label_name,
                "corpus_digest": session.corpus_digest,
            },
        )

    def append_event(self, session_id: str, event: LabelEvent) -> None:
        self._append_line(
            session_id,
            {
                "type": "label",
                "ordinal": event.ordinal,
                "clip_id": event.clip_id,
                "value": event.value,
                "source": event.source,
                "annotator_id": event.annotator_id,
            },
        )

    def append_snapshot(
        self, session_id: str, snapshot: ClassifierSnapshot, scores: np.ndarray
    ) -> None:
        # sidecar first so the log never references a missing file
        scores_file = self.scores_path(session_id, snapshot.version)
        _write_scores_file(scores_file, scores)
        self._append_line(
            session_id,
            {
                "type": "snapshot",
                "version": snapshot.version,
                "weights": [float(w) for w in snapshot.weights],
                "bias": snapshot.bias,
                "train_digest": snapshot.train_digest,
                "quality_score": snapshot.quality_score,
                "diversity_score": snapshot.diversity_score,
                "trained_at_n": snapshot.trained_at_n,
                "scores_file": scores_file.name,
            },
        )

    def list_sessions(self) -> list[str]:
        return sorted(p.stem for p in self.data_dir.glob("*.log"))

    def load(self, session_id: str, corpus: CorpusHandle) -> Session:
        """Replay a session log into an identical SessionState."""
        path = self.log_path(session_id)
        if not path.exists():
            raise FileNotFoundError(f"no session log for {session_id!r}")
        session: Session | None = None
        latest_scores_file: str | None = None
        lines = path.read_text().splitlines()
        for lineno, line in enumerate(lines):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError:
                if lineno == len(lines) - 1:
                    break  # torn final append from a crash loses only itself
                raise
            kind = record["type"]
            if kind == "session":
                if record["corpus_digest"] != corpus.ingest_manifest_digest:
                    raise ValueError(
                        f"session {session_id!r} was recorded against a different corpus"
                    )
                session = Session(
                    record["session_id"], record["label_name"], corpus, store=self
                )
            elif session is None:
                raise ValueError(f"log for {session_id!r} does not start with a header")
            elif kind == "label":
                event = LabelEvent(
                    clip_id=record["clip_id"],
                    value=record["value"],
                    source=record["source"],
                    ordinal=record["ordinal"],
                    annotator_id=record["annotator_id"],
                )
                session.events.append(event)
                session._effective[event.clip_id] = event
            elif kind == "snapshot":
                snapshot = ClassifierSnapshot(
                    weights=np.array(record["weights"], dtype=np.float64),
                    bias=float(record["bias"]),
                    version=int(record["version"]),
                    train_digest=record["train_digest"],
                    trained_at_n=int(record["trained_at_n"]),
                    quality_score=record["quality_score"],
                    diversity_score=record["diversity_score"],
                )
                session.snapshots.append(snapshot)
                latest_scores_file = record["scores_file"]
            else:
                raise ValueError(f"unknown record type {kind!r} in {path}")
        if session is None:
            raise ValueError(f"empty session log: {path}")
        if latest_scores_file is not None:
            session.current_scores = _read_scores_file(
                self.data_dir / latest_scores_file
            )
        return session
