"""Clip corpus: binary embedding files, validated ingestion with near-duplicate
removal, and exact cosine-similarity search.

Embeddings are L2-normalized once at ingestion so that cosine similarity is a
plain dot product everywhere downstream.
"""

from __future__ import annotations

import hashlib
import json
import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EMBEDDING_MAGIC = b"VAEB"
EMBEDDING_FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")  # magic, version, rows, dim

DEFAULT_DEDUP_THRESHOLD = 0.95


class CorpusError(ValueError):
    """Corpus file or manifest failed validation."""


class EmptyCorpusError(CorpusError):
    """Search requested against a corpus with no clips."""


class UnknownQueryError(KeyError):
    """Lookup-table encoder has no embedding for the query text."""

    def __str__(self) -> str:  # KeyError repr-quotes its message
        return self.args[0] if self.args else ""


# ---------------------------------------------------------------------------
# Embedding file format
# ---------------------------------------------------------------------------

def write_embedding_file(path: str | Path, vectors: np.ndarray) -> None:
    """Write a 2-D float array as a little-endian binary embedding file.

    Layout: magic "VAEB", u32 version, u32 row count, u32 dimension, then
    row-major float32 values.
    """
    arr = np.asarray(vectors, dtype=np.float32)
    if arr.ndim != 2:
        raise CorpusError(f"embedding array must be 2-D, got shape {arr.shape}")
    rows, dim = arr.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(EMBEDDING_MAGIC, EMBEDDING_FORMAT_VERSION, rows, dim))
        f.write(arr.astype("<f4", copy=False).tobytes(order="C"))


def read_embedding_file(path: str | Path) -> np.ndarray:
    """Read a binary embedding file into a float32 array of shape (rows, dim)."""
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise CorpusError(f"embedding file not found: {path}") from exc
    if len(raw) < _HEADER.size:
        raise CorpusError(f"embedding file too short: {path}")
    magic, version, rows, dim = _HEADER.unpack_from(raw, 0)
    if magic != EMBEDDING_MAGIC:
        raise CorpusError(f"bad magic {magic!r} in {path}")
    if version != EMBEDDING_FORMAT_VERSION:
        raise CorpusError(f"unsupported embedding file version {version}")
    expected = _HEADER.size + rows * dim * 4
    if len(raw) != expected:
        raise CorpusError(
            f"embedding file size mismatch: expected {expected} bytes, got {len(raw)}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    return data.reshape(rows, dim).astype(np.float32, copy=True)


# ---------------------------------------------------------------------------
# Vectors
# ---------------------------------------------------------------------------

def normalize(vector: np.ndarray) -> np.ndarray:
    """Return the unit-length float32 copy of a single vector."""
    v = np.asarray(vector, dtype=np.float64)
    if v.ndim != 1:
        raise CorpusError(f"expected 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise CorpusError("non-finite values in embedding")
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise CorpusError("zero-norm embedding cannot be normalized")
    return (v / norm).astype(np.float32)


def normalize_rows(matrix: np.ndarray) -> np.ndarray:
    """L2-normalize every row; rejects non-finite and zero-norm rows."""
    m = np.asarray(matrix, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        bad = int(np.where(~np.isfinite(m).all(axis=1))[0][0])
        raise CorpusError(f"non-finite values in embedding row {bad}")
    norms = np.linalg.norm(m, axis=1)
    if np.any(norms == 0.0):
        bad = int(np.where(norms == 0.0)[0][0])
        raise CorpusError(f"zero-norm embedding row {bad}")
    return (m / norms[:, None]).astype(np.float32)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two unit vectors (their dot product), in [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.clip(np.dot(a, b), -1.0, 1.0))


# ---------------------------------------------------------------------------
# Corpus
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClipRecord:
    """One shot/clip: identity, source video, time span, embedding row index."""

    clip_id: str
    video_id: str
    start_s: float
    end_s: float
    row: int  # index into CorpusHandle.embeddings


@dataclass(frozen=True)
class CorpusHandle:
    """Immutable ingested corpus; safe for concurrent reads."""

    clips: tuple[ClipRecord, ...]
    embeddings: np.ndarray  # (n_clips, dimension) float32, unit rows
    dimension: int
    ingest_manifest_digest: str
    _id_index: dict[str, int] = field(repr=False, default_factory=dict)
    _id_rank: np.ndarray = field(repr=False, default=None)

    def __post_init__(self) -> None:
        self.embeddings.setflags(write=False)
        index = {c.clip_id: i for i, c in enumerate(self.clips)}
        object.__setattr__(self, "_id_index", index)
        # rank of each row when clip_ids are sorted ascending, for tie-breaks
        ids = np.array([c.clip_id for c in self.clips])
        rank = np.empty(len(ids), dtype=np.int64)
        rank[np.argsort(ids, kind="stable")] = np.arange(len(ids))
        rank.setflags(write=False)
        object.__setattr__(self, "_id_rank", rank)

    def __len__(self) -> int:
        return len(self.clips)

    def __contains__(self, clip_id: str) -> bool:
        return clip_id in self._id_index

    def index_of(self, clip_id: str) -> int:
        try:
            return self._id_index[clip_id]
        except KeyError:
            raise KeyError(f"unknown clip_id: {clip_id}") from None

    def clip(self, clip_id: str) -> ClipRecord:
        return self.clips[self.index_of(clip_id)]

    def embedding(self, clip_id: str) -> np.ndarray:
        return self.embeddings[self.index_of(clip_id)]

    @property
    def clip_ids(self) -> tuple[str, ...]:
        return tuple(c.clip_id for c in self.clips)

    @property
    def id_rank(self) -> np.ndarray:
        """Per-row rank under ascending clip_id order."""
        return self._id_rank


def load_manifest(manifest_path: str | Path) -> dict:
    path = Path(manifest_path)
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise CorpusError(f"manifest not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise CorpusError(f"manifest is not valid JSON: {path}") from exc
    for key in ("embeddings", "metadata"):
        if key not in manifest:
            raise CorpusError(f"manifest missing required key {key!r}")
    return manifest


def _read_metadata_jsonl(path: Path) -> list[dict]:
    try:
        text = path.read_text()
    except FileNotFoundError as exc:
        raise CorpusError(f"clip metadata file not found: {path}") from exc
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"bad JSON on line {lineno} of {path}") from exc
        records.append(rec)
    return records


def write_metadata_jsonl(path: str | Path, records: list[dict]) -> None:
    """Write clip metadata, one JSON object per line, paired row-wise with the
    embedding file."""
    lines = [
        json.dumps(
            {
                "clip_id": r["clip_id"],
                "video_id": r["video_id"],
                "start_s": r["start_s"],
                "end_s": r["end_s"],
            },
            sort_keys=True,
        )
        for r in records
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def ingest_corpus(
    manifest_path: str | Path,
    dedup_threshold: float | None = None,
) -> CorpusHandle:
    """Load, validate, normalize, deduplicate, and index a clip corpus.

    The manifest is JSON with keys "embeddings" and "metadata" (paths resolved
    relative to the manifest) and an optional "dedup_threshold". An explicit
    `dedup_threshold` argument overrides the manifest value. When a threshold
    is set, clips within the same video whose cosine similarity to an
    earlier-retained clip of that video exceeds it are dropped; "earlier"
    means first under (start_s, clip_id) order. Clips are returned ordered by
    (video_id, start_s, clip_id).
    """
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    base = manifest_path.parent
    emb_path = base / manifest["embeddings"]
    meta_path = base / manifest["metadata"]

    if dedup_threshold is None:
        dedup_threshold = manifest.get("dedup_threshold")
    if dedup_threshold is not None and not (0.0 < dedup_threshold <= 1.0):
        raise CorpusError(f"dedup_threshold must be in (0, 1], got {dedup_threshold}")

    vectors = read_embedding_file(emb_path)
    records = _read_metadata_jsonl(meta_path)
    if vectors.shape[0] != len(records):
        raise CorpusError(
            f"row count mismatch: {vectors.shape[0]} embeddings vs "
            f"{len(records)} metadata rows"
        )
    if vectors.shape[1] < 2:
        raise CorpusError(f"embedding dimension must be >= 2, got {vectors.shape[1]}")

    seen: set[str] = set()
    clips: list[ClipRecord] = []
    for i, rec in enumerate(records):
        try:
            clip = ClipRecord(
                clip_id=str(rec["clip_id"]),
                video_id=str(rec["video_id"]),
                start_s=float(rec["start_s"]),
                end_s=float(rec["end_s"]),
                row=i,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CorpusError(f"bad metadata row {i}: {rec!r}") from exc
        if clip.clip_id in seen:
            raise CorpusError(f"duplicate clip_id: {clip.clip_id}")
        if clip.start_s < 0 or clip.end_s <= clip.start_s:
            raise CorpusError(
                f"bad time span for {clip.clip_id}: [{clip.start_s}, {clip.end_s}]"
            )
        seen.add(clip.clip_id)
        clips.append(clip)

    vectors = normalize_rows(vectors)

    clips.sort(key=lambda c: (c.video_id, c.start_s, c.clip_id))
    if dedup_threshold is not None:
        clips = _dedup_within_videos(clips, vectors, dedup_threshold)

    embeddings = np.ascontiguousarray(vectors[[c.row for c in clips]])
    ordered = tuple(
        ClipRecord(c.clip_id, c.video_id, c.start_s, c.end_s, row=i)
        for i, c in enumerate(clips)
    )

    digest = _ingest_digest(manifest_path, emb_path, meta_path, dedup_threshold)
    return CorpusHandle(
        clips=ordered,
        embeddings=embeddings,
        dimension=int(embeddings.shape[1]),
        ingest_manifest_digest=digest,
    )


def _dedup_within_videos(
    clips: list[ClipRecord], vectors: np.ndarray, threshold: float
) -> list[ClipRecord]:
    # clips arrive sorted by (video_id, start_s, clip_id); greedy keeps the
    # earliest clip and drops later near-duplicates of the same video
    retained: list[ClipRecord] = []
    kept_rows: list[int] = []
    current_video: str | None = None
    for clip in clips:
        if clip.video_id != current_video:
            current_video = clip.video_id
            kept_rows = []
        if kept_rows:
            sims = vectors[kept_rows] @ vectors[clip.row]
            if float(sims.max()) > threshold:
                continue
        kept_rows.append(clip.row)
        retained.append(clip)
    return retained


def _ingest_digest(
    manifest_path: Path,
    emb_path: Path,
    meta_path: Path,
    dedup_threshold: float | None,
) -> str:
    h = hashlib.sha256()
    for p in (manifest_path, emb_path, meta_path):
        h.update(p.read_bytes())
    h.update(repr(dedup_threshold).encode())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Search
# ---------------------------------------------------------------------------

def search(
    corpus: CorpusHandle, query: np.ndarray, top_m: int
) -> list[tuple[str, float]]:
    """Exact exhaustive cosine search, descending similarity, ties broken by
    ascending clip_id. `top_m` larger than the corpus returns the full ranking."""
    if len(corpus) == 0:
        raise EmptyCorpusError("cannot search an empty corpus")
    if top_m < 1:
        raise ValueError(f"top_m must be >= 1, got {top_m}")
    q = np.asarray(query, dtype=np.float32)
    if q.shape != (corpus.dimension,):
        raise ValueError(
            f"query dimension {q.shape} does not match corpus ({corpus.dimension},)"
        )
    sims = np.clip((corpus.embeddings @ q).astype(np.float64), -1.0, 1.0)
    order = np.lexsort((corpus.id_rank, -sims))
    top = order[: min(top_m, len(corpus))]
    return [(corpus.clips[i].clip_id, float(sims[i])) for i in top]


# ---------------------------------------------------------------------------
# Query encoding
# ---------------------------------------------------------------------------

class QueryEncoder(ABC):
    """Text to unit embedding, same dimension as the corpus."""

    @abstractmethod
    def encode(self, text: str) -> np.ndarray:
        ...


class LookupQueryEncoder(QueryEncoder):
    """Default encoder backed by a precomputed query-embedding file plus a
    parallel text file with one query string per line. Unknown queries raise
    UnknownQueryError, never return a zero vector."""

    def __init__(self, table: dict[str, np.ndarray]):
        self._table = {k: normalize(v) for k, v in table.items()}

    @classmethod
    def from_files(
        cls, embeddings_path: str | Path, queries_path: str | Path
    ) -> "LookupQueryEncoder":
        vectors = read_embedding_file(embeddings_path)
        try:
            lines = Path(queries_path).read_text().splitlines()
        except FileNotFoundError as exc:
            raise CorpusError(f"query text file not found: {queries_path}") from exc
        texts = [line.strip() for line in lines if line.strip()]
        if len(texts) != vectors.shape[0]:
            raise CorpusError(
                f"query count mismatch: {len(texts)} strings vs "
                f"{vectors.shape[0]} embedding rows"
            )
        return cls(dict(zip(texts, vectors)))

    @property
    def queries(self) -> tuple[str, ...]:
        return tuple(self._table)

    def encode(self, text: str) -> np.ndarray:
        key = text.strip()
        if key not in self._table:
            raise UnknownQueryError(f"no embedding for query: {text!r}")
        return self._table[key]
