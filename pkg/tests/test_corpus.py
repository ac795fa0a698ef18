import json
import math

import numpy as np
import pytest

from cliplab.corpus import (
    CorpusError,
    EmptyCorpusError,
    LookupQueryEncoder,
    UnknownQueryError,
    cosine_similarity,
    ingest_corpus,
    normalize,
    read_embedding_file,
    search,
    write_embedding_file,
)

from conftest import build_corpus_files, random_unit_vectors


# ---------------------------------------------------------------------------
# Embedding file format
# ---------------------------------------------------------------------------

def test_embedding_file_round_trip(tmp_path):
    vectors = random_unit_vectors(13, 6, seed=1).astype(np.float32)
    path = tmp_path / "v.emb"
    write_embedding_file(path, vectors)
    back = read_embedding_file(path)
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back, vectors)


def test_embedding_file_header_layout(tmp_path):
    path = tmp_path / "v.emb"
    write_embedding_file(path, np.zeros((2, 3), dtype=np.float32))
    raw = path.read_bytes()
    assert raw[:4] == b"VAEB"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 2
    assert int.from_bytes(raw[12:16], "little") == 3
    assert len(raw) == 16 + 2 * 3 * 4


def test_embedding_file_bad_magic(tmp_path):
    path = tmp_path / "v.emb"
    write_embedding_file(path, np.zeros((1, 2), dtype=np.float32))
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(CorpusError, match="magic"):
        read_embedding_file(path)


def test_embedding_file_truncated(tmp_path):
    path = tmp_path / "v.emb"
    write_embedding_file(path, np.zeros((4, 4), dtype=np.float32))
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])
    with pytest.raises(CorpusError, match="size mismatch"):
        read_embedding_file(path)


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

def test_ingest_identity_pass_through(tmp_path):
    vectors = random_unit_vectors(3, 4, seed=2)
    manifest = build_corpus_files(tmp_path, vectors)
    handle = ingest_corpus(manifest)
    assert len(handle) == 3
    assert handle.dimension == 4


def test_ingest_normalizes_rows(tmp_path):
    vectors = np.array([[3.0, 4.0, 0.0], [0.0, 0.0, 5.0]])
    manifest = build_corpus_files(tmp_path, vectors)
    handle = ingest_corpus(manifest)
    norms = np.linalg.norm(handle.embeddings.astype(np.float64), axis=1)
    assert np.all(np.abs(norms - 1.0) <= 1e-6)


def test_ingest_rejects_nan_row(tmp_path):
    vectors = np.array([[1.0, 0.0], [np.nan, 1.0]])
    manifest = build_corpus_files(tmp_path, vectors)
    with pytest.raises(CorpusError, match="non-finite"):
        ingest_corpus(manifest)


def test_ingest_rejects_zero_norm_row(tmp_path):
    vectors = np.array([[1.0, 0.0], [0.0, 0.0]])
    manifest = build_corpus_files(tmp_path, vectors)
    with pytest.raises(CorpusError, match="zero-norm"):
        ingest_corpus(manifest)


def test_ingest_rejects_duplicate_clip_id(tmp_path):
    vectors = random_unit_vectors(2, 3, seed=3)
    metadata = [
        {"clip_id": "c1", "video_id": "v", "start_s": 0.0, "end_s": 1.0},
        {"clip_id": "c1", "video_id": "v", "start_s": 1.0, "end_s": 2.0},
    ]
    manifest = build_corpus_files(tmp_path, vectors, metadata)
    with pytest.raises(CorpusError, match="duplicate clip_id"):
        ingest_corpus(manifest)


def test_ingest_rejects_row_count_mismatch(tmp_path):
    vectors = random_unit_vectors(3, 3, seed=4)
    metadata = [
        {"clip_id": "c1", "video_id": "v", "start_s": 0.0, "end_s": 1.0},
    ]
    manifest = build_corpus_files(tmp_path, vectors, metadata)
    with pytest.raises(CorpusError, match="row count mismatch"):
        ingest_corpus(manifest)


def test_ingest_rejects_bad_time_span(tmp_path):
    vectors = random_unit_vectors(1, 3, seed=5)
    metadata = [{"clip_id": "c1", "video_id": "v", "start_s": 2.0, "end_s": 2.0}]
    manifest = build_corpus_files(tmp_path, vectors, metadata)
    with pytest.raises(CorpusError, match="time span"):
        ingest_corpus(manifest)


def test_ingest_rejects_missing_files(tmp_path):
    manifest_path = tmp_path / "m.json"
    manifest_path.write_text(json.dumps({"embeddings": "no.emb", "metadata": "no.jsonl"}))
    with pytest.raises(CorpusError, match="not found"):
        ingest_corpus(manifest_path)


def test_ingest_rejects_dimension_below_two(tmp_path):
    manifest = build_corpus_files(tmp_path, np.ones((2, 1)))
    with pytest.raises(CorpusError, match="dimension"):
        ingest_corpus(manifest)


def test_ingest_orders_by_video_start_clip(tmp_path):
    vectors = random_unit_vectors(4, 3, seed=6)
    metadata = [
        {"clip_id": "d", "video_id": "v2", "start_s": 0.0, "end_s": 1.0},
        {"clip_id": "c", "video_id": "v1", "start_s": 5.0, "end_s": 6.0},
        {"clip_id": "b", "video_id": "v1", "start_s": 1.0, "end_s": 2.0},
        {"clip_id": "a", "video_id": "v1", "start_s": 1.0, "end_s": 3.0},
    ]
    manifest = build_corpus_files(tmp_path, vectors, metadata)
    handle = ingest_corpus(manifest)
    assert handle.clip_ids == ("a", "b", "c", "d")
    # embeddings follow their clips through the reorder
    np.testing.assert_allclose(
        handle.embedding("d"),
        normalize(vectors[0]),
        atol=1e-7,
    )


def test_ingest_digest_deterministic(tmp_path):
    vectors = random_unit_vectors(5, 4, seed=8)
    m1 = build_corpus_files(tmp_path / "a", vectors)
    m2 = build_corpus_files(tmp_path / "b", vectors)
    h1, h2 = ingest_corpus(m1), ingest_corpus(m2)
    assert h1.ingest_manifest_digest == h2.ingest_manifest_digest
    assert h1.clip_ids == h2.clip_ids


def test_ingest_digest_reflects_dedup_threshold(tmp_path):
    vectors = random_unit_vectors(5, 4, seed=8)
    manifest = build_corpus_files(tmp_path, vectors)
    assert (
        ingest_corpus(manifest).ingest_manifest_digest
        != ingest_corpus(manifest, dedup_threshold=0.99).ingest_manifest_digest
    )


# ---------------------------------------------------------------------------
# Near-duplicate removal
# ---------------------------------------------------------------------------

def _near_parallel_pair(cos: float) -> np.ndarray:
    theta = math.acos(cos)
    return np.array([[1.0, 0.0], [math.cos(theta), math.sin(theta)]])


def test_dedup_drops_near_duplicate_within_video(tmp_path):
    vectors = _near_parallel_pair(0.99)
    metadata = [
        {"clip_id": "c1", "video_id": "v", "start_s": 0.0, "end_s": 1.0},
        {"clip_id": "c2", "video_id": "v", "start_s": 1.0, "end_s": 2.0},
    ]
    manifest = build_corpus_files(tmp_path, vectors, metadata)
    handle = ingest_corpus(manifest, dedup_threshold=0.95)
    assert handle.clip_ids == ("c1",)  # earliest retained


def test_dedup_keeps_distinct_videos(tmp_path):
    vectors = _near_parallel_pair(0.99)
    metadata = [
        {"clip_id": "c1", "video_id": "v1", "start_s": 0.0, "end_s": 1.0},
        {"clip_id": "c2", "video_id": "v2", "start_s": 0.0, "end_s": 1.0},
    ]
    manifest = build_corpus_files(tmp_path, vectors, metadata)
    handle = ingest_corpus(manifest, dedup_threshold=0.95)
    assert len(handle) == 2


def test_dedup_threshold_not_exceeded_keeps_both(tmp_path):
    vectors = _near_parallel_pair(0.90)
    metadata = [
        {"clip_id": "c1", "video_id": "v", "start_s": 0.0, "end_s": 1.0},
        {"clip_id": "c2", "video_id": "v", "start_s": 1.0, "end_s": 2.0},
    ]
    manifest = build_corpus_files(tmp_path, vectors, metadata)
    handle = ingest_corpus(manifest, dedup_threshold=0.95)
    assert len(handle) == 2


def test_dedup_threshold_from_manifest(tmp_path):
    vectors = _near_parallel_pair(0.99)
    metadata = [
        {"clip_id": "c1", "video_id": "v", "start_s": 0.0, "end_s": 1.0},
        {"clip_id": "c2", "video_id": "v", "start_s": 1.0, "end_s": 2.0},
    ]
    manifest = build_corpus_files(tmp_path, vectors, metadata, dedup_threshold=0.95)
    assert len(ingest_corpus(manifest)) == 1


def test_dedup_monotone_in_threshold(tmp_path):
    rng = np.random.default_rng(11)
    base = rng.normal(size=(6, 5))
    # a few near-duplicates of row 0 at varying closeness
    vectors = np.vstack([base, base[0] + 0.02 * rng.normal(size=(4, 5))])
    metadata = [
        {"clip_id": f"c{i}", "video_id": "v", "start_s": float(i), "end_s": float(i) + 1}
        for i in range(len(vectors))
    ]
    counts = []
    for i, threshold in enumerate([0.999, 0.99, 0.9, 0.5, 0.1]):
        manifest = build_corpus_files(tmp_path / str(i), vectors, metadata)
        counts.append(len(ingest_corpus(manifest, dedup_threshold=threshold)))
    assert counts == sorted(counts, reverse=True)


# ---------------------------------------------------------------------------
# Cosine similarity
# ---------------------------------------------------------------------------

def test_cosine_identical_unit_vector():
    v = normalize(np.array([0.3, -0.4, 0.5]))
    assert cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-9)


def test_cosine_orthogonal():
    assert cosine_similarity(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0


def test_cosine_45_degrees():
    v = normalize(np.array([1.0, 1.0]))
    assert cosine_similarity(np.array([1.0, 0.0]), v) == pytest.approx(
        0.70710678, abs=1e-6
    )


def test_cosine_symmetric_and_bounded():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = normalize(rng.normal(size=6))
        b = normalize(rng.normal(size=6))
        assert cosine_similarity(a, b) == cosine_similarity(b, a)
        assert -1.0 <= cosine_similarity(a, b) <= 1.0


def test_cosine_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension mismatch"):
        cosine_similarity(np.array([1.0, 0.0]), np.array([1.0, 0.0, 0.0]))


# ---------------------------------------------------------------------------
# Search
# ---------------------------------------------------------------------------

def test_search_self_query_ranks_first(small_corpus):
    target = small_corpus.clips[17]
    results = search(small_corpus, small_corpus.embeddings[17], top_m=5)
    assert results[0][0] == target.clip_id
    assert results[0][1] == pytest.approx(1.0, abs=1e-6)


def test_search_top_m_clamped(small_corpus):
    results = search(small_corpus, small_corpus.embeddings[0], top_m=10_000)
    assert len(results) == len(small_corpus)


def test_search_matches_brute_force_oracle(tmp_path):
    # oracle: python sort over all cosines, ties by clip_id ascending
    for seed in (0, 1, 2):
        vectors = random_unit_vectors(100, 6, seed=seed)
        manifest = build_corpus_files(tmp_path / str(seed), vectors)
        handle = ingest_corpus(manifest)
        query = random_unit_vectors(1, 6, seed=seed + 100)[0]
        expected = sorted(
            (
                (clip.clip_id, float(np.dot(handle.embeddings[i], query)))
                for i, clip in enumerate(handle.clips)
            ),
            key=lambda pair: (-pair[1], pair[0]),
        )
        got = search(handle, query, top_m=len(handle))
        assert [c for c, _ in got] == [c for c, _ in expected]
        np.testing.assert_allclose(
            [s for _, s in got], [s for _, s in expected], atol=1e-6
        )


def test_search_prefix_property_larger_corpus(tmp_path):
    vectors = random_unit_vectors(1000, 5, seed=42)
    manifest = build_corpus_files(tmp_path, vectors)
    handle = ingest_corpus(manifest)
    query = random_unit_vectors(1, 5, seed=43)[0]
    full = search(handle, query, top_m=len(handle))
    for m in (1, 7, 128, 1000):
        assert search(handle, query, top_m=m) == full[:m]


def test_search_ties_break_by_clip_id(tmp_path):
    vectors = np.tile(np.array([[1.0, 0.0]]), (4, 1))
    metadata = [
        {"clip_id": name, "video_id": f"v{i}", "start_s": 0.0, "end_s": 1.0}
        for i, name in enumerate(["zz", "aa", "mm", "bb"])
    ]
    manifest = build_corpus_files(tmp_path, vectors, metadata)
    handle = ingest_corpus(manifest)
    results = search(handle, np.array([1.0, 0.0], dtype=np.float32), top_m=4)
    assert [c for c, _ in results] == ["aa", "bb", "mm", "zz"]


def test_search_empty_corpus_errors(tmp_path):
    manifest = build_corpus_files(tmp_path, np.zeros((0, 3), dtype=np.float32), [])
    handle = ingest_corpus(manifest)
    with pytest.raises(EmptyCorpusError):
        search(handle, np.array([1.0, 0.0, 0.0]), top_m=1)


def test_search_dimension_mismatch(small_corpus):
    with pytest.raises(ValueError, match="dimension"):
        search(small_corpus, np.ones(3, dtype=np.float32), top_m=1)


# ---------------------------------------------------------------------------
# Query encoder
# ---------------------------------------------------------------------------

def _encoder_files(tmp_path, queries, vectors):
    emb_path = tmp_path / "q.emb"
    txt_path = tmp_path / "q.txt"
    write_embedding_file(emb_path, vectors)
    txt_path.write_text("\n".join(queries) + "\n")
    return emb_path, txt_path


def test_lookup_encoder_round_trip(tmp_path):
    vectors = np.array([[2.0, 0.0], [0.0, 3.0]], dtype=np.float32)
    emb, txt = _encoder_files(tmp_path, ["wide shot", "close up"], vectors)
    encoder = LookupQueryEncoder.from_files(emb, txt)
    np.testing.assert_allclose(encoder.encode("wide shot"), [1.0, 0.0], atol=1e-7)
    np.testing.assert_allclose(encoder.encode("close up"), [0.0, 1.0], atol=1e-7)


def test_lookup_encoder_unknown_query(tmp_path):
    vectors = np.array([[1.0, 0.0]], dtype=np.float32)
    emb, txt = _encoder_files(tmp_path, ["known"], vectors)
    encoder = LookupQueryEncoder.from_files(emb, txt)
    with pytest.raises(UnknownQueryError):
        encoder.encode("unknown")


def test_lookup_encoder_count_mismatch(tmp_path):
    vectors = np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32)
    emb, txt = _encoder_files(tmp_path, ["only one"], vectors)
    with pytest.raises(CorpusError, match="query count mismatch"):
        LookupQueryEncoder.from_files(emb, txt)
