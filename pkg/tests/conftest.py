import json
from pathlib import Path

import numpy as np
import pytest

from cliplab import corpus as corpus_mod


def build_corpus_files(
    directory: Path,
    vectors: np.ndarray,
    metadata: list[dict] | None = None,
    dedup_threshold: float | None = None,
    name: str = "corpus",
) -> Path:
    """Write embedding + metadata + manifest files and return the manifest path."""
    directory.mkdir(parents=True, exist_ok=True)
    vectors = np.asarray(vectors, dtype=np.float32)
    if metadata is None:
        metadata = [
            {
                "clip_id": f"clip{i:04d}",
                "video_id": f"vid{i // 4:03d}",
                "start_s": float(i % 4),
                "end_s": float(i % 4) + 1.0,
            }
            for i in range(vectors.shape[0])
        ]
    emb_path = directory / f"{name}.emb"
    meta_path = directory / f"{name}.jsonl"
    manifest_path = directory / f"{name}.manifest.json"
    corpus_mod.write_embedding_file(emb_path, vectors)
    corpus_mod.write_metadata_jsonl(meta_path, metadata)
    manifest = {"embeddings": emb_path.name, "metadata": meta_path.name}
    if dedup_threshold is not None:
        manifest["dedup_threshold"] = dedup_threshold
    manifest_path.write_text(json.dumps(manifest))
    return manifest_path


def random_unit_vectors(n: int, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@pytest.fixture
def small_corpus(tmp_path):
    vectors = random_unit_vectors(50, 8, seed=7)
    manifest = build_corpus_files(tmp_path, vectors)
    return corpus_mod.ingest_corpus(manifest)
