"""Corpus ingestion and exact cosine search, end to end on a toy corpus.

Builds the binary embedding file and JSONL metadata from scratch, ingests with
near-duplicate removal, then runs text-free vector search.
"""

import json
import tempfile
from pathlib import Path

import numpy as np

from cliplab.corpus import (
    LookupQueryEncoder,
    ingest_corpus,
    normalize,
    search,
    write_embedding_file,
    write_metadata_jsonl,
)

rng = np.random.default_rng(0)
workdir = Path(tempfile.mkdtemp(prefix="cliplab-demo-"))

# --- 1. fabricate a tiny corpus: 3 "concepts" with noisy copies ------------
concepts = rng.normal(size=(3, 16))
vectors = np.vstack([c + 0.05 * rng.normal(size=(8, 16)) for c in concepts])
# plus one literal near-duplicate inside the same video
vectors = np.vstack([vectors, vectors[0] + 1e-4])

metadata = [
    {
        "clip_id": f"clip{i:03d}",
        "video_id": f"vid{i // 4:02d}",
        "start_s": float(i % 4) * 2.0,
        "end_s": float(i % 4) * 2.0 + 1.5,
    }
    for i in range(len(vectors))
]
metadata[-1] = {"clip_id": "clip_dup", "video_id": "vid00", "start_s": 99.0, "end_s": 100.0}

write_embedding_file(workdir / "corpus.emb", vectors)
write_metadata_jsonl(workdir / "corpus.meta.jsonl", metadata)
(workdir / "manifest.json").write_text(
    json.dumps({"embeddings": "corpus.emb", "metadata": "corpus.meta.jsonl"})
)

# --- 2. ingest twice: with and without dedup ---------------------------------
plain = ingest_corpus(workdir / "manifest.json")
deduped = ingest_corpus(workdir / "manifest.json", dedup_threshold=0.95)
print(f"ingested {len(plain)} clips; {len(plain) - len(deduped)} dropped as near-duplicates")
print(f"corpus digest: {deduped.ingest_manifest_digest[:16]}...")

# --- 3. search with a raw vector --------------------------------------------
query = normalize(concepts[1])
print("\ntop 5 for concept #1:")
for clip_id, similarity in search(deduped, query, top_m=5):
    print(f"  {clip_id}  similarity={similarity:.4f}")

# --- 4. search through the text-query lookup table --------------------------
write_embedding_file(workdir / "queries.emb", concepts.astype(np.float32))
(workdir / "queries.txt").write_text("crowd scenes\nwide landscape\nclose-up faces\n")
encoder = LookupQueryEncoder.from_files(workdir / "queries.emb", workdir / "queries.txt")
print("\ntop 3 for 'wide landscape':")
for clip_id, similarity in search(deduped, encoder.encode("wide landscape"), top_m=3):
    print(f"  {clip_id}  similarity={similarity:.4f}")
