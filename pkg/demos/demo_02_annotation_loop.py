"""The full annotation loop as an annotator would drive it: search bootstrap,
the 10/10 gate, builds, the four feeds, review, and version history.

An oracle stands in for the human; watch the model quality and data diversity
scores move as labels accumulate.
"""

import tempfile
from pathlib import Path

import numpy as np

from cliplab.corpus import ingest_corpus, normalize, search, write_embedding_file, write_metadata_jsonl
from cliplab.modeling import CVConfig, DiversityConfig, TrainConfig
from cliplab.session import create_session

import json

rng = np.random.default_rng(7)
workdir = Path(tempfile.mkdtemp(prefix="cliplab-demo-"))

# planted concept: clips along +u are positives
dim, n = 24, 400
u = rng.normal(size=dim)
u /= np.linalg.norm(u)
X = rng.normal(size=(n, dim))
X[: n // 5] += 1.8 * u  # 20% positives

write_embedding_file(workdir / "c.emb", X)
write_metadata_jsonl(
    workdir / "c.jsonl",
    [
        {"clip_id": f"clip{i:04d}", "video_id": f"vid{i//5:03d}",
         "start_s": float(i % 5), "end_s": float(i % 5) + 1.0}
        for i in range(n)
    ],
)
(workdir / "manifest.json").write_text(
    json.dumps({"embeddings": "c.emb", "metadata": "c.jsonl"})
)
corpus = ingest_corpus(workdir / "manifest.json")
# after normalization the planted positives sit around cosine 0.35 vs u
truth = {
    c.clip_id: "positive" if float(corpus.embeddings[c.row] @ u) > 0.25 else "negative"
    for c in corpus.clips
}

session = create_session("demo concept", corpus)
dcfg = DiversityConfig(k=5, kmeans_seed=0)

# --- step 1: bootstrap via search until the gate opens -----------------------
print("bootstrapping from search...")
for clip_id, _ in search(corpus, normalize(u), top_m=len(corpus)):
    ok, reason = session.can_build()
    if ok:
        break
    value = truth[clip_id]
    pos, neg = session.counts()
    if (value == "positive" and pos < 10) or (value == "negative" and neg < 10):
        session.submit_labels([{"clip_id": clip_id, "value": value, "source": "search"}])
print(f"gate: {session.can_build()}")

# --- step 2: iterate builds and feed labeling --------------------------------
for round_index in range(4):
    snapshot = session.build(TrainConfig(), CVConfig(seed=0), dcfg)
    pos, neg = session.counts()
    print(
        f"v{snapshot.version}: n={snapshot.trained_at_n} ({pos}+/{neg}-) "
        f"quality={snapshot.quality_score:.1f} diversity={snapshot.diversity_score:.1f}"
    )
    # label a handful from each feed, the way the UI encourages
    for kind in ("borderline", "top_positive", "top_negative", "random"):
        page = session.get_feed(kind, 0, 12)
        fresh = [e.clip_id for e in page.entries if e.labeled_status == "unlabeled"][:4]
        session.submit_labels(
            [{"clip_id": c, "value": truth[c], "source": f"feed_{kind}"} for c in fresh]
        )

# --- step 3: review and history ----------------------------------------------
rows = session.review()
print(f"\nreview: {len(rows)} effective labels; first 3:")
for row in rows[:3]:
    print(f"  {row['clip_id']} {row['value']:8s} from {row['source']} score={row['score']:.3f}")
print("history:", [(s.version, round(s.quality_score, 1)) for s in session.history()])

head = session.get_feed("borderline", 0, 3).entries
print("most uncertain right now:", [(e.clip_id, round(e.score, 3)) for e in head])
