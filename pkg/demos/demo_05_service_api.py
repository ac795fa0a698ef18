"""Walk the HTTP API: health, search, session creation, labeling to the gate,
building, feeds, review, history, and restart-with-replay.

Uses the in-process test client, so no port is opened; `cliplab serve` runs
the same app over uvicorn.
"""

import json
import tempfile
from pathlib import Path

import numpy as np
from fastapi.testclient import TestClient

from cliplab.corpus import write_embedding_file, write_metadata_jsonl
from cliplab.modeling import DiversityConfig
from cliplab.service import ServiceConfig, create_app

rng = np.random.default_rng(11)
workdir = Path(tempfile.mkdtemp(prefix="cliplab-demo-"))

# 60-clip fixture corpus with a planted concept
dim = 12
u = np.zeros(dim)
u[0] = 1.0
X = rng.normal(size=(60, dim))
X[:30] += 2.0 * u
X[30:] -= 2.0 * u
write_embedding_file(workdir / "c.emb", X)
write_metadata_jsonl(
    workdir / "c.jsonl",
    [
        {"clip_id": f"clip{i:03d}", "video_id": f"vid{i//4:02d}",
         "start_s": float(i % 4), "end_s": float(i % 4) + 1.0}
        for i in range(60)
    ],
)
(workdir / "manifest.json").write_text(json.dumps({"embeddings": "c.emb", "metadata": "c.jsonl"}))
write_embedding_file(workdir / "q.emb", u[None].astype(np.float32))
(workdir / "q.txt").write_text("establishing shots\n")

cfg = ServiceConfig(
    manifest_path=str(workdir / "manifest.json"),
    data_dir=str(workdir / "data"),
    query_embeddings_path=str(workdir / "q.emb"),
    query_texts_path=str(workdir / "q.txt"),
    diversity=DiversityConfig(k=5, kmeans_seed=0),
)

client = TestClient(create_app(cfg))
print("healthz:", client.get("/healthz").json())

session_id = client.post("/sessions", json={"label_name": "establishing shots"}).json()["session_id"]
print("session:", session_id)

hits = client.get("/search", params={"q": "establishing shots", "m": 60}).json()["results"]
batch = [{"clip_id": h["clip_id"], "value": "positive", "source": "search"} for h in hits[:10]]
batch += [{"clip_id": h["clip_id"], "value": "negative", "source": "search"} for h in hits[-10:]]
print("labels:", client.post(f"/sessions/{session_id}/labels", json=batch).json())

built = client.post(f"/sessions/{session_id}/build").json()
print("build:", built)

for kind in ("top_positive", "top_negative", "borderline", "random"):
    page = client.get(f"/sessions/{session_id}/feeds/{kind}", params={"size": 3}).json()
    head = [(e["clip_id"], round(e["score"], 3), e["labeled_status"]) for e in page["entries"]]
    print(f"{kind:13s} {head}")

print("review rows:", len(client.get(f"/sessions/{session_id}/review").json()["labels"]))
print("history:", client.get(f"/sessions/{session_id}/history").json()["snapshots"])

# a "restart": a fresh app over the same data dir replays the event logs
client2 = TestClient(create_app(cfg))
print("after replay:", client2.get("/sessions").json())
