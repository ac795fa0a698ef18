"""Annotation datasets for the offline experiments: three recorded streams per
label (interactive session, zero-shot retrieval order, random sample), three
annotator columns, and majority-vote ground truth.

The synthetic generator plants a linear concept, then produces the
interactive stream by actually running an annotation session with an oracle
annotator that answers the majority-vote label.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..corpus import (
    CorpusHandle,
    LookupQueryEncoder,
    ingest_corpus,
    search,
    write_embedding_file,
    write_metadata_jsonl,
)
from ..modeling import CVConfig, DiversityConfig, TrainConfig
from ..session import FEED_KINDS, MIN_NEGATIVE, MIN_POSITIVE, create_session


@dataclass(frozen=True)
class AnnotationDataset:
    """Everything recorded for one label."""

    label_name: str
    query: np.ndarray  # text-query embedding for the label
    annotator_labels: dict[str, tuple[int, int, int]]  # clip_id -> 3 columns
    va_events: tuple[tuple[str, str, str], ...]  # (clip_id, value, source) in order
    zs_stream: tuple[str, ...]  # descending cosine to query
    random_stream: tuple[str, ...]  # shared random sample order

    def ground_truth(self, clip_id: str) -> int:
        """Majority vote among the three annotators."""
        votes = self.annotator_labels[clip_id]
        return 1 if sum(votes) >= 2 else 0

    @property
    def labeled_clip_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self.annotator_labels))

    def validate(self, corpus: CorpusHandle) -> None:
        stream_clips = {cid for cid, _, _ in self.va_events}
        stream_clips.update(self.zs_stream)
        stream_clips.update(self.random_stream)
        missing = stream_clips - set(self.annotator_labels)
        if missing:
            raise ValueError(
                f"{self.label_name}: {len(missing)} stream clips lack annotations"
            )
        for votes in self.annotator_labels.values():
            if len(votes) != 3:
                raise ValueError(f"{self.label_name}: expected 3 annotator columns")
        sims = [
            float(corpus.embedding(cid).astype(np.float64) @ self.query)
            for cid in self.zs_stream
        ]
        if any(a < b - 1e-6 for a, b in zip(sims, sims[1:])):
            raise ValueError(f"{self.label_name}: zero-shot stream not sorted")


@dataclass(frozen=True)
class DatasetBundle:
    corpus: CorpusHandle
    datasets: tuple[AnnotationDataset, ...]
    encoder: LookupQueryEncoder | None = None

    def dataset(self, label_name: str) -> AnnotationDataset:
        for d in self.datasets:
            if d.label_name == label_name:
                return d
        raise KeyError(f"no dataset for label {label_name!r}")

    def digest(self) -> str:
        h = hashlib.sha256(self.corpus.ingest_manifest_digest.encode())
        for d in self.datasets:
            h.update(d.label_name.encode())
            h.update(np.ascontiguousarray(d.query, dtype=np.float64).tobytes())
            for cid in sorted(d.annotator_labels):
                h.update(cid.encode())
                h.update(bytes(d.annotator_labels[cid]))
            h.update(json.dumps(d.va_events).encode())
            h.update(json.dumps(list(d.zs_stream)).encode())
            h.update(json.dumps(list(d.random_stream)).encode())
        return h.hexdigest()


def inter_annotator_agreement(dataset: AnnotationDataset) -> float:
    """Fraction of annotated clips where all three annotators coincide."""
    labels = dataset.annotator_labels
    if not labels:
        raise ValueError(f"{dataset.label_name}: no annotations")
    agree = sum(1 for votes in labels.values() if len(set(votes)) == 1)
    return agree / len(labels)


def split_test_ids(
    dataset: AnnotationDataset, fraction: float, seed: int
) -> tuple[str, ...]:
    """Uniform test sample over the label's annotated clips, fixed once per
    label and shared by every method and repeat."""
    ids = dataset.labeled_clip_ids
    rng = np.random.default_rng(_label_seed(seed, dataset.label_name, "test-split"))
    n_test = max(1, round(fraction * len(ids)))
    picked = rng.choice(len(ids), size=n_test, replace=False)
    return tuple(sorted(ids[i] for i in picked))


def _label_seed(seed: int, label_name: str, purpose: str) -> int:
    digest = hashlib.sha256(f"{seed}:{label_name}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


# ---------------------------------------------------------------------------
# On-disk layout
# ---------------------------------------------------------------------------

def write_bundle(bundle: DatasetBundle, out_dir: str | Path, vectors: np.ndarray,
                 metadata: list[dict]) -> None:
    """Write a dataset directory: corpus files plus annotation and stream
    tables. All files are byte-deterministic functions of the content."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_embedding_file(out / "corpus.emb", vectors)
    write_metadata_jsonl(out / "corpus.meta.jsonl", metadata)
    (out / "manifest.json").write_text(
        json.dumps(
            {"embeddings": "corpus.emb", "metadata": "corpus.meta.jsonl"},
            sort_keys=True,
        )
    )
    queries = sorted((d.label_name, d.query) for d in bundle.datasets)
    write_embedding_file(out / "queries.emb", np.array([q for _, q in queries]))
    (out / "queries.txt").write_text("".join(name + "\n" for name, _ in queries))

    with open(out / "annotations.jsonl", "w") as f:
        for d in sorted(bundle.datasets, key=lambda d: d.label_name):
            for cid in sorted(d.annotator_labels):
                f.write(
                    json.dumps(
                        {
                            "label": d.label_name,
                            "clip_id": cid,
                            "annotators": list(d.annotator_labels[cid]),
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
    with open(out / "streams.jsonl", "w") as f:
        for d in sorted(bundle.datasets, key=lambda d: d.label_name):
            f.write(
                json.dumps(
                    {
                        "label": d.label_name,
                        "va": [list(e) for e in d.va_events],
                        "zs": list(d.zs_stream),
                        "random": list(d.random_stream),
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def load_bundle(dataset_dir: str | Path) -> DatasetBundle:
    """Load a dataset directory written by write_bundle (or an adapter that
    produced the same layout)."""
    root = Path(dataset_dir)
    corpus = ingest_corpus(root / "manifest.json")
    encoder = LookupQueryEncoder.from_files(root / "queries.emb", root / "queries.txt")

    annotations: dict[str, dict[str, tuple[int, int, int]]] = {}
    for line in (root / "annotations.jsonl").read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        annotations.setdefault(rec["label"], {})[rec["clip_id"]] = tuple(
            int(v) for v in rec["annotators"]
        )

    datasets = []
    for line in (root / "streams.jsonl").read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        label = rec["label"]
        dataset = AnnotationDataset(
            label_name=label,
            query=encoder.encode(label).astype(np.float64),
            annotator_labels=annotations.get(label, {}),
            va_events=tuple((e[0], e[1], e[2]) for e in rec["va"]),
            zs_stream=tuple(rec["zs"]),
            random_stream=tuple(rec["random"]),
        )
        dataset.validate(corpus)
        datasets.append(dataset)
    return DatasetBundle(corpus=corpus, datasets=tuple(datasets), encoder=encoder)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    n_clips: int = 5000
    dimension: int = 64
    prevalence: float = 0.05
    noise: float = 0.1  # stddev of the margin noise each annotator sees
    n_labels: int = 1
    seed: int = 0
    va_target: int = 300  # recorded interactive-stream length per label
    build_every: int = 25
    zs_size: int = 1000
    random_size: int = 1000
    clips_per_video: int = 5

    def __post_init__(self) -> None:
        if not (0.0 < self.prevalence < 1.0):
            raise ValueError("prevalence must be in (0, 1)")
        if self.n_clips < 10 or self.dimension < 2:
            raise ValueError("degenerate synthetic corpus spec")


def _synth_corpus_arrays(spec: SynthSpec, rng: np.random.Generator):
    vectors = rng.normal(size=(spec.n_clips, spec.dimension))
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    metadata = [
        {
            "clip_id": f"clip{i:06d}",
            "video_id": f"vid{i // spec.clips_per_video:05d}",
            "start_s": float(i % spec.clips_per_video),
            "end_s": float(i % spec.clips_per_video) + 1.0,
        }
        for i in range(spec.n_clips)
    ]
    return vectors, metadata


def _simulate_interactive_stream(
    corpus: CorpusHandle,
    query: np.ndarray,
    truth: dict[str, int],
    spec: SynthSpec,
    label_name: str,
) -> tuple[tuple[str, str, str], ...]:
    """Drive a real annotation session with an oracle annotator: bootstrap
    from search until the gate opens, then label across the four feeds and
    rebuild, until the target stream length is reached."""
    session = create_session(label_name, corpus, session_id=f"synth-{label_name}")
    tcfg = TrainConfig()
    cv = CVConfig(seed=_label_seed(spec.seed, label_name, "cv") % 2**32)
    dcfg = DiversityConfig(kmeans_seed=spec.seed % 2**32)

    def value_of(cid: str) -> str:
        return "positive" if truth[cid] else "negative"

    events: list[tuple[str, str, str]] = []

    def submit(cids: list[str], source: str) -> None:
        batch = [
            {"clip_id": cid, "value": value_of(cid), "source": source} for cid in cids
        ]
        session.submit_labels(batch)
        events.extend((cid, value_of(cid), source) for cid in cids)

    # bootstrap: walk the search ranking until both gate sides are met
    ranking = search(corpus, query, top_m=len(corpus))
    pos = neg = 0
    for cid, _ in ranking:
        if len(events) >= spec.va_target:
            break
        need_pos, need_neg = pos < MIN_POSITIVE, neg < MIN_NEGATIVE
        if not (need_pos or need_neg):
            break
        label = truth[cid]
        if (label and need_pos) or (not label and need_neg):
            submit([cid], "search")
            pos, neg = pos + label, neg + (1 - label)

    per_feed = max(1, spec.build_every // len(FEED_KINDS))
    while len(events) < spec.va_target:
        session.build(tcfg, cv, dcfg)
        labeled_before = len(events)
        for kind in FEED_KINDS:
            picked: list[str] = []
            page_index = 0
            while len(picked) < per_feed:
                page = session.get_feed(kind, page_index, page_size=64)
                if not page.entries:
                    break
                picked.extend(
                    e.clip_id
                    for e in page.entries
                    if e.labeled_status == "unlabeled" and e.clip_id not in picked
                )
                page_index += 1
            picked = picked[: min(per_feed, spec.va_target - len(events))]
            if picked:
                submit(picked, f"feed_{kind}")
            if len(events) >= spec.va_target:
                break
        if len(events) == labeled_before:
            break  # corpus exhausted
    return tuple(events)


def make_synth_bundle(spec: SynthSpec, out_dir: str | Path) -> DatasetBundle:
    """Generate a synthetic dataset directory and load it back. Byte-identical
    files per (spec, seed)."""
    rng = np.random.default_rng(spec.seed)
    vectors, metadata = _synth_corpus_arrays(spec, rng)

    # shared random sample: one draw reused for every label
    shared_random = rng.permutation(spec.n_clips)[: spec.random_size]

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_embedding_file(out / "corpus.emb", vectors)
    write_metadata_jsonl(out / "corpus.meta.jsonl", metadata)
    (out / "manifest.json").write_text(
        json.dumps(
            {"embeddings": "corpus.emb", "metadata": "corpus.meta.jsonl"},
            sort_keys=True,
        )
    )
    corpus = ingest_corpus(out / "manifest.json")

    datasets = []
    for label_index in range(spec.n_labels):
        label_name = f"synthetic-{label_index:03d}"
        label_rng = np.random.default_rng(
            _label_seed(spec.seed, label_name, "concept")
        )
        concept = label_rng.normal(size=spec.dimension)
        concept /= np.linalg.norm(concept)

        margins = corpus.embeddings.astype(np.float64) @ concept
        bias = -float(np.quantile(margins, 1.0 - spec.prevalence))
        noisy = margins[None, :] + bias + spec.noise * label_rng.normal(
            size=(3, len(corpus))
        )
        columns = (noisy > 0).astype(np.int8)
        all_votes = {
            clip.clip_id: tuple(int(v) for v in columns[:, i])
            for i, clip in enumerate(corpus.clips)
        }
        truth = {cid: 1 if sum(votes) >= 2 else 0 for cid, votes in all_votes.items()}

        zs_ranking = search(corpus, concept.astype(np.float32), top_m=spec.zs_size)
        zs_stream = tuple(cid for cid, _ in zs_ranking)
        random_stream = tuple(corpus.clips[i].clip_id for i in shared_random)
        va_events = _simulate_interactive_stream(
            corpus, concept.astype(np.float32), truth, spec, label_name
        )
        # the dataset records annotations only for clips some stream touched
        touched = {cid for cid, _, _ in va_events}
        touched.update(zs_stream)
        touched.update(random_stream)
        datasets.append(
            AnnotationDataset(
                label_name=label_name,
                query=concept,
                annotator_labels={cid: all_votes[cid] for cid in touched},
                va_events=va_events,
                zs_stream=zs_stream,
                random_stream=random_stream,
            )
        )

    bundle = DatasetBundle(corpus=corpus, datasets=tuple(datasets))
    write_bundle(bundle, out, vectors, metadata)
    return load_bundle(out)
