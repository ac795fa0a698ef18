"""Sample-efficiency experiment: six methods evaluated by test-set average
precision at a grid of training-set sizes, with the coverage rule, per-group
median gain tables, and diversity curves.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from ..corpus import CorpusHandle
from ..modeling import (
    DiversityConfig,
    LabeledSet,
    TrainConfig,
    average_precision,
    baseline_expected_ap,
    cluster_corpus,
    data_diversity_score,
    train,
)
from .data import AnnotationDataset, DatasetBundle, _label_seed, split_test_ids

METHOD_BASELINE = "baseline"
METHOD_ZERO_SHOT = "zero_shot"
METHOD_ZERO_SHOT_CLF = "zero_shot_classifier"
METHOD_RANDOM_CLF = "random_classifier"
METHOD_COMBINED_CLF = "combined_classifier"
METHOD_INTERACTIVE = "interactive"

METHODS = (
    METHOD_BASELINE,
    METHOD_ZERO_SHOT,
    METHOD_ZERO_SHOT_CLF,
    METHOD_RANDOM_CLF,
    METHOD_COMBINED_CLF,
    METHOD_INTERACTIVE,
)

TRAINED_METHODS = (
    METHOD_ZERO_SHOT_CLF,
    METHOD_RANDOM_CLF,
    METHOD_COMBINED_CLF,
    METHOD_INTERACTIVE,
)


@dataclass(frozen=True)
class Exp1Config:
    n_grid: tuple[int, ...] = (25, 50, 100, 500, 1000)
    repeats: int = 5
    test_fraction: float = 0.2
    folds: int = 5  # coverage minimum per class
    permutations: int = 1000  # Monte Carlo size for the random-ranking baseline
    seed: int = 0
    train: TrainConfig = TrainConfig()


def coverage_filter(labels: Sequence[int], n: int, folds: int = 5) -> bool:
    """Usable iff the first-n pool holds at least `folds` positives and
    `folds` negatives."""
    head = np.asarray(labels[:n])
    pos = int(head.sum())
    return pos >= folds and (len(head) - pos) >= folds


class LabelContext:
    """Per-label working state: test split, test arrays, filtered pools.
    Shared by both experiments so they see the same split derivation."""

    def __init__(
        self,
        corpus: CorpusHandle,
        dataset: AnnotationDataset,
        test_fraction: float,
        seed: int,
    ):
        self.corpus = corpus
        self.dataset = dataset
        self.test_ids = split_test_ids(dataset, test_fraction, seed)
        test_set = set(self.test_ids)
        self.test_X = np.stack([corpus.embedding(cid) for cid in self.test_ids]).astype(
            np.float64
        )
        self.test_y = np.array(
            [dataset.ground_truth(cid) for cid in self.test_ids], dtype=np.int8
        )

        # training pools: stream order with test clips removed; the
        # interactive pool applies latest-wins before the cut
        effective: dict[str, str] = {}
        va_order: list[str] = []
        for cid, value, _ in dataset.va_events:
            if cid in test_set:
                continue
            if cid not in effective:
                va_order.append(cid)
            effective[cid] = value
        self.va_pool = [(cid, 1 if effective[cid] == "positive" else 0) for cid in va_order]
        self.zs_pool = [
            (cid, dataset.ground_truth(cid))
            for cid in dataset.zs_stream
            if cid not in test_set
        ]
        self.random_pool = [
            (cid, dataset.ground_truth(cid))
            for cid in dataset.random_stream
            if cid not in test_set
        ]

    def pool_for(self, method: str, n: int) -> list[tuple[str, int]]:
        if method == METHOD_ZERO_SHOT_CLF:
            return self.zs_pool[:n]
        if method == METHOD_RANDOM_CLF:
            return self.random_pool[:n]
        if method == METHOD_INTERACTIVE:
            return self.va_pool[:n]
        if method == METHOD_COMBINED_CLF:
            # zero-shot half taken top-down; random half skips clips the
            # zero-shot half already claimed
            zs_half = self.zs_pool[: (n + 1) // 2]
            claimed = {cid for cid, _ in zs_half}
            random_half = []
            for cid, label in self.random_pool:
                if len(random_half) >= n // 2:
                    break
                if cid not in claimed:
                    random_half.append((cid, label))
            return zs_half + random_half
        raise ValueError(f"method {method!r} has no training pool")

    def labeled_set(self, pool: list[tuple[str, int]]) -> LabeledSet:
        return LabeledSet.from_items(
            (cid, self.corpus.embedding(cid), label) for cid, label in pool
        )

    def evaluate_model(self, model) -> float:
        scores = expit(self.test_X @ model.weights + model.bias)
        return average_precision(scores, self.test_y, ids=self.test_ids)


def run_exp1(bundle: DatasetBundle, cfg: Exp1Config = Exp1Config()) -> list[dict]:
    """One record per (label, method, n, repeat); excluded cells carry
    usable=False and no AP value."""
    records: list[dict] = []
    for dataset in bundle.datasets:
        ctx = LabelContext(bundle.corpus, dataset, cfg.test_fraction, cfg.seed)
        if int(ctx.test_y.sum()) == 0:
            records.append(
                {
                    "record_type": "skipped_label",
                    "label": dataset.label_name,
                    "reason": "test split holds no positives",
                }
            )
            continue
        ap_cache: dict[str, float] = {}
        for n in cfg.n_grid:
            for method in METHODS:
                for repeat in range(cfg.repeats):
                    records.append(
                        _exp1_cell(ctx, cfg, dataset, method, n, repeat, ap_cache)
                    )
    return records


def _exp1_cell(
    ctx: LabelContext,
    cfg: Exp1Config,
    dataset: AnnotationDataset,
    method: str,
    n: int,
    repeat: int,
    ap_cache: dict[str, float],
) -> dict:
    record = {
        "label": dataset.label_name,
        "method": method,
        "n": n,
        "repeat": repeat,
        "usable": True,
        "ap": None,
    }
    if method == METHOD_BASELINE:
        seed = _label_seed(cfg.seed, dataset.label_name, f"baseline-{repeat}")
        record["ap"] = baseline_expected_ap(
            ctx.test_y, permutations=cfg.permutations, seed=seed % 2**32
        )
        return record
    if method == METHOD_ZERO_SHOT:
        sims = ctx.test_X @ dataset.query
        record["ap"] = average_precision(sims, ctx.test_y, ids=ctx.test_ids)
        return record

    pool = ctx.pool_for(method, n)
    labels = [label for _, label in pool]
    record["train_size"] = len(pool)
    record["train_pos"] = int(sum(labels))
    record["train_neg"] = len(labels) - int(sum(labels))
    if not coverage_filter(labels, n, cfg.folds):
        record["usable"] = False
        return record

    # the pool is a deterministic prefix, so every repeat trains on the same
    # data; the fit happens once per (method, n)
    key = f"{method}:{n}"
    if key not in ap_cache:
        model = train(ctx.labeled_set(pool), cfg.train)
        ap_cache[key] = ctx.evaluate_model(model)
    record["ap"] = ap_cache[key]
    return record


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def _cell_ap(records: list[dict], label: str, method: str, n: int) -> float | None:
    values = [
        r["ap"]
        for r in records
        if r["label"] == label and r["method"] == method and r["n"] == n and r["usable"]
        and r["ap"] is not None
    ]
    if not values:
        return None
    return float(np.mean(values))


def aggregate_exp1(records: list[dict]) -> list[dict]:
    """Per (method, n): mean AP over labels with usable cells plus coverage."""
    records = [r for r in records if "method" in r]  # drop skipped-label markers
    labels = sorted({r["label"] for r in records})
    methods = [m for m in METHODS if any(r["method"] == m for r in records)]
    grid = sorted({r["n"] for r in records})
    rows = []
    for method in methods:
        for n in grid:
            cell_values = []
            usable = 0
            for label in labels:
                ap = _cell_ap(records, label, method, n)
                if ap is not None:
                    usable += 1
                    cell_values.append(ap)
            rows.append(
                {
                    "method": method,
                    "n": n,
                    "mean_ap": float(np.mean(cell_values)) if cell_values else None,
                    "labels_usable": usable,
                    "labels_total": len(labels),
                    "coverage": usable / len(labels) if labels else 0.0,
                }
            )
    return rows


def gain_table(
    records: list[dict], groups: dict[str, str] | None = None
) -> list[dict]:
    """Median per-label gain of the interactive method over the combined
    classifier, in AP points (x100), per group and overall."""
    records = [r for r in records if "method" in r]
    labels = sorted({r["label"] for r in records})
    grid = sorted({r["n"] for r in records})
    groups = groups or {}
    per_label_gains: dict[tuple[str, int], float] = {}
    for label in labels:
        for n in grid:
            ap_va = _cell_ap(records, label, METHOD_INTERACTIVE, n)
            ap_cc = _cell_ap(records, label, METHOD_COMBINED_CLF, n)
            if ap_va is None or ap_cc is None:
                continue
            per_label_gains[(label, n)] = (ap_va - ap_cc) * 100.0

    group_names = sorted({groups.get(label, "all") for label in labels})
    rows = []
    for group in group_names + ["overall"]:
        for n in grid:
            gains = [
                gain
                for (label, gn), gain in per_label_gains.items()
                if gn == n and (group == "overall" or groups.get(label, "all") == group)
            ]
            rows.append(
                {
                    "group": group,
                    "n": n,
                    "median_gain": float(np.median(gains)) if gains else None,
                    "labels": len(gains),
                }
            )
    return rows


# ---------------------------------------------------------------------------
# Diversity curves
# ---------------------------------------------------------------------------

def greedy_fill_upper_bound(n: int, dcfg: DiversityConfig) -> float:
    """Best achievable diversity score with n annotations, by greedily filling
    unsaturated (cluster, polarity) cells."""
    cells = [0] * (2 * dcfg.k)
    placed = 0
    while placed < n:
        target = None
        for i, count in enumerate(cells):
            if count < dcfg.s:
                target = i
                break
        if target is None:
            break  # every cell saturated
        cells[target] += 1
        placed += 1
    return sum(cells) / (2 * dcfg.k * dcfg.s)


def diversity_curve(
    bundle: DatasetBundle,
    cfg: Exp1Config = Exp1Config(),
    dcfg: DiversityConfig = DiversityConfig(),
) -> list[dict]:
    """Mean and stddev of the diversity score of each method's first-n pool
    across labels, plus the greedy-fill upper bound at each n."""
    assignments = cluster_corpus(bundle.corpus, dcfg)
    rows = []
    for n in cfg.n_grid:
        per_method: dict[str, list[float]] = {m: [] for m in TRAINED_METHODS}
        for dataset in bundle.datasets:
            ctx = LabelContext(bundle.corpus, dataset, cfg.test_fraction, cfg.seed)
            for method in TRAINED_METHODS:
                pool = ctx.pool_for(method, n)
                score = data_diversity_score(ctx.labeled_set(pool), assignments, dcfg)
                per_method[method].append(score)
        for method in TRAINED_METHODS:
            values = per_method[method]
            rows.append(
                {
                    "method": method,
                    "n": n,
                    "mean_score": float(np.mean(values)),
                    "std_score": float(np.std(values)),
                }
            )
        rows.append(
            {
                "method": "upper_bound",
                "n": n,
                "mean_score": greedy_fill_upper_bound(n, dcfg),
                "std_score": 0.0,
            }
        )
    return rows
