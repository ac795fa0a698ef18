"""Annotation-source selection experiment: a bandit chooses which source
(interactive stream, zero-shot list, random sample) supplies each batch of
annotations; quality is test-set average precision after retraining.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import bandit
from ..bandit import SOURCES, BanditConfig
from ..modeling import SingleClassError, TrainConfig, baseline_expected_ap, train
from .data import AnnotationDataset, DatasetBundle, _label_seed
from .exp1 import LabelContext

ALGORITHMS = ("round_robin", "epsilon_greedy", "ucb", "greedy_oracle")


@dataclass(frozen=True)
class Exp2Config:
    batch_size: int = 25
    max_steps: int = 40
    repeats: int = 5
    test_fraction: float = 0.2
    epsilon: float = 0.25
    ucb_c: float = 0.01
    permutations: int = 500  # fallback baseline size for untrainable batches
    algorithms: tuple[str, ...] = ALGORITHMS
    seed: int = 0
    train: TrainConfig = TrainConfig()


class _SourceBatches:
    """Each source's test-filtered pool divided into full batches of size d."""

    def __init__(self, ctx: LabelContext, batch_size: int):
        pools = {
            "interactive": ctx.va_pool,
            "zero_shot": ctx.zs_pool,
            "random": ctx.random_pool,
        }
        self.batches: dict[str, list[list[tuple[str, int]]]] = {}
        for source in SOURCES:
            pool = pools[source]
            self.batches[source] = [
                pool[i : i + batch_size]
                for i in range(0, len(pool) - batch_size + 1, batch_size)
            ]

    def count(self, source: str) -> int:
        return len(self.batches[source])


class _Evaluator:
    """Trains on an accumulated dataset and evaluates test AP, with a content
    cache shared across algorithms (training is deterministic)."""

    def __init__(self, ctx: LabelContext, cfg: Exp2Config, label_name: str):
        self.ctx = ctx
        self.cfg = cfg
        self.fallback_seed = _label_seed(cfg.seed, label_name, "untrainable") % 2**32
        self.cache: dict[tuple, float] = {}

    def __call__(self, items: list[tuple[str, int]]) -> float:
        key = tuple(items)
        if key in self.cache:
            return self.cache[key]
        try:
            model = train(self.ctx.labeled_set(items), self.cfg.train)
            ap = self.ctx.evaluate_model(model)
        except SingleClassError:
            # a single-class batch ranks no better than chance
            ap = baseline_expected_ap(
                self.ctx.test_y,
                permutations=self.cfg.permutations,
                seed=self.fallback_seed,
            )
        self.cache[key] = ap
        return ap


def _merge(accumulated: list[tuple[str, int]], batch: list[tuple[str, int]]) -> list:
    """Append a batch, keeping the first-seen label for clips already present."""
    seen = {cid for cid, _ in accumulated}
    merged = list(accumulated)
    merged.extend((cid, label) for cid, label in batch if cid not in seen)
    return merged


def run_exp2(bundle: DatasetBundle, cfg: Exp2Config = Exp2Config()) -> list[dict]:
    """Run every configured algorithm on every label. Returns step records
    plus one final record per (label, algorithm) with the gain over the plain
    interactive stream."""
    records: list[dict] = []
    for dataset in bundle.datasets:
        ctx = LabelContext(bundle.corpus, dataset, cfg.test_fraction, cfg.seed)
        sources = _SourceBatches(ctx, cfg.batch_size)
        if min(sources.count(s) for s in SOURCES) < 1:
            records.append(
                {
                    "record_type": "skipped_label",
                    "label": dataset.label_name,
                    "reason": "a source has no full batch",
                }
            )
            continue
        evaluate = _Evaluator(ctx, cfg, dataset.label_name)
        plain_ap = evaluate(ctx.va_pool)
        for algorithm in cfg.algorithms:
            records.extend(
                _run_algorithm(dataset, sources, evaluate, algorithm, cfg, plain_ap)
            )
    return records


def _run_algorithm(
    dataset: AnnotationDataset,
    sources: _SourceBatches,
    evaluate: _Evaluator,
    algorithm: str,
    cfg: Exp2Config,
    plain_ap: float,
) -> list[dict]:
    label = dataset.label_name
    bcfg = BanditConfig(
        algorithm=algorithm,
        epsilon=cfg.epsilon,
        ucb_c=cfg.ucb_c,
        batch_size=cfg.batch_size,
        seed=_label_seed(cfg.seed, label, f"bandit-{algorithm}") % 2**32,
    )
    next_batch = {source: 1 for source in SOURCES}  # batch 0 feeds initialization

    initial_scores = [evaluate(sources.batches[source][0]) for source in SOURCES]
    accumulated: list[tuple[str, int]] = []
    for source in SOURCES:
        accumulated = _merge(accumulated, sources.batches[source][0])
    v0 = evaluate(accumulated)
    state = bandit.init(initial_scores, v0, bcfg)

    rows: list[dict] = []
    v_t = v0
    for step in range(1, cfg.max_steps + 1):
        available = [s for s in SOURCES if next_batch[s] < sources.count(s)]
        if not available:
            break
        candidates: dict[str, float] | None = None
        if algorithm == "greedy_oracle":
            candidates = {}
            chosen, candidate, best_v = None, None, -np.inf
            for source in available:
                trial = _merge(accumulated, sources.batches[source][next_batch[source]])
                v = evaluate(trial)
                candidates[source] = v
                if v > best_v:
                    chosen, candidate, best_v = source, trial, v
            accumulated, v_t = candidate, best_v
            bandit.record_oracle_step(state, chosen, v_t)
        else:
            chosen = bandit.select(state, bcfg, available)
            accumulated = _merge(
                accumulated, sources.batches[chosen][next_batch[chosen]]
            )
            v_t = evaluate(accumulated)
            bandit.update(state, chosen, v_t)
        next_batch[chosen] += 1
        row = {
            "record_type": "step",
            "label": label,
            "algorithm": algorithm,
            "step": step,
            "chosen": chosen,
            "v": v_t,
            "train_size": len(accumulated),
        }
        if candidates is not None:
            row["candidates"] = candidates
        rows.append(row)

    rows.append(
        {
            "record_type": "final",
            "label": label,
            "algorithm": algorithm,
            "steps": len([r for r in rows if r["record_type"] == "step"]),
            "final_ap": v_t,
            "plain_ap": plain_ap,
            "gain": (v_t - plain_ap) * 100.0,
        }
    )
    return rows


def aggregate_exp2(records: list[dict]) -> list[dict]:
    """Gain-distribution percentiles per algorithm across labels."""
    finals = [r for r in records if r.get("record_type") == "final"]
    algorithms = sorted({r["algorithm"] for r in finals})
    # keep the canonical order where possible
    algorithms.sort(key=lambda a: ALGORITHMS.index(a) if a in ALGORITHMS else 99)
    rows = []
    for algorithm in algorithms:
        gains = np.array([r["gain"] for r in finals if r["algorithm"] == algorithm])
        percentiles = np.percentile(gains, [10, 25, 50, 75, 90])
        rows.append(
            {
                "algorithm": algorithm,
                "labels": len(gains),
                "p10": float(percentiles[0]),
                "p25": float(percentiles[1]),
                "p50": float(percentiles[2]),
                "p75": float(percentiles[3]),
                "p90": float(percentiles[4]),
            }
        )
    return rows
