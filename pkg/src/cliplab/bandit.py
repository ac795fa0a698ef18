"""Multi-armed bandit over annotation sources: the interactive feed loop,
zero-shot retrieval, and random sampling.

Per-source scores hold the most recent observed gain in model quality; the
averaging variants were measurably worse, so only the latest gain is kept.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

SOURCE_INTERACTIVE = "interactive"
SOURCE_ZERO_SHOT = "zero_shot"
SOURCE_RANDOM = "random"

# order doubles as the tie-break priority (lowest index wins)
SOURCES = (SOURCE_INTERACTIVE, SOURCE_ZERO_SHOT, SOURCE_RANDOM)

ALGORITHMS = ("round_robin", "epsilon_greedy", "ucb", "greedy_oracle")


class BanditProtocolError(RuntimeError):
    """select/update called out of order or on inconsistent state."""


@dataclass(frozen=True)
class BanditConfig:
    algorithm: str = "ucb"
    epsilon: float = 0.25
    ucb_c: float = 0.01
    batch_size: int = 25
    seed: int = 0

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown bandit algorithm: {self.algorithm!r}")
        if not (0.0 <= self.epsilon <= 1.0):
            raise ValueError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if self.ucb_c <= 0.0:
            raise ValueError(f"ucb_c must be > 0, got {self.ucb_c}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class BanditState:
    sources: tuple[str, ...]
    scores: list[float]  # most recent gain per source
    pulls: list[int]  # selections per source, post-initialization
    total_steps: int
    last_value: float  # most recent observed quality value
    pending: str | None = None
    rr_cursor: int = 0
    rng: np.random.Generator = field(default=None, repr=False)


def init(
    per_source_first_batch_gains: list[float] | tuple[float, ...],
    v0: float,
    cfg: BanditConfig,
) -> BanditState:
    """Initialize scores from each source's independently evaluated first
    batch; v0 is the quality of the model trained on all three first batches."""
    gains = list(per_source_first_batch_gains)
    if len(gains) != len(SOURCES):
        raise ValueError(f"expected {len(SOURCES)} gains, got {len(gains)}")
    return BanditState(
        sources=SOURCES,
        scores=[float(g) for g in gains],
        pulls=[0] * len(SOURCES),
        total_steps=0,
        last_value=float(v0),
        rng=np.random.default_rng(cfg.seed),
    )


def _resolve_available(state: BanditState, available: list[str] | None) -> list[int]:
    if available is None:
        return list(range(len(state.sources)))
    indices = [i for i, src in enumerate(state.sources) if src in set(available)]
    if not indices:
        raise ValueError("no available sources to select from")
    return indices


def _greedy_index(state: BanditState, candidates: list[int]) -> int:
    best = candidates[0]
    for i in candidates[1:]:
        if state.scores[i] > state.scores[best]:
            best = i
    return best


def select(
    state: BanditState, cfg: BanditConfig, available: list[str] | None = None
) -> str:
    """Pick the next annotation source. `available` restricts the choice when
    a source stream is exhausted. Ties always go to the lowest source index."""
    if state.rng is None:
        raise BanditProtocolError("bandit state is not initialized")
    candidates = _resolve_available(state, available)

    if cfg.algorithm == "round_robin":
        # cycle ignoring scores, skipping unavailable sources
        while state.rr_cursor % len(state.sources) not in candidates:
            state.rr_cursor += 1
        choice = state.rr_cursor % len(state.sources)
        state.rr_cursor += 1
    elif cfg.algorithm == "epsilon_greedy":
        if state.rng.random() < cfg.epsilon:
            choice = candidates[int(state.rng.integers(len(candidates)))]
        else:
            choice = _greedy_index(state, candidates)
    elif cfg.algorithm == "ucb":
        unpulled = [i for i in candidates if state.pulls[i] == 0]
        if unpulled:
            choice = unpulled[0]
        else:
            log_n = math.log(state.total_steps)
            best, best_value = None, -math.inf
            for i in candidates:
                value = state.scores[i] + cfg.ucb_c * math.sqrt(log_n / state.pulls[i])
                if value > best_value:
                    best, best_value = i, value
            choice = best
    elif cfg.algorithm == "greedy_oracle":
        raise BanditProtocolError(
            "greedy_oracle needs counterfactual evaluation of every source; "
            "it is driven by the experiment harness, not by select()"
        )
    else:  # unreachable: config validates
        raise ValueError(f"unknown algorithm {cfg.algorithm!r}")

    state.pending = state.sources[choice]
    return state.pending


def update(state: BanditState, chosen: str, v_t: float) -> BanditState:
    """Record the observed quality after annotating a batch from `chosen`:
    the source's score becomes the gain v_t - last_value."""
    if state.pending is None:
        raise BanditProtocolError("update called without a pending selection")
    if chosen != state.pending:
        raise BanditProtocolError(
            f"update for {chosen!r} but pending selection is {state.pending!r}"
        )
    idx = state.sources.index(chosen)
    state.scores[idx] = float(v_t) - state.last_value
    state.last_value = float(v_t)
    state.pulls[idx] += 1
    state.total_steps += 1
    state.pending = None
    return state


def record_oracle_step(state: BanditState, chosen: str, v_t: float) -> BanditState:
    """Oracle-driver variant of update that does not require a pending
    selection (the driver evaluated every source itself)."""
    state.pending = chosen
    return update(state, chosen, v_t)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def state_to_dict(state: BanditState) -> dict:
    return {
        "sources": list(state.sources),
        "scores": state.scores,
        "pulls": state.pulls,
        "total_steps": state.total_steps,
        "last_value": state.last_value,
        "pending": state.pending,
        "rr_cursor": state.rr_cursor,
        "rng_state": state.rng.bit_generator.state,
    }


def state_from_dict(payload: dict) -> BanditState:
    rng = np.random.default_rng()
    rng.bit_generator.state = payload["rng_state"]
    return BanditState(
        sources=tuple(payload["sources"]),
        scores=[float(x) for x in payload["scores"]],
        pulls=[int(x) for x in payload["pulls"]],
        total_steps=int(payload["total_steps"]),
        last_value=float(payload["last_value"]),
        pending=payload.get("pending"),
        rr_cursor=int(payload.get("rr_cursor", 0)),
        rng=rng,
    )


def state_to_json(state: BanditState) -> str:
    return json.dumps(state_to_dict(state), sort_keys=True)


def state_from_json(text: str) -> BanditState:
    return state_from_dict(json.loads(text))
