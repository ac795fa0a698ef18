"""Source-selection bandit on a stylized quality landscape.

Three annotation sources with different (and drifting) marginal value; compare
how round-robin, epsilon-greedy, and UCB allocate pulls.
"""

import numpy as np

from cliplab.bandit import (
    SOURCES,
    BanditConfig,
    init,
    select,
    state_from_json,
    state_to_json,
    update,
)

rng = np.random.default_rng(3)


def source_gain(source: str, step: int) -> float:
    """Interactive labels pay off early; random keeps paying late."""
    if source == "interactive":
        return 0.03 * np.exp(-step / 8) + 0.002 * rng.normal()
    if source == "zero_shot":
        return 0.01 * np.exp(-step / 5) + 0.002 * rng.normal()
    return 0.008 + 0.002 * rng.normal()


for algorithm in ("round_robin", "epsilon_greedy", "ucb"):
    cfg = BanditConfig(algorithm=algorithm, epsilon=0.25, ucb_c=0.01, seed=1)
    state = init([0.03, 0.01, 0.008], v0=0.50, cfg=cfg)
    quality = 0.50
    for step in range(1, 31):
        source = select(state, cfg)
        quality = min(1.0, quality + max(0.0, source_gain(source, step)))
        update(state, source, quality)
    pulls = dict(zip(SOURCES, state.pulls))
    print(f"{algorithm:15s} final quality={quality:.3f} pulls={pulls}")

# state round-trips through JSON for persistence inside session logs
cfg = BanditConfig(algorithm="ucb")
state = init([0.1, 0.2, 0.05], v0=0.5, cfg=cfg)
restored = state_from_json(state_to_json(state))
print("\nserialized state keeps scores:", restored.scores)
print("next recommendation:", select(restored, cfg))
