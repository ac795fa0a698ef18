"""The offline harness end to end on a synthetic dataset: generation with a
simulated annotator, sample-efficiency comparison, source-selection bandits,
and inter-annotator agreement.

Identical to what the CLI runs; here the library is driven directly.
"""

import tempfile
from pathlib import Path

from cliplab.experiments import (
    Exp1Config,
    Exp2Config,
    SynthSpec,
    aggregate_exp1,
    aggregate_exp2,
    inter_annotator_agreement,
    make_synth_bundle,
    run_exp1,
    run_exp2,
)

workdir = Path(tempfile.mkdtemp(prefix="cliplab-demo-"))

spec = SynthSpec(
    n_clips=1200,
    dimension=32,
    prevalence=0.08,
    noise=0.04,
    n_labels=3,
    seed=42,
    va_target=150,
    zs_size=300,
    random_size=300,
)
print("generating synthetic dataset (simulated annotator runs real sessions)...")
bundle = make_synth_bundle(spec, workdir / "dataset")
for d in bundle.datasets:
    print(
        f"  {d.label_name}: {len(d.va_events)} interactive events, "
        f"agreement={inter_annotator_agreement(d):.2f}"
    )

# --- experiment 1: sample efficiency -----------------------------------------
records = run_exp1(bundle, Exp1Config(n_grid=(25, 50, 100), repeats=3, permutations=200, seed=0))
print("\nmean test AP per method (columns: n=25, 50, 100):")
table = {}
for row in aggregate_exp1(records):
    table.setdefault(row["method"], []).append(row["mean_ap"])
for method, values in table.items():
    cells = "  ".join("  -  " if v is None else f"{v:.3f}" for v in values)
    print(f"  {method:22s} {cells}")

# --- experiment 2: source selection ------------------------------------------
print("\nbandit gain over the plain interactive stream (AP points):")
records2 = run_exp2(bundle, Exp2Config(batch_size=20, max_steps=5, permutations=100, seed=0))
for row in aggregate_exp2(records2):
    print(
        f"  {row['algorithm']:15s} p25={row['p25']:+.1f} "
        f"median={row['p50']:+.1f} p75={row['p75']:+.1f}"
    )
