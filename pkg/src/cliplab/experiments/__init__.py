"""Offline replication harness: sample-efficiency and source-selection
experiments over recorded or synthetic annotation streams."""

from .data import (
    AnnotationDataset,
    DatasetBundle,
    SynthSpec,
    inter_annotator_agreement,
    load_bundle,
    make_synth_bundle,
    split_test_ids,
)
from .exp1 import (
    Exp1Config,
    aggregate_exp1,
    coverage_filter,
    diversity_curve,
    gain_table,
    greedy_fill_upper_bound,
    run_exp1,
)
from .exp2 import Exp2Config, aggregate_exp2, run_exp2

__all__ = [
    "AnnotationDataset",
    "DatasetBundle",
    "SynthSpec",
    "inter_annotator_agreement",
    "load_bundle",
    "make_synth_bundle",
    "split_test_ids",
    "Exp1Config",
    "aggregate_exp1",
    "coverage_filter",
    "diversity_curve",
    "gain_table",
    "greedy_fill_upper_bound",
    "run_exp1",
    "Exp2Config",
    "aggregate_exp2",
    "run_exp2",
]
