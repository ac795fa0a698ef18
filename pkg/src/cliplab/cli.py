"""Command-line entry points: `ingest`, `synth`, `exp1`, `exp2`, `agreement`,
plus `serve` for the HTTP API.

Each experiment writes one line-delimited JSON results file and a rendered
summary table (plain text and CSV). Outputs are byte-identical across re-runs
with the same config and seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .corpus import ingest_corpus
from .experiments import (
    Exp1Config,
    Exp2Config,
    SynthSpec,
    aggregate_exp1,
    aggregate_exp2,
    diversity_curve,
    gain_table,
    inter_annotator_agreement,
    load_bundle,
    make_synth_bundle,
    run_exp1,
    run_exp2,
)
from .modeling import DiversityConfig, TrainConfig


def _load_config(path: str) -> dict:
    return json.loads(Path(path).read_text())


def _write_jsonl(path: Path, records: list[dict]) -> None:
    with open(path, "w") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def _write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in columns})


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def _render_table(rows: list[dict], columns: list[str], title: str) -> str:
    cells = [[_fmt(r.get(c)) for c in columns] for r in rows]
    widths = [
        max(len(c), *(len(row[i]) for row in cells)) if cells else len(c)
        for i, c in enumerate(columns)
    ]
    lines = [title, ""]
    lines.append("  ".join(c.ljust(w) for c, w in zip(columns, widths)))
    lines.append("  ".join("-" * w for w in widths))
    for row in cells:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)))
    return "\n".join(lines) + "\n"


def _read_taxonomy(path: str | None) -> dict[str, str] | None:
    if not path:
        return None
    groups = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            groups[row["label_name"]] = row["group"]
    return groups


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**cfg.get("train", {}))


def _diversity_config(cfg: dict) -> DiversityConfig:
    return DiversityConfig(**cfg.get("diversity", {}))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_ingest(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    handle = ingest_corpus(cfg["manifest"], cfg.get("dedup_threshold"))
    report = {
        "clips": len(handle),
        "dimension": handle.dimension,
        "digest": handle.ingest_manifest_digest,
        "videos": len({c.video_id for c in handle.clips}),
    }
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ingest_report.json").write_text(json.dumps(report, sort_keys=True) + "\n")
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    spec = SynthSpec(**cfg)
    bundle = make_synth_bundle(spec, args.out_dir)
    print(
        json.dumps(
            {
                "dataset_dir": str(args.out_dir),
                "labels": len(bundle.datasets),
                "clips": len(bundle.corpus),
                "digest": bundle.digest(),
            },
            sort_keys=True,
        )
    )
    return 0


def cmd_exp1(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    bundle = load_bundle(cfg["dataset_dir"])
    exp_cfg = Exp1Config(
        n_grid=tuple(cfg.get("n_grid", (25, 50, 100, 500, 1000))),
        repeats=cfg.get("repeats", 5),
        test_fraction=cfg.get("test_fraction", 0.2),
        folds=cfg.get("folds", 5),
        permutations=cfg.get("permutations", 1000),
        seed=args.seed if args.seed is not None else cfg.get("seed", 0),
        train=_train_config(cfg),
    )
    records = run_exp1(bundle, exp_cfg)
    summary = aggregate_exp1(records)
    gains = gain_table(records, _read_taxonomy(cfg.get("taxonomy")))
    curves = diversity_curve(bundle, exp_cfg, _diversity_config(cfg))

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_jsonl(out / "exp1_results.jsonl", records)
    summary_columns = ["method", "n", "mean_ap", "labels_usable", "labels_total", "coverage"]
    gain_columns = ["group", "n", "median_gain", "labels"]
    curve_columns = ["method", "n", "mean_score", "std_score"]
    _write_csv(out / "exp1_summary.csv", summary, summary_columns)
    _write_csv(out / "exp1_gains.csv", gains, gain_columns)
    _write_csv(out / "exp1_diversity.csv", curves, curve_columns)
    text = (
        _render_table(summary, summary_columns, "Mean test AP per method and n")
        + "\n"
        + _render_table(gains, gain_columns, "Median AP gain, interactive vs combined (x100)")
        + "\n"
        + _render_table(curves, curve_columns, "Data diversity score per method and n")
    )
    (out / "exp1_summary.txt").write_text(text)
    print(text, end="")
    return 0


def cmd_exp2(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    bundle = load_bundle(cfg["dataset_dir"])
    exp_cfg = Exp2Config(
        batch_size=cfg.get("batch_size", 25),
        max_steps=cfg.get("max_steps", 40),
        repeats=cfg.get("repeats", 5),
        test_fraction=cfg.get("test_fraction", 0.2),
        epsilon=cfg.get("epsilon", 0.25),
        ucb_c=cfg.get("ucb_c", 0.01),
        permutations=cfg.get("permutations", 500),
        algorithms=tuple(
            cfg.get("algorithms", ("round_robin", "epsilon_greedy", "ucb", "greedy_oracle"))
        ),
        seed=args.seed if args.seed is not None else cfg.get("seed", 0),
        train=_train_config(cfg),
    )
    records = run_exp2(bundle, exp_cfg)
    summary = aggregate_exp2(records)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_jsonl(out / "exp2_results.jsonl", records)
    columns = ["algorithm", "labels", "p10", "p25", "p50", "p75", "p90"]
    _write_csv(out / "exp2_summary.csv", summary, columns)
    text = _render_table(
        summary, columns, "AP gain over the plain interactive stream (x100), percentiles"
    )
    (out / "exp2_summary.txt").write_text(text)
    print(text, end="")
    return 0


def cmd_agreement(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    bundle = load_bundle(cfg["dataset_dir"])
    records = [
        {
            "label": d.label_name,
            "agreement": inter_annotator_agreement(d),
            "clips": len(d.annotator_labels),
        }
        for d in bundle.datasets
    ]
    values = [r["agreement"] for r in records]
    summary = [
        {
            "labels": len(values),
            "min": min(values),
            "max": max(values),
            "mean": sum(values) / len(values),
        }
    ]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_jsonl(out / "agreement_results.jsonl", records)
    columns = ["labels", "min", "max", "mean"]
    _write_csv(out / "agreement_summary.csv", summary, columns)
    text = (
        _render_table(records, ["label", "agreement", "clips"], "Per-label agreement")
        + "\n"
        + _render_table(summary, columns, "All-annotator agreement summary")
    )
    (out / "agreement_summary.txt").write_text(text)
    print(text, end="")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import ServiceConfig, create_app

    cfg = ServiceConfig.from_file(args.config)
    host, port = cfg.listen_address.rsplit(":", 1)
    uvicorn.run(create_app(cfg), host=host, port=int(port))
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="cliplab",
        description="Active-learning workbench for binary clip classifiers",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, handler, needs_out in (
        ("ingest", cmd_ingest, True),
        ("synth", cmd_synth, True),
        ("exp1", cmd_exp1, True),
        ("exp2", cmd_exp2, True),
        ("agreement", cmd_agreement, True),
        ("serve", cmd_serve, False),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        if needs_out:
            p.add_argument("--out-dir", required=True, help="output directory")
        p.set_defaults(handler=handler)

    args = parser.parse_args(argv)
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
