"""Component ablation, alpha/lambda sweep and imbalance-ratio sweep drivers.

Every cell (configuration x seed) is an independent fit, so cells can be fanned
out to a process pool; results are collected in submission order.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .bags import Bag, DatasetManifest, DatasetSpec, default_groups, synthesize
from .metrics import MetricsReport, evaluate, mean_reports
from .trainer import TrainConfig, fit_bags

# (row label, ensemble mode, distillation)
ABLATION_ROWS: Tuple[Tuple[str, str, bool], ...] = (
    ("none", "none", False),
    ("separate+distill", "separate", True),
    ("shared", "shared", False),
    ("shared+distill", "shared", True),
)
METRIC_COLUMNS = ("head", "medium", "tail", "all")
BENCHMARK_EPOCHS = 8


def benchmark_spec(**overrides) -> DatasetSpec:
    """Synthetic long-tail benchmark: 4 classes, 64-d instances, ratio 35, about 1200 training bags."""
    return dataclasses.replace(DatasetSpec(num_classes=4, embed_dim=64, head_count=871, imbalance_ratio=35.0,
                                           test_per_class=40, seed=0), **overrides)


def benchmark_config(**overrides) -> TrainConfig:
    """Desk-scale model and schedule used for the benchmark comparisons."""
    base = TrainConfig(epochs=BENCHMARK_EPOCHS, warmup_epochs=2, embed_dim=64, attn_dim=32, ffn_dim=64, text_dim=64)
    return base.replace(**overrides)


def baseline_config(config: TrainConfig) -> TrainConfig:
    """Plain single-branch run of the same aggregator."""
    return config.replace(ensemble="none", distillation=False)


def mde_config(config: TrainConfig) -> TrainConfig:
    return config.replace(ensemble="shared", distillation=True)


def run_cell(
    train: Sequence[Bag],
    test: Sequence[Bag],
    class_names: Sequence[str],
    groups: Dict[str, List[int]],
    config: TrainConfig,
    seed: int,
) -> MetricsReport:
    result = fit_bags(train, class_names, config, seed)
    return evaluate(result.bundle, test, groups, config.fusion)


def _run_cells(jobs: List[tuple], workers: int) -> List[MetricsReport]:
    if workers <= 1 or len(jobs) <= 1:
        return [run_cell(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run_cell, *job) for job in jobs]
        return [f.result() for f in futures]


@dataclass
class ResultTable:
    """Per-seed reports keyed by a row label, in insertion order."""

    rows: Dict[str, List[MetricsReport]]
    seeds: Tuple[int, ...]

    def mean(self, label: str) -> MetricsReport:
        return mean_reports(self.rows[label])

    def per_seed_csv(self, key_name: str = "row") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([key_name, "seed", *METRIC_COLUMNS])
        for label, reports in self.rows.items():
            for seed, rep in zip(self.seeds, reports):
                w.writerow([label, seed, *(_fmt(rep.row()[c]) for c in METRIC_COLUMNS)])
        return buf.getvalue()

    def mean_csv(self, key_name: str = "row") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([key_name, *METRIC_COLUMNS])
        for label in self.rows:
            m = self.mean(label).row()
            w.writerow([label, *(_fmt(m[c]) for c in METRIC_COLUMNS)])
        return buf.getvalue()


def _fmt(v: Optional[float]) -> str:
    return "" if v is None else f"{v:.2f}"


def ablate_bags(
    train: Sequence[Bag],
    test: Sequence[Bag],
    class_names: Sequence[str],
    groups: Dict[str, List[int]],
    base_config: TrainConfig,
    rows: Sequence[Tuple[str, str, bool]] = ABLATION_ROWS,
    workers: int = 1,
) -> ResultTable:
    jobs, labels = [], []
    for label, ensemble, distill in rows:
        cfg = base_config.replace(ensemble=ensemble, distillation=distill)
        for seed in base_config.seeds:
            jobs.append((train, test, class_names, groups, cfg, seed))
            labels.append(label)
    reports = _run_cells(jobs, workers)
    table: Dict[str, List[MetricsReport]] = {label: [] for label, _, _ in rows}
    for label, rep in zip(labels, reports):
        table[label].append(rep)
    return ResultTable(table, tuple(base_config.seeds))


def ablate(
    train_manifest: DatasetManifest,
    test_manifest: DatasetManifest,
    base_config: TrainConfig,
    workers: int = 1,
) -> ResultTable:
    return ablate_bags(
        train_manifest.load_bags(),
        test_manifest.load_bags(),
        train_manifest.class_names,
        train_manifest.groups,
        base_config,
        workers=workers,
    )


@dataclass
class SweepRecord:
    alpha: float
    lam: float
    seed: int
    report: MetricsReport


def sweep_alpha_lambda(
    train: Sequence[Bag],
    test: Sequence[Bag],
    class_names: Sequence[str],
    groups: Dict[str, List[int]],
    base_config: TrainConfig,
    alphas: Sequence[float],
    lambdas: Sequence[float],
    workers: int = 1,
) -> List[SweepRecord]:
    """Full train + evaluate of the shared+distill model at every (alpha, lambda, seed)."""
    base = mde_config(base_config)
    keys, jobs = [], []
    for a in alphas:
        for lam in lambdas:
            cfg = base.replace(alpha=float(a), lam=float(lam))
            for seed in base.seeds:
                keys.append((float(a), float(lam), seed))
                jobs.append((train, test, class_names, groups, cfg, seed))
    return [SweepRecord(a, lam, s, rep) for (a, lam, s), rep in zip(keys, _run_cells(jobs, workers))]


def surface_csv(records: Sequence[SweepRecord]) -> str:
    """Cross-seed mean of every metric per (alpha, lambda) grid point."""
    cells: Dict[Tuple[float, float], List[MetricsReport]] = {}
    for r in records:
        cells.setdefault((r.alpha, r.lam), []).append(r.report)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["alpha", "lambda", *METRIC_COLUMNS])
    for (a, lam), reps in cells.items():
        m = mean_reports(reps).row()
        w.writerow([a, lam, *(_fmt(m[c]) for c in METRIC_COLUMNS)])
    return buf.getvalue()


def sweep_records_csv(records: Sequence[SweepRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["alpha", "lambda", "seed", *METRIC_COLUMNS])
    for r in records:
        row = r.report.row()
        w.writerow([r.alpha, r.lam, r.seed, *(_fmt(row[c]) for c in METRIC_COLUMNS)])
    return buf.getvalue()


def sweep_imbalance(
    spec: DatasetSpec,
    ratios: Sequence[float],
    base_config: TrainConfig,
    workers: int = 1,
) -> Dict[float, ResultTable]:
    """Regenerate the dataset at each imbalance ratio and compare the single-branch baseline with MDE."""
    rows = (("baseline", "none", False), ("mde", "shared", True))
    out: Dict[float, ResultTable] = {}
    for r in ratios:
        spec_r = dataclasses.replace(spec, imbalance_ratio=float(r))
        train, test = synthesize(spec_r)
        groups = default_groups(spec_r.class_counts())
        out[float(r)] = ablate_bags(train, test, spec_r.names(), groups, base_config, rows=rows, workers=workers)
    return out


def imbalance_curves_csv(curves: Dict[float, ResultTable]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["ratio", "method", "tail_mean", "tail_std", "all_mean", "all_std"])
    for r, table in curves.items():
        for method, reports in table.rows.items():
            tails = [rep.tail for rep in reports if rep.tail is not None]
            alls = [rep.all for rep in reports]
            w.writerow([
                r,
                method,
                _fmt(float(np.mean(tails))) if tails else "",
                _fmt(float(np.std(tails))) if tails else "",
                _fmt(float(np.mean(alls))),
                _fmt(float(np.std(alls))),
            ])
    return buf.getvalue()


def write_summary(path, kind: str, config: TrainConfig, payload: dict) -> None:
    doc = {"experiment": kind, "config_hash": config.config_hash(), "config": config.to_dict(), **payload}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
