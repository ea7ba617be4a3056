"""Accuracy tables, the in-domain vs out-of-domain drop analysis, and experiment drivers."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .datamodel import Dataset, SplitSpec, make_seen_domain_splits, make_splits
from .trainer import TrainConfig, evaluate, train, usable_ids

log = logging.getLogger(__name__)

# Modality settings of the drop and fusion experiments.
MODALITY_SETTINGS: dict[str, dict] = {
    "audio": dict(use_appearance=False, use_motion=False, use_audio=True),
    "motion": dict(use_appearance=False, use_motion=True, use_audio=False),
    "appearance": dict(use_appearance=True, use_motion=False, use_audio=False),
    "ap-mo": dict(use_appearance=True, use_motion=True, use_audio=False, fuse_early_ap_mo=True),
    "ap,mo": dict(use_appearance=True, use_motion=True, use_audio=False),
    "multimodal": dict(use_appearance=True, use_motion=True, use_audio=True),
}

# Method variants of the component ablation; all use appearance, motion and audio.
ABLATIONS: dict[str, dict] = {
    "baseline": dict(use_alignment=False, use_consistency_weighting=False),
    "weighted": dict(use_alignment=False, use_consistency_weighting=True),
    "align_visual": dict(use_alignment=True, align_audio_to="visual", use_consistency_weighting=False),
    "align_audio": dict(use_alignment=True, align_audio_to="audio", use_consistency_weighting=False),
    "ours": dict(use_alignment=True, align_audio_to="audio", use_consistency_weighting=True),
}


def compute_drop(acc_star: float, acc: float) -> float:
    """Relative accuracy drop in percent, denominated by the out-of-domain accuracy."""
    if acc <= 0:
        raise ValueError(f"out-of-domain accuracy must be > 0, got {acc}")
    return (acc_star - acc) / acc * 100.0


def mean_drop(drops: Sequence[float]) -> float:
    if len(drops) == 0:
        raise ValueError("mean_drop of an empty list")
    return float(np.mean(drops))


def round1(x: float) -> float:
    return float(f"{x:.1f}")


@dataclass
class DropAnalysis:
    splits: list[str]
    acc_star: list[float]
    acc: list[float]

    @property
    def drops(self) -> list[float]:
        return [compute_drop(s, a) for s, a in zip(self.acc_star, self.acc)]

    @property
    def mean_drop(self) -> float:
        return mean_drop(self.drops)

    @property
    def mean_acc(self) -> float:
        return float(np.mean(self.acc))

    @property
    def mean_acc_star(self) -> float:
        return float(np.mean(self.acc_star))


@dataclass
class ReportRow:
    method: str
    setting: str
    values: list[float]
    kind: str = "acc"  # "acc" or "drop"

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))


@dataclass
class Report:
    """Rows of per-split percentages; splits keep manifest order."""

    splits: list[str]
    rows: list[ReportRow] = field(default_factory=list)
    title: str = ""

    def add(self, method: str, setting: str, values: Sequence[float], kind: str = "acc") -> None:
        if len(values) != len(self.splits):
            raise ValueError(f"row {method}/{setting} has {len(values)} values for {len(self.splits)} splits")
        self.rows.append(ReportRow(method, setting, [float(v) for v in values], kind))

    def add_drop(self, method: str, setting: str, analysis: DropAnalysis) -> None:
        self.add(method, f"{setting}*", [100 * a for a in analysis.acc_star])
        self.add(method, setting, [100 * a for a in analysis.acc])
        self.rows.append(ReportRow(method, f"{setting} drop", analysis.drops, "drop"))


def _cells(row: ReportRow) -> list[str]:
    vals = row.values + [row.mean]
    if row.kind == "drop":
        return [f"(-{v:.1f}%)" for v in vals]
    return [f"{v:.1f}" for v in vals]


def render_report(report: Report, fmt: str = "markdown") -> str:
    header = ["method", "setting", *report.splits, "Mean"]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in report.rows:
            w.writerow([row.method, row.setting, *(f"{v:.1f}" for v in row.values + [row.mean])])
        return buf.getvalue()
    if fmt != "markdown":
        raise ValueError(f"unknown report format {fmt!r}")
    lines = []
    if report.title:
        lines += [f"### {report.title}", ""]
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "---|" * len(header))
    for row in report.rows:
        lines.append("| " + " | ".join([row.method, row.setting, *_cells(row)]) + " |")
    return "\n".join(lines) + "\n"


def write_report(report: Report, out_dir, method: str, dataset_hash: str | None) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{method}-{dataset_hash or 'nohash'}"
    csv_path, md_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.md"
    csv_path.write_text(render_report(report, "csv"))
    md_path.write_text(render_report(report, "markdown"))
    return csv_path, md_path


# ---------------------------------------------------------------- experiments

def _run(dataset: Dataset, split: SplitSpec, cfg: TrainConfig, test_ids: Sequence[str]) -> float:
    state = train(dataset, split, cfg)
    return evaluate(state.params, dataset, test_ids)[1]


def shift_experiment(
    dataset: Dataset,
    settings: Sequence[str] = ("audio", "motion", "appearance", "multimodal"),
    cfg: TrainConfig | None = None,
    seeds: Sequence[int] = (0,),
    test_fraction: float = 0.2,
    method: str = "baseline",
) -> tuple[dict[str, DropAnalysis], Report]:
    """In-domain vs out-of-domain accuracy and drop, per modality setting.

    Runs use the ``method`` variant from :data:`ABLATIONS` (cross-entropy
    only by default). For each split the model is trained twice: with the
    test domain's other clips in the training set (acc*) and under strict
    leave-one-domain-out (acc). Both are scored on the same held-out clips;
    accuracies are averaged over ``seeds`` before the drop is computed.
    """
    cfg = cfg or TrainConfig()
    m, recs = dataset.manifest, dataset.records
    unseen = make_splits(m, recs)
    results: dict[str, DropAnalysis] = {}
    names = [s.name for s in unseen]
    report = Report(names, title="In-domain (*) vs out-of-domain top-1 and relative drop")
    for setting in settings:
        flags = MODALITY_SETTINGS[setting]
        acc_star, acc = np.zeros(len(unseen)), np.zeros(len(unseen))
        for seed in seeds:
            seen = make_seen_domain_splits(m, recs, test_fraction, seed=seed)
            run_cfg = replace(cfg, seed=seed, checkpoint_dir=None, **{**ABLATIONS[method], **flags})
            for i, (sp_seen, sp_unseen) in enumerate(zip(seen, unseen)):
                test_ids = usable_ids(dataset, sp_seen.test_ids, run_cfg.use_audio)
                acc_star[i] += _run(dataset, sp_seen, run_cfg, test_ids)
                acc[i] += _run(dataset, sp_unseen, run_cfg, test_ids)
                log.info("shift %s seed %d %s: acc*=%.3f acc=%.3f", setting, seed, sp_unseen.name,
                         acc_star[i], acc[i])
        results[setting] = DropAnalysis(names, list(acc_star / len(seeds)), list(acc / len(seeds)))
        report.add_drop(method, setting, results[setting])
    return results, report


def ablation_experiment(
    dataset: Dataset,
    methods: Sequence[str] = tuple(ABLATIONS),
    cfg: TrainConfig | None = None,
    seeds: Sequence[int] = (0,),
    settings: dict[str, dict] | None = None,
) -> tuple[dict[str, list[float]], Report]:
    """Held-out top-1 per split for each method variant, averaged over seeds."""
    cfg = cfg or TrainConfig()
    table = settings or ABLATIONS
    splits = make_splits(dataset.manifest, dataset.records)
    names = [s.name for s in splits]
    report = Report(names, title="Held-out top-1 by method")
    out: dict[str, list[float]] = {}
    for method in methods:
        accs = np.zeros(len(splits))
        for seed in seeds:
            run_cfg = replace(cfg, seed=seed, checkpoint_dir=None, **table[method])
            for i, sp in enumerate(splits):
                accs[i] += _run(dataset, sp, run_cfg, sp.test_ids)
        out[method] = list(accs / len(seeds))
        report.add(method, "ap,mo,au", [100 * a for a in out[method]])
    return out, report
