"""Ablation matrix: every arm for every seed, aggregated into a summary table."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ABLATION_MODES, ARM_LABELS, ExperimentConfig
from .data import Dataset
from .metrics import METRIC_NAMES, paired_t_test
from .training import TeacherResult, TrainingError, run_pipeline

log = logging.getLogger(__name__)

REFERENCE_ARM = "full"
# metric -> (column header, scale applied to the stored value)
TABLE_COLUMNS = {
    "dice": ("Dice(%)", 100.0),
    "jaccard": ("Jaccard(%)", 100.0),
    "hd95": ("95HD(pixel)", 1.0),
    "asd": ("ASD(pixel)", 1.0),
}


@dataclass
class AblationSummary:
    arms: list[str]
    seeds: list[int]
    n_labeled: int
    # arm -> str(seed) -> aggregate dict (None when the run failed)
    cells: dict[str, dict[str, dict | None]] = field(default_factory=dict)
    # arm -> str(seed) -> per-case dice, ordered by sample id
    case_dice: dict[str, dict[str, list[float]]] = field(default_factory=dict)
    errors: dict[str, dict[str, str]] = field(default_factory=dict)

    def seed_means(self, arm: str, metric: str) -> np.ndarray:
        return np.array([c[f"{metric}_mean"] for c in self.cells.get(arm, {}).values() if c is not None])

    def arm_stats(self, arm: str, metric: str) -> tuple[float, float] | None:
        """Mean and population std over seeds of the per-seed mean."""
        v = self.seed_means(arm, metric)
        if v.size == 0:
            return None
        return float(v.mean()), float(v.std())

    def complete(self, arm: str) -> bool:
        cells = self.cells.get(arm, {})
        return len(cells) == len(self.seeds) and all(c is not None for c in cells.values())

    def p_values(self, reference: str = REFERENCE_ARM) -> dict[str, float | None]:
        """Paired t-test of ``reference`` against each other arm over (seed, case) Dice pairs."""
        out: dict[str, float | None] = {}
        for arm in self.arms:
            if arm == reference:
                continue
            if not (self.complete(arm) and self.complete(reference)) or len(self.seeds) < 2:
                out[arm] = None
                continue
            a = np.concatenate([self.case_dice[reference][str(s)] for s in self.seeds])
            b = np.concatenate([self.case_dice[arm][str(s)] for s in self.seeds])
            out[arm] = paired_t_test(a, b).p_value
        return out

    def to_json(self) -> dict:
        means = {}
        for arm in self.arms:
            means[arm] = {}
            for m in METRIC_NAMES:
                stats = self.arm_stats(arm, m)
                means[arm][m] = None if stats is None else {"mean": stats[0], "std": stats[1]}
        return {
            "arms": self.arms,
            "labels": {a: ARM_LABELS[a] for a in self.arms},
            "seeds": self.seeds,
            "n_labeled": self.n_labeled,
            "cells": self.cells,
            "case_dice": self.case_dice,
            "means": means,
            "p_values": self.p_values() if REFERENCE_ARM in self.arms else {},
            "errors": self.errors,
        }

    def table(self) -> str:
        width = max(len(ARM_LABELS[a]) for a in self.arms) + 2
        head = "Method".ljust(width) + "".join(h.rjust(16) for h, _ in TABLE_COLUMNS.values())
        lines = [head, "-" * len(head)]
        for arm in self.arms:
            row = ARM_LABELS[arm].ljust(width)
            for m, (_, scale) in TABLE_COLUMNS.items():
                stats = self.arm_stats(arm, m)
                cell = "--" if stats is None else f"{stats[0] * scale:.2f}±{stats[1] * scale:.2f}"
                if stats is not None and not self.complete(arm):
                    cell += "*"
                row += cell.rjust(16)
            lines.append(row)
        if any(not self.complete(a) for a in self.arms):
            lines.append("* some seeds failed; see errors in summary.json")
        if REFERENCE_ARM in self.arms and len(self.arms) > 1:
            pv = self.p_values()
            others = [a for a in self.arms if a != REFERENCE_ARM]
            w = [max(len(ARM_LABELS[a]), 10) + 2 for a in others]
            lines += ["", f"Paired t-test vs {ARM_LABELS[REFERENCE_ARM]} on per-case Dice (P-values)"]
            lines.append("Setting".ljust(14) + "".join(ARM_LABELS[a].rjust(k) for a, k in zip(others, w)))
            row = f"{self.n_labeled} labeled".ljust(14)
            for a, k in zip(others, w):
                row += ("--" if pv[a] is None else f"{pv[a]:.3g}").rjust(k)
            lines.append(row)
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        (out / "summary.json").write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        (out / "table.txt").write_text(self.table())


def run_ablation(cfg: ExperimentConfig, seeds: Sequence[int], out_dir: str | Path,
                 arms: Sequence[str] = ABLATION_MODES, dataset: Dataset | None = None,
                 timestamp: str | None = None) -> AblationSummary:
    """Run ``arms`` for each seed under ``out_dir/seed<s>/<arm>``.

    The teacher depends only on the config and seed, so it is trained once
    per seed and shared by every arm.
    """
    arms = list(arms)
    unknown = [a for a in arms if a not in ABLATION_MODES]
    if unknown:
        raise ValueError(f"unknown arms {unknown}")
    if len(set(seeds)) != len(seeds):
        raise ValueError("seeds must be distinct")
    dataset = dataset or Dataset(cfg.dataset)
    out = Path(out_dir)
    summary = AblationSummary(arms, list(seeds), len(dataset.ids("labeled")))
    for seed in seeds:
        teacher: TeacherResult | None = None
        for arm in arms:
            run_cfg = cfg.replace(seed=seed, ablation_mode=arm)
            log.info("seed %d arm %s", seed, arm)
            try:
                res = run_pipeline(run_cfg, out / f"seed{seed}" / arm, dataset, teacher, timestamp)
            except (TrainingError, ValueError) as exc:
                log.error("seed %d arm %s failed: %s", seed, arm, exc)
                summary.cells.setdefault(arm, {})[str(seed)] = None
                summary.errors.setdefault(arm, {})[str(seed)] = str(exc)
                continue
            teacher = res.teacher
            summary.cells.setdefault(arm, {})[str(seed)] = res.report.aggregate()
            summary.case_dice.setdefault(arm, {})[str(seed)] = res.report.values("dice").tolist()
        summary.write(out)
    return summary
