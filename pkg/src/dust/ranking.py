"""Sample-level uncertainty from checkpoint disagreement, and the
reliable/unreliable split of the unlabeled pool."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .unet import ModelParams, predict_probs

RELIABLE = "reliable"
UNRELIABLE = "unreliable"


@dataclass
class CheckpointSet:
    """Teacher snapshots ordered by epoch; the last one is the final teacher."""

    models: list[ModelParams]
    epochs: list[int]

    def __post_init__(self):
        if len(self.models) != len(self.epochs):
            raise ValueError("one epoch index per checkpoint required")
        if len(self.models) < 2:
            raise ValueError(f"need at least 2 checkpoints, got {len(self.models)}")
        if any(b <= a for a, b in zip(self.epochs, self.epochs[1:])):
            raise ValueError(f"checkpoint epochs must be strictly increasing: {self.epochs}")

    @property
    def K(self) -> int:
        return len(self.models)

    @property
    def final(self) -> ModelParams:
        return self.models[-1]


def checkpoint_epochs(total_epochs: int, K: int) -> list[int]:
    """Evenly spaced save points ceil(j*E/K), j = 1..K; the last is E."""
    if K < 2:
        raise ValueError(f"K must be >= 2, got {K}")
    if total_epochs < K:
        raise ValueError(f"cannot save {K} distinct checkpoints in {total_epochs} epochs")
    return [math.ceil(j * total_epochs / K) for j in range(1, K + 1)]


def uncertainty_from_maps(maps: Sequence[np.ndarray]) -> float:
    """Mean squared deviation of each earlier map from the last one, averaged over the K-1 maps."""
    if len(maps) < 2:
        raise ValueError(f"need at least 2 prediction maps, got {len(maps)}")
    last = np.asarray(maps[-1], dtype=np.float64)
    total = 0.0
    for m in maps[:-1]:
        diff = np.asarray(m, dtype=np.float64) - last
        total += float(np.mean(diff * diff))
    return total / (len(maps) - 1)


def sample_uncertainty(ckpts: CheckpointSet, sample: np.ndarray) -> float:
    """Uncertainty of one image ([H,W] or [1,H,W]) under the checkpoint ensemble."""
    if ckpts.K < 2:
        raise ValueError("sample_uncertainty needs K >= 2")
    x = np.asarray(sample, dtype=np.float32).reshape(1, 1, *np.shape(sample)[-2:])
    return uncertainty_from_maps([predict_probs(m, x)[0][0] for m in ckpts.models])


def batch_uncertainty(ckpts: CheckpointSet, images: np.ndarray) -> np.ndarray:
    """Per-image uncertainty for a [M,1,H,W] stack."""
    maps = [predict_probs(m, images)[0] for m in ckpts.models]
    return np.array([uncertainty_from_maps([mp[i] for mp in maps]) for i in range(len(images))])


@dataclass
class RankEntry:
    sample_id: str
    uncertainty: float
    rank: int
    partition: str


@dataclass
class SampleRanking:
    entries: list[RankEntry]
    partition_fraction: float = 0.5
    meta: dict = field(default_factory=dict)

    @property
    def order(self) -> list[str]:
        return [e.sample_id for e in self.entries]

    @property
    def reliable(self) -> list[str]:
        return [e.sample_id for e in self.entries if e.partition == RELIABLE]

    @property
    def unreliable(self) -> list[str]:
        return [e.sample_id for e in self.entries if e.partition == UNRELIABLE]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "uncertainty", "rank", "partition"])
            for e in self.entries:
                w.writerow([e.sample_id, f"{e.uncertainty:.9g}", e.rank, e.partition])

    @classmethod
    def from_csv(cls, path: str | Path) -> "SampleRanking":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        entries = [RankEntry(r["sample_id"], float(r["uncertainty"]), int(r["rank"]), r["partition"])
                   for r in rows]
        frac = sum(e.partition == RELIABLE for e in entries) / max(1, len(entries))
        return cls(entries, frac)


def partition_scores(ids: Sequence[str], scores: Sequence[float], fraction: float = 0.5) -> SampleRanking:
    """Ascending sort (ties by sample id); the first ceil(f*M) are reliable."""
    if not ids:
        raise ValueError("cannot rank an empty unlabeled set")
    if len(set(ids)) != len(ids):
        raise ValueError("sample ids must be unique")
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    if len(scores) != len(ids):
        raise ValueError("one score per sample id required")
    order = sorted(range(len(ids)), key=lambda i: (scores[i], ids[i]))
    n_reliable = math.ceil(fraction * len(ids))
    entries = [
        RankEntry(ids[i], float(scores[i]), r + 1, RELIABLE if r < n_reliable else UNRELIABLE)
        for r, i in enumerate(order)
    ]
    return SampleRanking(entries, fraction)


def rank_and_partition(ckpts: CheckpointSet, unlabeled_ids: Sequence[str], images: np.ndarray,
                       fraction: float = 0.5) -> SampleRanking:
    """Rank unlabeled samples by checkpoint disagreement.

    ``images`` is the [M,1,H,W] stack (preprocessed, center-cropped) aligned
    with ``unlabeled_ids``.
    """
    if len(unlabeled_ids) == 0:
        raise ValueError("cannot rank an empty unlabeled set")
    scores = batch_uncertainty(ckpts, images)
    ranking = partition_scores(list(unlabeled_ids), scores.tolist(), fraction)
    ranking.meta["checkpoint_epochs"] = list(ckpts.epochs)
    return ranking
