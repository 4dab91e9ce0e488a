"""Teacher pre-training, pseudo labelling and two-stage student training."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .config import ExperimentConfig, TrainPhaseConfig
from .data import Dataset, augment, center_crop, write_pgm
from .losses import NonFiniteLossError, cross_entropy, rectified_unsup_loss, supervised_loss, total_loss
from .metrics import MetricsReport, evaluate_model
from .optim import SGD
from .ranking import CheckpointSet, SampleRanking, checkpoint_epochs, rank_and_partition
from .unet import ModelParams, init_params, predict_dual, predict_main_labels

log = logging.getLogger(__name__)

# rng stream tags, one per training phase
PRETRAIN, STAGE1, STAGE2 = 1, 2, 3


class TrainingError(RuntimeError):
    """Training aborted; ``last_good`` holds the most recent finite parameters."""

    def __init__(self, message: str, last_good: ModelParams | None = None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class PseudoLabelSet:
    labels: dict[str, np.ndarray]
    producer: str

    @property
    def ids(self) -> list[str]:
        return list(self.labels)

    def dump(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for sid, lab in self.labels.items():
            write_pgm(d / f"{sid}.pgm", lab.astype(np.uint8))


def generate_pseudo_labels(model: ModelParams, dataset: Dataset, ids: Sequence[str], crop: int,
                           producer: str = "") -> PseudoLabelSet:
    """Main-decoder argmax on center-cropped, unaugmented images."""
    if not ids:
        return PseudoLabelSet({}, producer)
    images, _ = dataset.stack(ids, crop)
    labels = predict_main_labels(model, images)
    return PseudoLabelSet({sid: labels[i] for i, sid in enumerate(ids)}, producer)


class _Cycler:
    """Endless stream of items; each pass is a fresh permutation."""

    def __init__(self, items: Sequence[str], rng: np.random.Generator):
        self.items = list(items)
        self.rng = rng
        self.queue: list[str] = []

    def take(self, n: int) -> list[str]:
        out = []
        while len(out) < n:
            if not self.queue:
                self.queue = [self.items[i] for i in self.rng.permutation(len(self.items))]
            out.append(self.queue.pop(0))
        return out


def steps_per_epoch(n_labeled: int, n_unlabeled: int, cfg: TrainPhaseConfig) -> int:
    if n_unlabeled == 0:
        return math.ceil(n_labeled / cfg.batch_size)
    n_unl_batch = cfg.batch_size - cfg.labeled_per_batch
    if n_unl_batch == 0:
        return math.ceil(n_labeled / cfg.labeled_per_batch)
    return math.ceil(max(n_labeled / cfg.labeled_per_batch, n_unlabeled / n_unl_batch))


def _batch(dataset: Dataset, ids, rng, crop, pseudo: PseudoLabelSet | None = None):
    imgs, labs = [], []
    for sid in ids:
        if pseudo is None:
            img, lab = augment(dataset.images[sid], dataset.masks[sid], rng, crop)
        else:
            # pseudo labels exist only on the center crop, so the crop is fixed
            img, lab = augment(center_crop(dataset.images[sid], crop), pseudo.labels[sid], rng, crop)
        imgs.append(img)
        labs.append(lab)
    return np.stack(imgs)[:, None].astype(np.float32), np.stack(labs).astype(np.int64)


@dataclass
class StageResult:
    params: ModelParams
    losses: list[float] = field(default_factory=list)


def train_stage(student: ModelParams, dataset: Dataset, labeled_ids: Sequence[str], cfg: TrainPhaseConfig,
                crop: int, unlabeled_ids: Sequence[str] = (), pseudo: PseudoLabelSet | None = None,
                rectified: bool = True, unsup_weight: float = 1.0, include_background: bool = True,
                on_epoch_end: Callable[[int, ModelParams], None] | None = None,
                refresh: Callable[[ModelParams], PseudoLabelSet] | None = None) -> StageResult:
    """Train ``student`` in place on labeled data plus pseudo-labelled unlabeled data.

    With no unlabeled ids every batch is ``batch_size`` labeled samples and
    the objective is the supervised loss alone. Otherwise each batch holds
    ``labeled_per_batch`` labeled samples and the rest unlabeled, cycling
    whichever pool runs out first.
    """
    if not labeled_ids:
        raise ValueError("train_stage needs labeled samples")
    unlabeled_ids = list(unlabeled_ids)
    if unlabeled_ids:
        if pseudo is None:
            raise ValueError("pseudo labels required for unlabeled samples")
        missing = [s for s in unlabeled_ids if s not in pseudo.labels]
        if missing:
            raise ValueError(f"pseudo labels missing for {missing[:5]}")
    n_unl_batch = cfg.batch_size - cfg.labeled_per_batch if unlabeled_ids else 0
    n_lab_batch = cfg.batch_size if not unlabeled_ids else cfg.labeled_per_batch
    steps = steps_per_epoch(len(labeled_ids), len(unlabeled_ids), cfg)

    lab_cycle = _Cycler(labeled_ids, np.random.default_rng([cfg.seed, cfg.stream, 1]))
    unl_cycle = _Cycler(unlabeled_ids, np.random.default_rng([cfg.seed, cfg.stream, 2]))
    aug_rng = np.random.default_rng([cfg.seed, cfg.stream, 3])
    opt = SGD(student.named_parameters(), cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    for p in student.tensors.values():
        p.grad = None
    result = StageResult(student)
    last_good = student.copy()

    for epoch in range(1, cfg.epochs + 1):
        if refresh is not None and unlabeled_ids and epoch > 1:
            pseudo = refresh(student)
        epoch_loss = 0.0
        for step in range(steps):
            x_l, y_l = _batch(dataset, lab_cycle.take(n_lab_batch), aug_rng, crop)
            sup = supervised_loss(predict_dual(student, x_l), y_l, include_background)
            unsup = None
            if n_unl_batch and n_unl_batch > 0:
                x_u, y_u = _batch(dataset, unl_cycle.take(n_unl_batch), aug_rng, crop, pseudo)
                pred_u = predict_dual(student, x_u)
                unsup = rectified_unsup_loss(pred_u, y_u) if rectified else cross_entropy(pred_u.main_prob, y_u)
            try:
                loss = total_loss(sup, unsup, unsup_weight)
            except NonFiniteLossError as exc:
                raise TrainingError(f"epoch {epoch} step {step + 1}: {exc}", last_good) from exc
            ad.backward(loss.value)
            opt.step()
            epoch_loss += loss.scalar
        if not all(np.isfinite(p.data).all() for p in student.tensors.values()):
            raise TrainingError(f"epoch {epoch}: parameters became non-finite", last_good)
        last_good = student.copy()
        result.losses.append(epoch_loss / steps)
        log.debug("epoch %d loss %.5f", epoch, result.losses[-1])
        if on_epoch_end is not None:
            on_epoch_end(epoch, student)
    return result


@dataclass
class TeacherResult:
    checkpoints: CheckpointSet
    losses: list[float]


def pretrain_teacher(dataset: Dataset, labeled_ids: Sequence[str], cfg: TrainPhaseConfig, K: int,
                     depth: int, base_channels: int, n_classes: int, crop: int, norm: bool = True,
                     include_background: bool = True) -> TeacherResult:
    """Supervised training with K snapshots saved at evenly spaced epochs."""
    if not labeled_ids:
        raise ValueError("labeled set is empty")
    save_at = checkpoint_epochs(cfg.epochs, K)
    params = init_params(depth, base_channels, n_classes, rng_seed=cfg.seed, norm=norm)
    snaps: list[ModelParams] = []

    def keep(epoch, model):
        if epoch in save_at:
            snaps.append(model.copy())

    res = train_stage(params, dataset, labeled_ids, cfg, crop, include_background=include_background,
                      on_epoch_end=keep)
    return TeacherResult(CheckpointSet(snaps, save_at), res.losses)


# ---------------------------------------------------------------------------
# whole pipeline
# ---------------------------------------------------------------------------


def _atomic_bytes(path: Path, blob: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def save_model(params: ModelParams, path: str | Path) -> None:
    _atomic_bytes(Path(path), checkpoint.encode(params.state()))


def save_teacher(teacher: TeacherResult, directory: str | Path) -> None:
    d = Path(directory)
    for j, model in enumerate(teacher.checkpoints.models, start=1):
        save_model(model, d / f"ck_{j:02d}.ckpt")
    (d / "checkpoints.json").write_text(json.dumps({
        "epochs": teacher.checkpoints.epochs,
        "files": [f"ck_{j:02d}.ckpt" for j in range(1, teacher.checkpoints.K + 1)],
        "losses": teacher.losses,
    }, indent=2) + "\n")


def load_teacher(directory: str | Path) -> CheckpointSet:
    d = Path(directory)
    index = json.loads((d / "checkpoints.json").read_text())
    return CheckpointSet([checkpoint.load(d / f) for f in index["files"]], index["epochs"])


@dataclass
class PipelineResult:
    model: ModelParams
    teacher: TeacherResult
    report: MetricsReport
    ranking: SampleRanking | None = None
    losses: dict[str, list[float]] = field(default_factory=dict)
    artifacts: list[str] = field(default_factory=list)


def run_pipeline(cfg: ExperimentConfig, out_dir: str | Path, dataset: Dataset | None = None,
                 teacher: TeacherResult | None = None, timestamp: str | None = None) -> PipelineResult:
    """Run one ablation arm end to end and persist every artifact under ``out_dir``.

    ``teacher`` may carry a previously trained teacher for the same config
    and seed (pre-training is deterministic, so reuse is exact).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.resolved.json")
    dataset = dataset or Dataset(cfg.dataset)
    if dataset.n_classes != cfg.n_classes:
        raise ValueError(f"dataset has {dataset.n_classes} classes, config says {cfg.n_classes}")
    crop = cfg.crop_size
    labeled = dataset.ids("labeled")
    unlabeled = dataset.ids("unlabeled")
    mode = cfg.ablation_mode
    artifacts: list[str] = ["config.resolved.json"]
    losses: dict[str, list[float]] = {}

    if teacher is None:
        log.info("pre-training teacher (%d epochs)", cfg.pretrain_epochs)
        teacher = pretrain_teacher(dataset, labeled, cfg.phase(cfg.pretrain_epochs, PRETRAIN), cfg.K,
                                   cfg.depth, cfg.base_channels, cfg.n_classes, crop, cfg.instance_norm,
                                   cfg.include_background_in_dice)
    save_teacher(teacher, out / "teacher")
    artifacts += [f"teacher/ck_{j:02d}.ckpt" for j in range(1, teacher.checkpoints.K + 1)]
    losses["pretrain"] = list(teacher.losses)
    model = teacher.checkpoints.final.copy()
    ranking = None

    common = dict(rectified=mode == "full", unsup_weight=cfg.unsup_weight,
                  include_background=cfg.include_background_in_dice)

    def refresher(pool, tag):
        if not cfg.refresh_every_epoch:
            return None
        return lambda m: generate_pseudo_labels(m, dataset, pool, crop, f"{tag}-refresh")

    if mode == "st" and unlabeled:
        # classic self-training: one stage over all unlabeled samples, same epoch budget
        pseudo = generate_pseudo_labels(model, dataset, unlabeled, crop, "teacher")
        pseudo.dump(out / "pseudo" / "stage1")
        s1 = train_stage(model, dataset, labeled, cfg.phase(cfg.stage1_epochs + cfg.stage2_epochs, STAGE1),
                         crop, unlabeled, pseudo, refresh=refresher(unlabeled, "stage1"), **common)
        losses["stage1"] = s1.losses
        save_model(model, out / "stage1" / "model.ckpt")
        artifacts.append("stage1/model.ckpt")
    elif mode in ("st_sample", "full") and unlabeled:
        images, _ = dataset.stack(unlabeled, crop)
        ranking = rank_and_partition(teacher.checkpoints, unlabeled, images, cfg.partition_fraction)
        ranking.to_csv(out / "ranking.csv")
        artifacts.append("ranking.csv")
        reliable = ranking.reliable

        pseudo1 = generate_pseudo_labels(model, dataset, reliable, crop, "teacher")
        pseudo1.dump(out / "pseudo" / "stage1")
        log.info("stage 1: %d labeled + %d pseudo-labelled", len(labeled), len(reliable))
        s1 = train_stage(model, dataset, labeled, cfg.phase(cfg.stage1_epochs, STAGE1), crop, reliable,
                         pseudo1, refresh=refresher(reliable, "stage1"), **common)
        losses["stage1"] = s1.losses
        save_model(model, out / "stage1" / "model.ckpt")
        artifacts.append("stage1/model.ckpt")

        pseudo2 = generate_pseudo_labels(model, dataset, unlabeled, crop, "stage1")
        pseudo2.dump(out / "pseudo" / "stage2")
        log.info("stage 2: %d labeled + %d pseudo-labelled", len(labeled), len(unlabeled))
        s2 = train_stage(model, dataset, labeled, cfg.phase(cfg.stage2_epochs, STAGE2), crop, unlabeled,
                         pseudo2, refresh=refresher(unlabeled, "stage2"), **common)
        losses["stage2"] = s2.losses
        save_model(model, out / "stage2" / "model.ckpt")
        artifacts.append("stage2/model.ckpt")

    report = evaluate_model(model, dataset, "test", crop, meta={
        "mode": mode,
        "seed": cfg.seed,
        "config_digest": cfg.digest(),
    })
    report.write(out / "metrics.json", timestamp or datetime.now(timezone.utc).isoformat())
    artifacts.append("metrics.json")
    (out / "train_log.json").write_text(json.dumps(losses, indent=2) + "\n")
    return PipelineResult(model, teacher, report, ranking, losses, artifacts)
