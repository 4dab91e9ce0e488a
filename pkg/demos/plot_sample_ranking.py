"""
Ranking unlabeled images by checkpoint disagreement
====================================================

A teacher is trained on a few labeled images and snapshotted K times. Images
on which the early snapshots disagree with the final one are deferred to the
second self-training stage.

The ranking only tracks difficulty once the teacher has converged. An
under-trained teacher is unsure about noisy images at every snapshot, so its
snapshots disagree least exactly where the images are hardest.
"""

import tempfile
from pathlib import Path

from scipy.stats import spearmanr

from dust.config import ExperimentConfig
from dust.data import Dataset, generate
from dust.ranking import rank_and_partition
from dust.training import pretrain_teacher

root = Path(tempfile.mkdtemp())
generate(root, {"labeled": 4, "unlabeled": 16, "val": 2, "test": 4}, seed=0, size=48)
ds = Dataset(root)
unlabeled = ds.ids("unlabeled")

for epochs in (40, 200):
    cfg = ExperimentConfig(crop_size=32, depth=2, base_channels=8, pretrain_epochs=epochs, K=4)
    teacher = pretrain_teacher(ds, ds.ids("labeled"), cfg.phase(epochs, 1), cfg.K,
                               cfg.depth, cfg.base_channels, ds.n_classes, cfg.crop_size)
    images, _ = ds.stack(unlabeled, cfg.crop_size)
    ranking = rank_and_partition(teacher.checkpoints, unlabeled, images, fraction=0.5)
    u = [e.uncertainty for e in ranking.entries]
    d = [ds.difficulty[e.sample_id] for e in ranking.entries]
    print(f"{epochs} epochs, snapshots at {teacher.checkpoints.epochs}: "
          f"Spearman(uncertainty, difficulty) = {spearmanr(u, d).statistic:+.3f}")

# the reliable half of the last ranking enters stage 1
for e in ranking.entries[:5]:
    print(f"{e.rank:3d} {e.sample_id} u={e.uncertainty:.4f} difficulty={ds.difficulty[e.sample_id]:.2f} {e.partition}")
print("reliable:", len(ranking.reliable), "unreliable:", len(ranking.unreliable))
