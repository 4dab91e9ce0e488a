"""
Four-arm self-training ablation at toy scale
============================================

Runs the supervised baseline, plain self-training, sample-level selection
and the full method (selection plus the KL-rectified pseudo-label loss)
on a small synthetic dataset, then prints the summary table.

This takes under a minute. At this size the teacher only reaches about
55% Dice, and training on its pseudo labels makes the students worse, not
better: self-training needs a teacher that is right more often than not.
The benchmark in configs/benchmark.json (larger canvases, more labeled
images, a deeper net) is where the expected ordering appears; the
acceptance suite runs it.
"""

import logging
import tempfile
from pathlib import Path

from dust.ablation import run_ablation
from dust.config import ExperimentConfig
from dust.data import generate

logging.basicConfig(level=logging.INFO, format="%(message)s")

root = Path(tempfile.mkdtemp())
generate(root / "data", {"labeled": 4, "unlabeled": 24, "val": 2, "test": 8}, seed=0, size=48)

cfg = ExperimentConfig(dataset=str(root / "data"), crop_size=32, depth=2, base_channels=8,
                       pretrain_epochs=200, stage1_epochs=5, stage2_epochs=5, K=4)
summary = run_ablation(cfg, seeds=[0, 1], out_dir=root / "ablation")
print(summary.table())
print("artifacts under", root / "ablation")
