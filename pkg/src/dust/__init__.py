"""Dual-uncertainty self-training for semi-supervised segmentation, in numpy."""

from .autodiff import Tensor, backward, no_grad
from .checkpoint import load as load_checkpoint
from .config import ABLATION_MODES, ARM_LABELS, ConfigError, ExperimentConfig, TrainPhaseConfig
from .data import Dataset, generate
from .losses import kl_pixel_uncertainty, rectified_unsup_loss, supervised_loss, total_loss
from .metrics import evaluate_model, paired_t_test, surface_distances
from .ranking import CheckpointSet, rank_and_partition, sample_uncertainty
from .training import generate_pseudo_labels, pretrain_teacher, run_pipeline, train_stage
from .unet import ModelParams, init_params, predict_dual, predict_main_labels

__version__ = "0.1.0"
