"""Loss terms and the pixel-level uncertainty map.

All losses are built from autodiff primitives so gradients flow through
every term, including the ``exp(-D_kl)`` weight of the rectified loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .unet import DualPrediction

LOG_EPS = 1e-8
DICE_SMOOTH = 1e-5


class NonFiniteLossError(FloatingPointError):
    """A loss term evaluated to NaN or infinity."""


@dataclass
class LossValue:
    value: Tensor
    per_pixel: Tensor | None = None

    @property
    def scalar(self) -> float:
        return self.value.item()


def _log_eps(p: Tensor, eps: float = LOG_EPS) -> Tensor:
    return ad.log(ad.linear_combination([p], [1.0], bias=eps))


def _check_labels(prob: Tensor, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    B, n, H, W = prob.shape
    if labels.shape != (B, H, W):
        raise ShapeError(f"labels shape {labels.shape} does not match prediction {prob.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"labels must lie in [0, {n}), got range [{labels.min()}, {labels.max()}]")
    return labels


def kl_pixel_uncertainty(pred: DualPrediction, eps: float = LOG_EPS) -> Tensor:
    """Per-pixel KL(main || aux) over the class axis, shape [B, H, W], clamped at 0."""
    p, q = pred.main_prob, pred.aux_prob
    if p.shape != q.shape:
        raise ShapeError(f"kl_pixel_uncertainty: main {p.shape} vs aux {q.shape}")
    log_ratio = ad.linear_combination([_log_eps(p, eps), _log_eps(q, eps)], [1.0, -1.0])
    return ad.relu(ad.sum(ad.mul(p, log_ratio), axis=1))


def cross_entropy(prob: Tensor, target_labels: np.ndarray, eps: float = LOG_EPS) -> LossValue:
    labels = _check_labels(prob, target_labels)
    onehot = ad.one_hot(labels, prob.shape[1], dtype=prob.dtype)
    per_pixel = ad.linear_combination([ad.sum(ad.mul(onehot, _log_eps(prob, eps)), axis=1)], [-1.0])
    return LossValue(ad.mean(per_pixel), per_pixel)


def dice_loss(prob: Tensor, target_labels: np.ndarray, smooth: float = DICE_SMOOTH,
              include_background: bool = True) -> LossValue:
    """1 - mean soft Dice over classes and batch."""
    labels = _check_labels(prob, target_labels)
    B, n = prob.shape[:2]
    onehot = ad.one_hot(labels, n, dtype=prob.dtype)
    inter = ad.sum(ad.mul(prob, onehot), axis=(2, 3))
    denom = ad.linear_combination([ad.sum(prob, axis=(2, 3)), ad.sum(onehot, axis=(2, 3))], [1.0, 1.0],
                                  bias=smooth)
    numer = ad.linear_combination([inter], [2.0], bias=smooth)
    dice = ad.mul(numer, ad.exp(ad.linear_combination([ad.log(denom)], [-1.0])))
    if include_background:
        mean_dice = ad.mean(dice)
    else:
        mask = np.ones((B, n), dtype=prob.dtype)
        mask[:, 0] = 0
        mean_dice = ad.linear_combination([ad.sum(ad.mul(dice, Tensor(mask)))], [1.0 / (B * (n - 1))])
    return LossValue(ad.linear_combination([mean_dice], [-1.0], bias=1.0))


def supervised_loss(pred: DualPrediction, labels: np.ndarray, include_background: bool = True) -> LossValue:
    """(Dice + CE) / 2, each term averaged over the main and aux decoders."""
    dice = [dice_loss(p, labels, include_background=include_background).value
            for p in (pred.main_prob, pred.aux_prob)]
    ce = [cross_entropy(p, labels).value for p in (pred.main_prob, pred.aux_prob)]
    return LossValue(ad.linear_combination(dice + ce, [0.25, 0.25, 0.25, 0.25]))


def rectified_unsup_loss(pred: DualPrediction, pseudo: np.ndarray) -> LossValue:
    """Per pixel ``exp(-D_kl) * CE(main, pseudo) + D_kl``, averaged."""
    ce = cross_entropy(pred.main_prob, pseudo).per_pixel
    kl = kl_pixel_uncertainty(pred)
    weight = ad.exp(ad.linear_combination([kl], [-1.0]))
    per_pixel = ad.add(ad.mul(weight, ce), kl)
    return LossValue(ad.mean(per_pixel), per_pixel)


def total_loss(sup: LossValue, unsup: LossValue | None, unsup_weight: float = 1.0) -> LossValue:
    terms = {"supervised": sup} if unsup is None else {"supervised": sup, "unsupervised": unsup}
    for name, term in terms.items():
        v = term.scalar
        if not math.isfinite(v):
            raise NonFiniteLossError(f"{name} loss is not finite ({v})")
    if unsup is None:
        return LossValue(sup.value)
    return LossValue(ad.linear_combination([sup.value, unsup.value], [1.0, unsup_weight]))
