"""Segmentation metrics: Dice, Jaccard, HD95, ASD, and the paired t-test.

Distances are in pixel units. Boundaries use 4-connectivity and foreground
on the image edge counts as boundary. HD95 uses the nearest-rank
percentile with ceiling. When exactly one of the two boundaries is empty
the distances are undefined: both metrics take the image diagonal and the
case is flagged.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage, special

METRICS_VERSION = 1


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p, g


def boundary(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return m & ~interior


def overlap_metrics(pred, gt) -> tuple[float, float]:
    """(dice, jaccard); two empty masks score (1, 1)."""
    p, g = _pair(pred, gt)
    inter = int(np.count_nonzero(p & g))
    sp, sg = int(np.count_nonzero(p)), int(np.count_nonzero(g))
    if sp + sg == 0:
        return 1.0, 1.0
    return 2.0 * inter / (sp + sg), inter / (sp + sg - inter)


def nearest_rank_percentile(values: np.ndarray, q: float = 95.0) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))
    rank = max(1, math.ceil(q / 100.0 * len(v)))
    return float(v[rank - 1])


def directed_distances(src_boundary: np.ndarray, dst_boundary: np.ndarray) -> np.ndarray:
    """Distance from every ``src`` boundary pixel to the nearest ``dst`` boundary pixel."""
    edt = ndimage.distance_transform_edt(~dst_boundary)
    return edt[src_boundary]


@dataclass
class SurfaceResult:
    hd95: float
    asd: float
    undefined: bool = False


def surface_distances(pred, gt) -> SurfaceResult:
    p, g = _pair(pred, gt)
    bp, bg = boundary(p), boundary(g)
    np_, ng = int(bp.sum()), int(bg.sum())
    if np_ == 0 and ng == 0:
        return SurfaceResult(0.0, 0.0)
    if np_ == 0 or ng == 0:
        diag = math.hypot(*p.shape)
        return SurfaceResult(diag, diag, True)
    d_pg = directed_distances(bp, bg)
    d_gp = directed_distances(bg, bp)
    asd = (d_pg.sum() + d_gp.sum()) / (np_ + ng)
    hd95 = max(nearest_rank_percentile(d_pg), nearest_rank_percentile(d_gp))
    return SurfaceResult(float(hd95), float(asd))


# ---------------------------------------------------------------------------
# paired t-test
# ---------------------------------------------------------------------------


@dataclass
class TTestResult:
    p_value: float
    t: float
    df: int
    degenerate: bool = False


def student_t_two_sided(t: float, df: int) -> float:
    """Two-tailed p-value, P(|T| >= |t|) = I_{df/(df+t^2)}(df/2, 1/2)."""
    return float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))


def paired_t_test(scores_a: Sequence[float], scores_b: Sequence[float]) -> TTestResult:
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"paired_t_test: lengths differ ({a.size} vs {b.size})")
    if a.size < 3:
        raise ValueError("paired_t_test: need at least 3 pairs")
    d = a - b
    df = d.size - 1
    if np.all(d == 0):
        return TTestResult(1.0, 0.0, df, True)
    sd = d.std(ddof=1)
    if sd == 0:
        return TTestResult(0.0, math.copysign(math.inf, d.mean()), df, True)
    t = d.mean() / (sd / math.sqrt(d.size))
    return TTestResult(student_t_two_sided(t, df), float(t), df)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

METRIC_NAMES = ("dice", "jaccard", "hd95", "asd")


@dataclass
class CaseMetrics:
    sample_id: str
    per_class: dict[str, dict[str, float]]
    dice: float
    jaccard: float
    hd95: float
    asd: float
    undefined_classes: list[int] = field(default_factory=list)


@dataclass
class MetricsReport:
    cases: list[CaseMetrics]
    meta: dict = field(default_factory=dict)
    predictions: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def undefined_count(self) -> int:
        return sum(len(c.undefined_classes) for c in self.cases)

    def values(self, metric: str) -> np.ndarray:
        return np.array([getattr(c, metric) for c in self.cases])

    def aggregate(self) -> dict[str, float]:
        out = {}
        for m in METRIC_NAMES:
            v = self.values(m)
            out[f"{m}_mean"] = float(v.mean())
            out[f"{m}_std"] = float(v.std())
        return out

    def to_json(self) -> dict:
        return {
            "version": METRICS_VERSION,
            **self.meta,
            "case_count": len(self.cases),
            "per_case": [asdict(c) for c in self.cases],
            "aggregate": self.aggregate(),
            "undefined_count": self.undefined_count,
        }

    def write(self, path: str | Path, run_timestamp: str | None = None) -> None:
        obj = self.to_json()
        obj["run_timestamp"] = run_timestamp
        Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def case_metrics(sample_id: str, pred: np.ndarray, gt: np.ndarray, n_classes: int) -> CaseMetrics:
    per_class = {}
    undefined = []
    for c in range(1, n_classes):
        dice, jac = overlap_metrics(pred == c, gt == c)
        surf = surface_distances(pred == c, gt == c)
        if surf.undefined:
            undefined.append(c)
        per_class[str(c)] = {"dice": dice, "jaccard": jac, "hd95": surf.hd95, "asd": surf.asd}
    mean = {m: float(np.mean([v[m] for v in per_class.values()])) for m in METRIC_NAMES}
    return CaseMetrics(sample_id, per_class, undefined_classes=undefined, **mean)


def evaluate_predictions(ids: Sequence[str], preds: np.ndarray, gts: np.ndarray, n_classes: int,
                         meta: dict | None = None) -> MetricsReport:
    if len(ids) == 0:
        raise ValueError("cannot evaluate an empty split")
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    cases = [case_metrics(ids[i], preds[i], gts[i], n_classes) for i in order]
    return MetricsReport(cases, dict(meta or {}))


def evaluate_model(model, dataset, split: str = "test", crop: int = 64, meta: dict | None = None) -> MetricsReport:
    """Argmax main-decoder predictions on center-cropped, unaugmented inputs."""
    from .unet import predict_main_labels

    ids = dataset.ids(split)
    if not ids:
        raise ValueError(f"split {split!r} is empty")
    images, masks = dataset.stack(ids, crop)
    preds = predict_main_labels(model, images)
    info = {"split": split}
    info.update(meta or {})
    report = evaluate_predictions(ids, preds, masks, dataset.n_classes, info)
    report.predictions = dict(zip(ids, preds))
    return report
