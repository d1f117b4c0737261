"""Pixel-wise scoring: localization F1, per-class damage F1, and the
0.3/0.7 overall score.

Localization is a binary (building vs background) confusion over all pixels.
Damage classification is restricted to ground-truth building pixels; the
class matrix is indexed ``[true level][predicted level]`` with a column 0
for "predicted background". A background prediction at a building pixel is
a miss for the true class but is not charged as a false positive to any
damage class; ground-truth background pixels never enter the class matrix.

Per-class F1 is 2TP / (2TP + FP + FN) and defined as 0 when the denominator
is 0. The classification score is the harmonic mean of the four per-class
scores (0 as soon as any of them is 0); the overall score is
``0.3 * f1_loc + 0.7 * f1_clf``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError


class ConfusionMatrix:
    """Streaming confusion counts; merging is commutative and associative."""

    def __init__(self):
        self.loc_tp = 0
        self.loc_fp = 0
        self.loc_fn = 0
        self.loc_tn = 0
        self.dmg = np.zeros((5, 5), dtype=np.int64)  # [true][pred], col 0 = background
        self.samples = 0

    def copy(self) -> "ConfusionMatrix":
        out = ConfusionMatrix()
        out.loc_tp, out.loc_fp = self.loc_tp, self.loc_fp
        out.loc_fn, out.loc_tn = self.loc_fn, self.loc_tn
        out.dmg = self.dmg.copy()
        out.samples = self.samples
        return out

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        self.loc_tp += other.loc_tp
        self.loc_fp += other.loc_fp
        self.loc_fn += other.loc_fn
        self.loc_tn += other.loc_tn
        self.dmg += other.dmg
        self.samples += other.samples
        return self

    @property
    def building_pixels(self) -> int:
        return int(self.dmg.sum())


def accumulate(
    cm: ConfusionMatrix,
    pred_loc: np.ndarray,
    pred_dmg: np.ndarray,
    gt_loc: np.ndarray,
    gt_dmg: np.ndarray,
) -> ConfusionMatrix:
    """Add one sample's pixel counts to ``cm`` (updated in place)."""
    pred_loc = np.asarray(pred_loc)
    pred_dmg = np.asarray(pred_dmg)
    gt_loc = np.asarray(gt_loc)
    gt_dmg = np.asarray(gt_dmg)
    if not (pred_loc.shape == pred_dmg.shape == gt_loc.shape == gt_dmg.shape):
        raise ContractError("all masks must share one shape")
    for name, arr, hi in (("pred_loc", pred_loc, 1), ("gt_loc", gt_loc, 1),
                          ("pred_dmg", pred_dmg, 4), ("gt_dmg", gt_dmg, 4)):
        if arr.size and (arr.min() < 0 or arr.max() > hi):
            raise ContractError(f"{name} values outside [0, {hi}]")

    building = gt_loc == 1
    predicted = pred_loc == 1
    cm.loc_tp += int(np.count_nonzero(building & predicted))
    cm.loc_fp += int(np.count_nonzero(~building & predicted))
    cm.loc_fn += int(np.count_nonzero(building & ~predicted))
    cm.loc_tn += int(np.count_nonzero(~building & ~predicted))

    gt_pixels = gt_dmg > 0
    true_cls = gt_dmg[gt_pixels]
    pred_cls = pred_dmg[gt_pixels]
    np.add.at(cm.dmg, (true_cls, pred_cls), 1)
    cm.samples += 1
    return cm


@dataclass
class ScoreReport:
    f1_loc: float
    f1_classes: tuple[float, float, float, float]
    f1_clf: float
    f1_oa: float
    samples: int
    variant: str = ""
    dataset: str = ""


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def compute_scores(cm: ConfusionMatrix, variant: str = "", dataset: str = "") -> ScoreReport:
    f1_loc = _f1(cm.loc_tp, cm.loc_fp, cm.loc_fn)
    per_class = []
    for k in (1, 2, 3, 4):
        tp = int(cm.dmg[k, k])
        fn = int(cm.dmg[k].sum()) - tp
        fp = int(cm.dmg[:, k].sum()) - tp
        per_class.append(_f1(tp, fp, fn))
    if min(per_class) == 0.0:
        f1_clf = 0.0
    else:
        f1_clf = 4.0 / sum(1.0 / f for f in per_class)
    f1_oa = 0.3 * f1_loc + 0.7 * f1_clf
    return ScoreReport(
        f1_loc=f1_loc,
        f1_classes=tuple(per_class),
        f1_clf=f1_clf,
        f1_oa=f1_oa,
        samples=cm.samples,
        variant=variant,
        dataset=dataset,
    )


def _pct(value: float) -> str:
    return f"{100.0 * value:.4f}"


def serialize_report(report: ScoreReport) -> bytes:
    """Deterministic JSON bytes; scores as percent strings with 4 decimals."""
    payload = {
        "f1_loc": _pct(report.f1_loc),
        "f1_clf": _pct(report.f1_clf),
        "f1_oa": _pct(report.f1_oa),
        "f1_l1": _pct(report.f1_classes[0]),
        "f1_l2": _pct(report.f1_classes[1]),
        "f1_l3": _pct(report.f1_classes[2]),
        "f1_l4": _pct(report.f1_classes[3]),
        "samples": report.samples,
        "variant": report.variant,
        "dataset": report.dataset,
    }
    return json.dumps(payload, separators=(",", ":")).encode()


CSV_COLUMNS = ["variant", "dataset", "samples", "f1_loc", "f1_clf", "f1_oa",
               "f1_l1", "f1_l2", "f1_l3", "f1_l4"]


def report_csv_row(report: ScoreReport) -> list[str]:
    return [
        report.variant,
        report.dataset,
        str(report.samples),
        _pct(report.f1_loc),
        _pct(report.f1_clf),
        _pct(report.f1_oa),
        *(_pct(f) for f in report.f1_classes),
    ]
