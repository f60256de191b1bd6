"""Evaluation metrics: grounding IoU and accuracy, semantic mIoU/mAcc, clustering ARI."""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence

import numpy as np
import pandas as pd
from sklearn.metrics import adjusted_rand_score

from errors import InvalidArgumentError

logger = logging.getLogger(__name__)


@dataclass
class IoUResult:
    value: float
    flags: List[str] = field(default_factory=list)


def iou(pred, gt) -> IoUResult:
    """Intersection over union of the positive sets of two boolean point labelings.

    An empty union gives 0 and the `empty_union` flag.
    """
    pred = np.asarray(pred, dtype=bool).reshape(-1)
    gt = np.asarray(gt, dtype=bool).reshape(-1)
    if pred.shape != gt.shape:
        raise InvalidArgumentError(f"Label arrays differ in length: {pred.shape[0]} vs {gt.shape[0]}")
    union = int(np.sum(pred | gt))
    if union == 0:
        logger.warning("IoU over an empty union; defined as 0")
        return IoUResult(0.0, ['empty_union'])
    return IoUResult(float(np.sum(pred & gt)) / union)


def acc_at(ious: Iterable, threshold: float) -> float:
    """Fraction of results whose IoU strictly exceeds `threshold`."""
    values = np.array([r.value if isinstance(r, IoUResult) else float(r) for r in ious])
    if len(values) == 0:
        raise InvalidArgumentError("acc_at needs at least one result")
    return float(np.mean(values > threshold))


@dataclass
class SemanticScores:
    miou: float
    macc: float
    per_class: pd.DataFrame


def semantic_scores(pred, gt, classes: Sequence[int] = None) -> SemanticScores:
    """Per-class IoU and accuracy macro-averaged over the classes present in `gt`.

    Accuracy of a class is the recall of its ground-truth points. Classes
    listed in `classes` but absent from `gt` are left out of both means.
    """
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise InvalidArgumentError(f"Label arrays differ in length: {pred.shape[0]} vs {gt.shape[0]}")
    present = np.unique(gt)
    candidates = present if classes is None else [c for c in classes if c in set(present.tolist())]
    if len(candidates) == 0:
        raise InvalidArgumentError("No requested class occurs in the ground truth")
    rows = []
    for c in candidates:
        truth, guess = gt == c, pred == c
        rows.append({
            'class': c,
            'iou': float(np.sum(truth & guess) / np.sum(truth | guess)),
            'acc': float(np.sum(truth & guess) / np.sum(truth)),
            'support': int(np.sum(truth)),
        })
    table = pd.DataFrame(rows)
    return SemanticScores(float(table['iou'].mean()), float(table['acc'].mean()), table)


def ari(pred, gt) -> float:
    """Adjusted Rand index between two clusterings of the same items."""
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise InvalidArgumentError(f"Clusterings differ in length: {pred.shape[0]} vs {gt.shape[0]}")
    return float(adjusted_rand_score(gt, pred))


def grounding_summary(ious: Sequence, thresholds: Sequence[float]) -> Dict[str, float]:
    summary = {f"acc@{t:g}": acc_at(ious, t) for t in thresholds}
    summary['mean_iou'] = float(np.mean([r.value if isinstance(r, IoUResult) else r for r in ious]))
    summary['queries'] = len(ious)
    return summary
