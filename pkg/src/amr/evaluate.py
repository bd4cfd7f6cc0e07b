"""Moment-retrieval metrics: R1@IoU, mAP over an IoU grid, and mIoU."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .domain import TemporalSpan, spans_array
from .losses import PredictionSet

MAP_GRID = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
REPORT_KEYS = ("r1@0.5", "r1@0.7", "map@0.5", "map@0.75", "map_avg", "miou")


class EvaluationError(ValueError):
    pass


@dataclass
class EvalResult:
    r1_at: dict[float, float] = field(default_factory=dict)
    map_at: dict[float, float] = field(default_factory=dict)
    map_avg: float = 0.0
    miou: float = 0.0
    num_queries: int = 0

    def report(self) -> dict[str, float]:
        """The metric report with exactly the documented keys."""
        return {
            "r1@0.5": self.r1_at[0.5],
            "r1@0.7": self.r1_at[0.7],
            "map@0.5": self.map_at[0.5],
            "map@0.75": self.map_at[0.75],
            "map_avg": self.map_avg,
            "miou": self.miou,
        }


def _top1_ious(preds: Sequence[PredictionSet], gts: Sequence[Sequence[TemporalSpan]]) -> np.ndarray:
    out = np.zeros(len(preds))
    for q, (p, g) in enumerate(zip(preds, gts)):
        if len(p) == 0:
            raise EvaluationError(f"query #{q} has no predictions")
        if not g:
            continue
        top = p.windows[p.top1()][None]
        out[q] = kernels.iou_matrix(top, spans_array(g)).max()
    return out


def recall_at_1(preds: Sequence[PredictionSet], gts: Sequence[Sequence[TemporalSpan]], threshold: float) -> float:
    """Fraction of queries whose top-scoring window reaches IoU >= threshold with some gt."""
    if not preds:
        return 0.0
    return float(np.mean(_top1_ious(preds, gts) >= threshold))


def mean_iou(preds: Sequence[PredictionSet], gts: Sequence[Sequence[TemporalSpan]]) -> float:
    if not preds:
        return 0.0
    return float(np.mean(_top1_ious(preds, gts)))


def average_precision(pred: PredictionSet, gt: Sequence[TemporalSpan], threshold: float) -> float:
    return float(kernels.greedy_average_precision(pred.scores, pred.windows, spans_array(gt), threshold))


def mean_average_precision(preds: Sequence[PredictionSet], gts: Sequence[Sequence[TemporalSpan]],
                           thresholds: Sequence[float] = MAP_GRID) -> tuple[dict[float, float], float]:
    """Per-threshold mAP (queries without gt are skipped) and its mean over ``thresholds``."""
    scored = [(p, g) for p, g in zip(preds, gts) if g]
    map_at = {}
    for t in thresholds:
        map_at[t] = float(np.mean([average_precision(p, g, t) for p, g in scored])) if scored else 0.0
    return map_at, float(np.mean([map_at[t] for t in thresholds]))


def evaluate(preds: Sequence[PredictionSet], gts: Sequence[Sequence[TemporalSpan]],
             r1_thresholds: Sequence[float] = (0.3, 0.5, 0.7)) -> EvalResult:
    if len(preds) != len(gts):
        raise EvaluationError("predictions and ground truth cover different numbers of queries")
    grid = tuple(sorted(set(MAP_GRID)))
    map_at, _ = mean_average_precision(preds, gts, grid)
    return EvalResult(
        r1_at={t: recall_at_1(preds, gts, t) for t in r1_thresholds},
        map_at=map_at,
        map_avg=float(np.mean([map_at[t] for t in MAP_GRID])),
        miou=mean_iou(preds, gts),
        num_queries=len(preds),
    )
