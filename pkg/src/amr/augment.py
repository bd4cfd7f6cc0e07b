"""Splice-and-Boost: undersampling, background splicing and hard-negative mining."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .domain import Dataset, Sample, TemporalSpan, iou, round_half_up, split_two_fold
from .losses import PredictionSet

log = logging.getLogger(__name__)

FOLD_TAGS = ("d1-model-on-d2", "d2-model-on-d1")


class RateError(ValueError):
    pass


class PlanError(ValueError):
    pass


class MiningError(RuntimeError):
    pass


@dataclass(frozen=True)
class MinedNegative:
    video_id: str
    query_id: str
    span: TemporalSpan
    confidence: float
    source_fold: str


@dataclass(frozen=True)
class SegmentRef:
    """A (possibly undersampled) copy of ``span`` taken from ``video_id``."""

    video_id: str
    query_id: str
    span: TemporalSpan
    kind: str
    rate: float = 1.0


@dataclass(frozen=True)
class Insertion:
    segment: SegmentRef
    offset: int
    kind: str  # "gt" or "ambiguous"


@dataclass(frozen=True)
class SplicePlan:
    background_video_id: str
    source_query_id: str
    insertions: tuple[Insertion, ...] = ()


@dataclass
class SegmentStore:
    """Feature rows per segment plus the real samples the segments came from."""

    rows: dict[SegmentRef, np.ndarray] = field(default_factory=dict)
    sources: dict[str, Sample] = field(default_factory=dict)

    def add(self, ref: SegmentRef, rows: np.ndarray) -> None:
        self.rows[ref] = rows


@dataclass
class AugmentConfig:
    rate_range: tuple[float, float] = (0.5, 1.0)
    max_ambiguous: int = 2
    max_attempts: int = 100
    use_boost: bool = True
    seed: int = 0


def undersample_indices(size: int, rate: float) -> np.ndarray:
    """ceil(rate * size) uniformly spaced indices in [0, size - 1], endpoints kept.

    Index k is round_half_up(k * (size - 1) / (kept - 1)).
    """
    if size < 2:
        raise RateError(f"cannot undersample a segment of {size} frame(s)")
    if not 0 < rate <= 1:
        raise RateError(f"rate {rate} outside (0, 1]")
    kept = math.ceil(rate * size - 1e-9)
    if kept < 2:
        raise RateError(f"rate {rate} keeps fewer than 2 of {size} frames")
    step = (size - 1) / (kept - 1)
    return np.array([round_half_up(k * step) for k in range(kept)], dtype=np.intp)


def undersample_segment(rows: np.ndarray, rate: float) -> np.ndarray:
    rows = np.asarray(rows)
    return rows[undersample_indices(rows.shape[0], rate)]


def _check_plan(background: Sample, plan: SplicePlan, store: SegmentStore) -> list[tuple[int, int, Insertion]]:
    placed = []
    for ins in plan.insertions:
        if ins.kind not in ("gt", "ambiguous"):
            raise PlanError(f"unknown insertion kind {ins.kind!r}")
        if ins.segment.video_id == background.video_id:
            raise PlanError(f"segment from {ins.segment.video_id} cannot be spliced into its own video")
        n = store.rows[ins.segment].shape[0]
        if ins.offset < 0 or ins.offset + n > background.length:
            raise PlanError(f"insertion [{ins.offset}, {ins.offset + n}) exceeds background length {background.length}")
        placed.append((ins.offset, ins.offset + n, ins))
    placed.sort(key=lambda t: (t[0], t[1]))
    for (s1, e1, _), (s2, e2, _) in zip(placed, placed[1:]):
        if s2 < e1:
            raise PlanError(f"insertions [{s1}, {e1}) and [{s2}, {e2}) overlap")
    return placed


def splice(background: Sample, plan: SplicePlan, store: SegmentStore,
           saliency: tuple[int | None, int | None] = (None, None)) -> Sample:
    """Delete an equal-length window at each offset and insert the segment rows there."""
    placed = _check_plan(background, plan, store)
    feats = background.features.copy()
    gt, amb = [], []
    for s, e, ins in placed:
        rows = store.rows[ins.segment]
        if rows.shape[1] != feats.shape[1]:
            raise PlanError(f"segment has {rows.shape[1]} channels, background has {feats.shape[1]}")
        # delete-then-insert of equal lengths keeps every other row in place
        feats = np.concatenate([feats[:s], rows, feats[e:]])
        (gt if ins.kind == "gt" else amb).append(TemporalSpan(s, e))
    if feats.shape[0] != background.length:
        raise AssertionError("spliced length differs from background length")
    if not plan.insertions:
        return Sample(background.video_id, background.query_id, feats, background.query_tokens)
    source = store.sources[plan.source_query_id]
    return Sample(
        video_id=f"{background.video_id}+{source.video_id}",
        query_id=f"{source.query_id}#aug",
        features=feats,
        query_tokens=source.query_tokens,
        gt_spans=tuple(gt),
        ambiguous_spans=tuple(amb),
        saliency_pos=saliency[0],
        saliency_neg=saliency[1],
    )


def _draw_offsets(lengths: Sequence[int], total: int, attempts: int, rng: np.random.Generator) -> list[int] | None:
    if any(n > total for n in lengths):
        return None
    for _ in range(attempts):
        offsets = [int(rng.integers(0, total - n + 1)) for n in lengths]
        spans = sorted(zip(offsets, lengths))
        if all(a + n <= b for (a, n), (b, _) in zip(spans, spans[1:])):
            return offsets
    return None


def _segment(sample: Sample, span: TemporalSpan, kind: str, rng: np.random.Generator,
             rate_range: tuple[float, float]) -> tuple[SegmentRef, np.ndarray]:
    rows = sample.features[span.start:span.end]
    rate = float(rng.uniform(*rate_range))
    if rows.shape[0] >= 2:
        rate = max(rate, 2.0 / rows.shape[0])
        rows = undersample_segment(rows, rate)
    else:
        rate = 1.0
    return SegmentRef(sample.video_id, sample.query_id, span, kind, rate), rows


def build_augmented_dataset(real: Dataset, negatives: Iterable[MinedNegative], config: AugmentConfig) -> Dataset:
    """One spliced sample per real sample; samples that cannot be placed are skipped."""
    by_query: dict[str, list[TemporalSpan]] = {}
    for neg in negatives:
        by_query.setdefault(neg.query_id, [])
        if neg.span not in by_query[neg.query_id]:
            by_query[neg.query_id].append(neg.span)
    store = SegmentStore(sources={s.query_id: s for s in real})
    out, skipped = [], 0
    for i, sample in enumerate(real.samples):
        rng = np.random.default_rng([config.seed, 11, i])
        candidates = [b for b in real.samples if b.video_id != sample.video_id]
        if not candidates or not sample.gt_spans:
            skipped += 1
            continue
        bg = candidates[int(rng.integers(len(candidates)))]
        segments = [_segment(sample, g, "gt", rng, config.rate_range) for g in sample.gt_spans]
        pool = sorted(by_query.get(sample.query_id, [])) if config.use_boost else []
        k = min(int(rng.integers(0, config.max_ambiguous + 1)), len(pool))
        if k:
            for j in sorted(rng.choice(len(pool), size=k, replace=False)):
                segments.append(_segment(sample, pool[int(j)], "ambiguous", rng, config.rate_range))
        offsets = _draw_offsets([rows.shape[0] for _, rows in segments], bg.length, config.max_attempts, rng)
        if offsets is None:
            skipped += 1
            continue
        for ref, rows in segments:
            store.add(ref, rows)
        plan = SplicePlan(bg.video_id, sample.query_id,
                          tuple(Insertion(ref, off, ref.kind) for (ref, _), off in zip(segments, offsets)))
        covered = np.zeros(bg.length, dtype=bool)
        inside_gt = np.zeros(bg.length, dtype=bool)
        for (ref, rows), off in zip(segments, offsets):
            covered[off:off + rows.shape[0]] = True
            if ref.kind == "gt":
                inside_gt[off:off + rows.shape[0]] = True
        pos_frames, neg_frames = np.flatnonzero(inside_gt), np.flatnonzero(~covered)
        sal = (None, None)
        if neg_frames.size:
            sal = (int(pos_frames[rng.integers(pos_frames.size)]), int(neg_frames[rng.integers(neg_frames.size)]))
        out.append(splice(bg, plan, store, sal))
    if skipped:
        log.warning("augmentation skipped %d of %d samples", skipped, len(real))
    return Dataset(tuple(out), "augmented", {"skipped": skipped, "source_count": len(real)})


def retained(window: TemporalSpan, score: float, gt: Sequence[TemporalSpan], theta: float) -> bool:
    """Zero IoU with every gt span and confidence strictly above theta."""
    return score > theta and all(iou(window, g) == 0 for g in gt)


def _windows_to_spans(pred: PredictionSet, length: int) -> list[TemporalSpan]:
    out = []
    for s, e in pred.windows:
        s, e = int(max(0, min(s, length))), int(max(0, min(e, length)))
        if e <= s:
            s, e = min(s, length - 1), min(s, length - 1) + 1
        out.append(TemporalSpan(s, e))
    return out


Predictor = Callable[[Sequence[Sample]], list[PredictionSet]]


def mine_negatives(train_set: Dataset, trainer: Callable[[Dataset], Predictor], theta: float,
                   rng: np.random.Generator) -> list[MinedNegative]:
    """Two-fold cross-validated harvesting of confident false positives."""
    if len(train_set) < 2:
        raise MiningError("mining needs at least two training samples")
    if not 0 < theta < 1:
        raise MiningError(f"theta {theta} outside (0, 1)")
    d1, d2 = split_two_fold(train_set, rng)
    mined: list[MinedNegative] = []
    for fit, apply, tag in ((d1, d2, FOLD_TAGS[0]), (d2, d1, FOLD_TAGS[1])):
        try:
            predict = trainer(fit)
        except ArithmeticError as exc:
            raise MiningError(f"fold {tag} training diverged: {exc}") from exc
        for sample, pred in zip(apply.samples, predict(apply.samples)):
            best: dict[TemporalSpan, float] = {}
            for span, score in zip(_windows_to_spans(pred, sample.length), pred.scores):
                if retained(span, float(score), sample.gt_spans, theta) and score > best.get(span, -1.0):
                    best[span] = float(score)
            mined.extend(MinedNegative(sample.video_id, sample.query_id, sp, c, tag) for sp, c in sorted(best.items()))
    return mined


def attach_negatives(dataset: Dataset, negatives: Iterable[MinedNegative]) -> Dataset:
    """Replace each sample's ambiguous spans by the spans mined for its query."""
    found: dict[str, list[TemporalSpan]] = {}
    for neg in negatives:
        found.setdefault(neg.query_id, []).append(neg.span)
    return dataset.replace_samples(s.with_ambiguous(found.get(s.query_id, ())) for s in dataset)


def mining_precision(negatives: Sequence[MinedNegative], oracle: Mapping[str, Sequence[TemporalSpan]],
                     min_iou: float = 0.5) -> float:
    """Share of mined spans with IoU >= min_iou against some planted distractor."""
    if not negatives:
        return 0.0
    hits = sum(any(iou(n.span, p) >= min_iou for p in oracle.get(n.query_id, ())) for n in negatives)
    return hits / len(negatives)
