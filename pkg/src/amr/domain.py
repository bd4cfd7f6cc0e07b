"""Spans, samples and datasets, plus exact interval arithmetic.

All spans are closed-open integer frame intervals ``[start, end)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

SPLIT_TAGS = ("train", "val", "d1", "d2", "augmented")


class SpanError(ValueError):
    pass


class SampleError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class TemporalSpan:
    start: int
    end: int

    def __post_init__(self):
        if not (isinstance(self.start, (int, np.integer)) and isinstance(self.end, (int, np.integer))):
            raise SpanError(f"span bounds must be integers, got {self.start!r}, {self.end!r}")
        object.__setattr__(self, "start", int(self.start))
        object.__setattr__(self, "end", int(self.end))
        if self.start < 0:
            raise SpanError(f"span start {self.start} is negative")
        if self.end <= self.start:
            raise SpanError(f"empty span [{self.start}, {self.end})")

    @property
    def length(self) -> int:
        return self.end - self.start

    def as_list(self) -> list[int]:
        return [self.start, self.end]


@dataclass(frozen=True)
class NormalizedSpan:
    center: float
    width: float


def iou(a: TemporalSpan, b: TemporalSpan) -> float:
    inter = max(0, min(a.end, b.end) - max(a.start, b.start))
    union = a.length + b.length - inter
    return inter / union


def giou(a: TemporalSpan, b: TemporalSpan) -> float:
    inter = max(0, min(a.end, b.end) - max(a.start, b.start))
    union = a.length + b.length - inter
    hull = max(a.end, b.end) - min(a.start, b.start)
    return inter / union - (hull - union) / hull


def indicator_mask(spans: Iterable[TemporalSpan], length: int) -> np.ndarray:
    """1 at every frame covered by some span, else 0."""
    mask = np.zeros(length, dtype=np.int8)
    for s in spans:
        if s.end > length:
            raise SpanError(f"span [{s.start}, {s.end}) exceeds length {length}")
        mask[s.start:s.end] = 1
    return mask


def to_normalized(span: TemporalSpan, length: int) -> NormalizedSpan:
    if length <= 0:
        raise SpanError("length must be positive")
    return NormalizedSpan((span.start + span.end) / (2.0 * length), span.length / float(length))


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def from_normalized(n: NormalizedSpan, length: int) -> TemporalSpan:
    """Decode to frames: round half up, clamp to [0, length], keep >= 1 frame."""
    if length <= 0:
        raise SpanError("length must be positive")
    start = min(max(round_half_up((n.center - n.width / 2.0) * length), 0), length)
    end = min(max(round_half_up((n.center + n.width / 2.0) * length), 0), length)
    if end <= start:
        if start >= length:
            start = length - 1
        end = start + 1
    return TemporalSpan(start, end)


def spans_array(spans: Sequence[TemporalSpan]) -> np.ndarray:
    return np.array([[s.start, s.end] for s in spans], dtype=np.float64).reshape(-1, 2)


def _frozen(a, name: str) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if arr.ndim != 2:
        raise SampleError(f"{name} must be a 2-D matrix, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Sample:
    """One (video, query) training record.

    ``features`` is L x C (video frames), ``query_tokens`` is K x C with the
    end-of-sequence token in the last row.
    """

    video_id: str
    query_id: str
    features: np.ndarray
    query_tokens: np.ndarray
    gt_spans: tuple[TemporalSpan, ...] = ()
    ambiguous_spans: tuple[TemporalSpan, ...] = ()
    saliency_pos: int | None = None
    saliency_neg: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "features", _frozen(self.features, "features"))
        object.__setattr__(self, "query_tokens", _frozen(self.query_tokens, "query_tokens"))
        object.__setattr__(self, "gt_spans", tuple(sorted(self.gt_spans)))
        object.__setattr__(self, "ambiguous_spans", tuple(sorted(set(self.ambiguous_spans))))
        L = self.length
        for s in self.gt_spans + self.ambiguous_spans:
            if s.end > L:
                raise SampleError(f"{self.query_id}: span [{s.start}, {s.end}) exceeds video length {L}")
        for a, b in zip(self.gt_spans, self.gt_spans[1:]):
            if iou(a, b) > 0:
                raise SampleError(f"{self.query_id}: overlapping gt spans {a} and {b}")
        for w in self.ambiguous_spans:
            for g in self.gt_spans:
                if iou(w, g) > 0:
                    raise SampleError(f"{self.query_id}: ambiguous span {w} overlaps gt span {g}")
        if self.saliency_pos is not None:
            if not any(g.start <= self.saliency_pos < g.end for g in self.gt_spans):
                raise SampleError(f"{self.query_id}: saliency_pos {self.saliency_pos} is outside every gt span")
        if self.saliency_neg is not None:
            if not 0 <= self.saliency_neg < L or any(g.start <= self.saliency_neg < g.end for g in self.gt_spans):
                raise SampleError(f"{self.query_id}: saliency_neg {self.saliency_neg} must lie outside all gt spans")

    @property
    def length(self) -> int:
        return self.features.shape[0]

    @property
    def num_tokens(self) -> int:
        return self.query_tokens.shape[0]

    def with_ambiguous(self, spans: Iterable[TemporalSpan]) -> "Sample":
        return replace(self, ambiguous_spans=tuple(spans))

    def with_saliency(self, pos: int | None, neg: int | None) -> "Sample":
        return replace(self, saliency_pos=pos, saliency_neg=neg)


def draw_saliency_pair(sample: Sample, rng: np.random.Generator) -> tuple[int | None, int | None]:
    """Uniform frame inside some gt span and uniform frame outside all of them."""
    if not sample.gt_spans:
        return None, None
    inside = indicator_mask(sample.gt_spans, sample.length).astype(bool)
    pos_frames = np.flatnonzero(inside)
    neg_frames = np.flatnonzero(~inside)
    if neg_frames.size == 0:
        return None, None
    return int(pos_frames[rng.integers(pos_frames.size)]), int(neg_frames[rng.integers(neg_frames.size)])


@dataclass(frozen=True, eq=False)
class Dataset:
    samples: tuple[Sample, ...]
    split_tag: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if self.split_tag not in SPLIT_TAGS:
            raise SampleError(f"unknown split tag {self.split_tag!r}")
        seen = set()
        for s in self.samples:
            if s.query_id in seen:
                raise SampleError(f"duplicate query_id {s.query_id!r}")
            seen.add(s.query_id)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def by_query(self) -> dict[str, Sample]:
        return {s.query_id: s for s in self.samples}

    def subset(self, indices: Sequence[int], split_tag: str) -> "Dataset":
        return Dataset(tuple(self.samples[i] for i in indices), split_tag, dict(self.meta))

    def replace_samples(self, samples: Iterable[Sample], split_tag: str | None = None) -> "Dataset":
        return Dataset(tuple(samples), split_tag or self.split_tag, dict(self.meta))


def split_two_fold(dataset: Dataset, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Seeded shuffle into two disjoint halves whose sizes differ by at most 1."""
    if len(dataset) < 2:
        raise SampleError("need at least two samples to split")
    order = rng.permutation(len(dataset))
    half = (len(dataset) + 1) // 2
    return dataset.subset(sorted(order[:half]), "d1"), dataset.subset(sorted(order[half:]), "d2")
