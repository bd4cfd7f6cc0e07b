"""Bipartite matching and the training objectives.

Loss functions take batched tensors (leading batch axis B) together with
per-sample metadata; every batch loss is the mean over samples of the
per-sample loss, so a batch of one gives the per-sample value.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from . import tensor as T
from .domain import Sample, TemporalSpan, indicator_mask, to_normalized
from .tensor import Tensor


class MatchCapacityError(ValueError):
    pass


@dataclass
class LossWeights:
    cls: float = 2.0
    l1: float = 10.0
    giou: float = 1.0
    sal: float = 1.0
    dill: float = 0.5
    disc: float = 0.5
    tau: float = 0.5
    unmatched_weight: float = 0.1
    saliency_margin: float = 0.2
    # "one_minus" costs (1 - S_i); "literal" costs S_i as printed in the matching formula
    cls_cost: str = "one_minus"

    def __post_init__(self):
        for name in ("cls", "l1", "giou", "sal", "dill", "disc", "unmatched_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.cls_cost not in ("one_minus", "literal"):
            raise ValueError("cls_cost must be 'one_minus' or 'literal'")


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[tuple[int, int], ...]
    unmatched_predictions: tuple[int, ...]

    @property
    def matched(self) -> tuple[int, ...]:
        return tuple(p for p, _ in self.pairs)


def normalized_gt(spans: Sequence[TemporalSpan], length: int) -> np.ndarray:
    """(M, 2) array of (center, width) for each span."""
    out = np.zeros((len(spans), 2))
    for j, s in enumerate(spans):
        n = to_normalized(s, length)
        out[j] = (n.center, n.width)
    return out


def cw_to_se(cw: np.ndarray) -> np.ndarray:
    return np.stack([cw[..., 0] - cw[..., 1] / 2.0, cw[..., 0] + cw[..., 1] / 2.0], axis=-1)


def match_cost_matrix(spans: np.ndarray, scores: np.ndarray, gt_cw: np.ndarray, weights: LossWeights) -> np.ndarray:
    """(N, M) matching cost between predictions and gt, normalized coordinates."""
    spans = np.asarray(spans, dtype=np.float64).reshape(-1, 2)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    cls_term = (1.0 - scores) if weights.cls_cost == "one_minus" else scores
    l1 = np.abs(spans[:, None, :] - gt_cw[None, :, :]).sum(-1)
    g = kernels.giou_matrix(cw_to_se(spans), cw_to_se(gt_cw))
    return weights.cls * cls_term[:, None] + weights.l1 * l1 + weights.giou * (1.0 - g)


def solve_assignment(cost: np.ndarray) -> MatchResult:
    """Globally minimal assignment of every gt column to a distinct prediction row."""
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if m > n:
        raise MatchCapacityError(f"{m} gt spans cannot be matched to {n} predictions")
    if m == 0:
        return MatchResult((), tuple(range(n)))
    gt_idx, pred_idx = kernels.linear_sum_assignment(cost.T)
    pairs = tuple((int(p), int(g)) for g, p in zip(gt_idx, pred_idx))
    used = set(int(p) for p in pred_idx)
    return MatchResult(pairs, tuple(i for i in range(n) if i not in used))


def hungarian_match(spans, scores, gt: Sequence[TemporalSpan], weights: LossWeights, length: int) -> MatchResult:
    if len(gt) > len(np.asarray(scores).reshape(-1)):
        raise MatchCapacityError(f"{len(gt)} gt spans exceed {len(np.asarray(scores).reshape(-1))} predictions")
    return solve_assignment(match_cost_matrix(spans, scores, normalized_gt(gt, length), weights))


def match_batch(spans: np.ndarray, scores: np.ndarray, samples: Sequence[Sample], weights: LossWeights) -> list[MatchResult]:
    return [hungarian_match(spans[b], scores[b], s.gt_spans, weights, s.length) for b, s in enumerate(samples)]


# individual loss terms

def loss_cls(logits: Tensor, matches: Sequence[MatchResult], unmatched_weight: float = 0.1) -> Tensor:
    """Binary cross-entropy on sigmoid(logits); matched target 1, the rest target 0 down-weighted."""
    B, P = logits.shape
    sign = np.ones((B, P))
    w = np.full((B, P), unmatched_weight)
    for b, m in enumerate(matches):
        for p in m.matched:
            sign[b, p] = -1.0
            w[b, p] = 1.0
    return T.sum(T.softplus(logits * sign) * (w / (B * P)))


def _matched_rows(spans: Tensor, gt_cw: Sequence[np.ndarray], matches: Sequence[MatchResult]):
    B, P, _ = spans.shape
    flat, targets, pw = [], [], []
    for b, m in enumerate(matches):
        for p, g in m.pairs:
            flat.append(b * P + p)
            targets.append(gt_cw[b][g])
            pw.append(1.0 / (len(m.pairs) * B))
    if not flat:
        return None, None, None
    pred = T.take(T.reshape(spans, (B * P, 2)), flat, axis=0)
    return pred, np.array(targets), np.array(pw)


def span_giou(pred: Tensor, target: np.ndarray) -> Tensor:
    """Differentiable 1-D GIoU between (K, 2) (center, width) rows."""
    half = np.array([-0.5, 0.5])
    ps = T.take(pred, [0], axis=1) + T.take(pred, [1], axis=1) * half
    ts = cw_to_se(target)
    s1, e1 = T.take(ps, [0], axis=1), T.take(ps, [1], axis=1)
    s2, e2 = ts[:, :1], ts[:, 1:]
    inter = T.relu(T.minimum(e1, e2) - T.maximum(s1, s2))
    union = (e1 - s1) + (e2 - s2) - inter
    hull = T.maximum(e1, e2) - T.minimum(s1, s2)
    return T.reshape(inter / union - (hull - union) / hull, (pred.shape[0],))


def loss_l1(spans: Tensor, gt_cw: Sequence[np.ndarray], matches: Sequence[MatchResult]) -> Tensor:
    pred, target, pw = _matched_rows(spans, gt_cw, matches)
    if pred is None:
        return Tensor(0.0)
    return T.sum(T.sum(T.abs(pred - target), axis=1) * pw)


def loss_giou(spans: Tensor, gt_cw: Sequence[np.ndarray], matches: Sequence[MatchResult]) -> Tensor:
    pred, target, pw = _matched_rows(spans, gt_cw, matches)
    if pred is None:
        return Tensor(0.0)
    return T.sum((1.0 - span_giou(pred, target)) * pw)


def loss_loc(spans: Tensor, gt_cw: Sequence[np.ndarray], matches: Sequence[MatchResult], weights: LossWeights) -> Tensor:
    """Mean over matched pairs of l1 * L1 + giou * (1 - GIoU); zero without gt."""
    return weights.l1 * loss_l1(spans, gt_cw, matches) + weights.giou * loss_giou(spans, gt_cw, matches)


def loss_sal(saliency: Tensor, pos: Sequence[int | None], neg: Sequence[int | None], margin: float = 0.2) -> Tensor:
    """Hinge max(0, margin + s[neg] - s[pos]) per sample; samples without a pair give 0."""
    B, L = saliency.shape
    keep = [b for b in range(B) if pos[b] is not None and neg[b] is not None]
    if not keep:
        return Tensor(0.0)
    flat = T.reshape(saliency, (B * L,))
    sp = T.take(flat, [b * L + pos[b] for b in keep])
    sn = T.take(flat, [b * L + neg[b] for b in keep])
    return T.sum(T.relu(margin + sn - sp)) * (1.0 / B)


def loss_dill(decoded_ori: Sequence[Tensor], decoded_base: Sequence) -> Tensor:
    """Per layer 1 - mean_i cos(ori_i, base_i), averaged over layers."""
    if len(decoded_ori) != len(decoded_base):
        raise ValueError("decoded layer counts differ")
    total = None
    for q, qb in zip(decoded_ori, decoded_base):
        qb = qb.data if isinstance(qb, Tensor) else np.asarray(qb)
        if q.shape != qb.shape:
            raise ValueError(f"decoded shapes differ: {q.shape} vs {qb.shape}")
        term = 1.0 - T.mean(T.cosine_sim(q, qb))
        total = term if total is None else total + term
    return total * (1.0 / len(decoded_ori))


def contrastive_term(p, n, tau: float) -> Tensor:
    """-log(e^{p/tau} / (e^{p/tau} + e^{n/tau})), written as softplus((n - p)/tau)."""
    return T.softplus((T.as_tensor(n) - T.as_tensor(p)) * (1.0 / tau))


def frame_scores(video: Tensor, eos: Tensor) -> Tensor:
    """Cosine between every encoded frame and the end-of-sequence embedding: (B, L)."""
    B, C = eos.shape
    return T.cosine_sim(video, T.reshape(eos, (B, 1, C)))


def loss_disc(video: Tensor, eos: Tensor, samples: Sequence[Sample], tau: float) -> Tensor:
    """Ranking of mean gt-frame score over mean ambiguous-frame score.

    Samples lacking gt or ambiguous spans contribute 0.
    """
    B, L, _ = video.shape
    keep = [b for b, s in enumerate(samples) if s.gt_spans and s.ambiguous_spans]
    if not keep:
        return Tensor(0.0)
    M = frame_scores(T.take(video, keep, axis=0), T.take(eos, keep, axis=0))
    pos = np.stack([indicator_mask(samples[b].gt_spans, L) for b in keep]).astype(np.float64)
    amb = np.stack([indicator_mask(samples[b].ambiguous_spans, L) for b in keep]).astype(np.float64)
    p = T.sum(M * (pos / pos.sum(1, keepdims=True)), axis=1)
    n = T.sum(M * (amb / amb.sum(1, keepdims=True)), axis=1)
    return T.sum(contrastive_term(p, n, tau)) * (1.0 / B)


# composition

@dataclass
class LossBreakdown:
    total: Tensor
    terms: dict[str, float] = field(default_factory=dict)
    matches: list[MatchResult] = field(default_factory=list)


def total_loss_stage1(out, samples: Sequence[Sample], weights: LossWeights,
                      matches: Sequence[MatchResult] | None = None) -> LossBreakdown:
    """cls * L_cls + (l1 * L1 + giou * L_giou) + sal * L_sal over all predictions in ``out``."""
    if matches is None:
        matches = match_batch(out.spans.data, out.scores, samples, weights)
    gt_cw = [normalized_gt(s.gt_spans, s.length) for s in samples]
    l_cls = loss_cls(out.logits, matches, weights.unmatched_weight)
    l_l1 = loss_l1(out.spans, gt_cw, matches)
    l_giou = loss_giou(out.spans, gt_cw, matches)
    l_sal = loss_sal(out.saliency, [s.saliency_pos for s in samples], [s.saliency_neg for s in samples],
                     weights.saliency_margin)
    total = weights.cls * l_cls + weights.l1 * l_l1 + weights.giou * l_giou + weights.sal * l_sal
    terms = {"cls": l_cls.item(), "l1": l_l1.item(), "giou": l_giou.item(), "sal": l_sal.item()}
    return LossBreakdown(total, terms, list(matches))


def total_loss_stage2(out, base_decoded: Sequence, samples: Sequence[Sample], weights: LossWeights,
                      use_dill: bool = True, use_disc: bool = True) -> LossBreakdown:
    """Stage-1 total on the pooled predictions plus distillation and contrastive terms."""
    res = total_loss_stage1(out, samples, weights)
    total = res.total
    if use_dill:
        l_dill = loss_dill(out.decoded["ori"], base_decoded)
        total = total + weights.dill * l_dill
        res.terms["dill"] = l_dill.item()
    if use_disc:
        l_disc = loss_disc(out.encoded_video, out.eos_embedding, samples, weights.tau)
        total = total + weights.disc * l_disc
        res.terms["disc"] = l_disc.item()
    res.total = total
    return res


@dataclass
class PredictionSet:
    """Predicted windows in frames (P x 2, [start, end)) with confidences."""

    windows: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.windows = np.asarray(self.windows, dtype=np.float64).reshape(-1, 2)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if self.windows.shape[0] != self.scores.shape[0]:
            raise ValueError("windows and scores have different lengths")

    def __len__(self) -> int:
        return self.scores.shape[0]

    def order(self) -> np.ndarray:
        """Indices by descending score, lower index first on ties."""
        return np.lexsort((np.arange(len(self)), -self.scores))

    def top1(self) -> int:
        return int(self.order()[0])


def pool_predictions(ori: PredictionSet, act: PredictionSet) -> PredictionSet:
    return PredictionSet(np.concatenate([ori.windows, act.windows]), np.concatenate([ori.scores, act.scores]))
