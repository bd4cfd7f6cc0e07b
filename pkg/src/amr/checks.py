"""Self-checks shared by the CLI and the test suite.

``grad_check`` runs the finite-difference harness over every loss term and
both stage totals. ``oracle_check`` compares the assignment solver and the AP
kernel against deliberately naive reference implementations.
"""
from __future__ import annotations

import functools
import itertools
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .domain import Sample, TemporalSpan, iou
from .evaluate import average_precision
from .kernels import linear_sum_assignment
from .losses import (LossWeights, MatchResult, PredictionSet, loss_cls, loss_dill, loss_disc, loss_giou,
                     loss_l1, loss_sal, match_batch, total_loss_stage1, total_loss_stage2)
from .model import Batch, Model, ModelConfig, freeze_as_base, make_distill_model
from .tensor import Tensor, finite_diff_check

GRAD_TOLERANCE = 1e-4
LOSS_TERMS = ("cls", "l1", "giou", "sal", "dill", "disc", "stage1", "stage2")


# reference implementations

def brute_force_assignment(cost: np.ndarray) -> float:
    """Minimum total cost over all injective row -> column maps (rows <= cols)."""
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    perms = _permutations(n, m)
    return float(cost[np.arange(n), perms].sum(axis=1).min())


@functools.lru_cache(maxsize=None)
def _permutations(n: int, m: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(m), n)), dtype=np.intp).reshape(-1, n)


def reference_average_precision(windows: np.ndarray, scores: np.ndarray, gt: list[TemporalSpan],
                                threshold: float) -> float:
    """Greedy matching in score order, then the area under the interpolated PR envelope.

    Written with plain loops so it shares no code with the kernels.
    """
    if not gt:
        return 0.0
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    used = [False] * len(gt)
    hits = []
    for i in order:
        span = TemporalSpan(int(windows[i][0]), int(windows[i][1]))
        best, best_j = -1.0, -1
        for j, g in enumerate(gt):
            if used[j]:
                continue
            v = iou(span, g)
            if v >= threshold and v > best:
                best, best_j = v, j
        if best_j >= 0:
            used[best_j] = True
        hits.append(best_j >= 0)
    precision, recall = [], []
    tp = 0
    for k, h in enumerate(hits, start=1):
        tp += h
        precision.append(tp / k)
        recall.append(tp / len(gt))
    ap, prev = 0.0, 0.0
    for k in range(len(hits)):
        if hits[k]:
            ap += (recall[k] - prev) * max(precision[k:])
            prev = recall[k]
    return ap


def _random_span(rng: np.random.Generator, length: int, longest: int | None = None) -> TemporalSpan:
    longest = longest or length
    s = int(rng.integers(0, length - 1))
    return TemporalSpan(s, int(rng.integers(s + 1, min(length, s + longest) + 1)))


def oracle_check(trials: int = 1000, sizes: Iterable[int] = range(2, 8), seed: int = 0) -> dict[str, int]:
    """Count mismatches between fast kernels and their references; all zeros means pass."""
    rng = np.random.default_rng([seed, 9001])
    out = {}
    for n in sizes:
        bad = 0
        for _ in range(trials):
            cost = rng.normal(size=(n, n))
            r, c = linear_sum_assignment(cost)
            if abs(float(cost[r, c].sum()) - brute_force_assignment(cost)) > 1e-9:
                bad += 1
        out[f"hungarian_n{n}"] = bad
    bad = 0
    for _ in range(trials):
        L = 30
        gt_count = int(rng.integers(1, 4))
        gt: list[TemporalSpan] = []
        while len(gt) < gt_count:
            g = _random_span(rng, L, longest=8)  # short enough that three always fit
            if all(iou(g, h) == 0 for h in gt):
                gt.append(g)
        p = int(rng.integers(1, 6))
        windows = np.array([_random_span(rng, L).as_list() for _ in range(p)], dtype=np.float64)
        scores = rng.integers(0, 4, size=p) / 4.0  # coarse scores force ties
        thr = float(rng.choice([0.3, 0.5, 0.7]))
        fast = average_precision(PredictionSet(windows, scores), sorted(gt), thr)
        if abs(fast - reference_average_precision(windows, scores, sorted(gt), thr)) > 1e-12:
            bad += 1
    out["average_precision"] = bad
    return out


# finite-difference harness

def _toy_sample(rng: np.random.Generator, i: int, length: int, dim: int, with_ambiguous: bool) -> Sample:
    g = TemporalSpan(2, 2 + int(rng.integers(3, 7)))
    amb = (TemporalSpan(length - 3, length - 1),) if with_ambiguous else ()
    return Sample(f"v{i}", f"q{i}", rng.normal(size=(length, dim)), rng.normal(size=(4, dim)), (g,), amb,
                  saliency_pos=g.start + 1, saliency_neg=length - 1)


def _random_matches(rng: np.random.Generator, batch: int, preds: int, gts: int) -> list[MatchResult]:
    out = []
    for _ in range(batch):
        chosen = rng.permutation(preds)[:gts]
        pairs = tuple((int(p), j) for j, p in enumerate(chosen))
        out.append(MatchResult(pairs, tuple(sorted(set(range(preds)) - set(chosen.tolist())))))
    return out


def _spans_point(rng: np.random.Generator, shape) -> np.ndarray:
    c = rng.uniform(0.25, 0.75, shape[:-1])
    w = rng.uniform(0.1, 0.4, shape[:-1])
    return np.stack([c, w], axis=-1)


def _nested(a: np.ndarray, b: np.ndarray) -> bool:
    s1, e1 = a[0] - a[1] / 2, a[0] + a[1] / 2
    s2, e2 = b[0] - b[1] / 2, b[0] + b[1] / 2
    return (s1 <= s2 and e2 <= e1) or (s2 <= s1 and e1 <= e2)


def _giou_point(rng: np.random.Generator, gt_cw: list, matches: list[MatchResult], preds: int) -> np.ndarray:
    """Spans where no matched pair is nested; nesting makes the center gradient exactly zero."""
    while True:
        x = _spans_point(rng, (len(matches), preds, 2))
        if not any(_nested(x[b, p], gt_cw[b][g]) for b, m in enumerate(matches) for p, g in m.pairs):
            return x


def _term_checks(rng: np.random.Generator) -> dict[str, float]:
    B, N, G = 2, 5, 2
    matches = _random_matches(rng, B, N, G)
    gt_cw = [_spans_point(rng, (G, 2)) for _ in range(B)]
    res = {}
    res["cls"] = finite_diff_check(lambda x: loss_cls(x, matches, 0.1), rng.normal(size=(B, N)))
    res["l1"] = finite_diff_check(lambda x: loss_l1(x, gt_cw, matches), _spans_point(rng, (B, N, 2)))
    res["giou"] = finite_diff_check(lambda x: loss_giou(x, gt_cw, matches), _giou_point(rng, gt_cw, matches, N))
    L = 12
    pos = [int(rng.integers(0, L)) for _ in range(B)]
    neg = [int((p + 1 + rng.integers(0, L - 1)) % L) for p in pos]
    res["sal"] = finite_diff_check(lambda x: loss_sal(x, pos, neg, 0.2), rng.normal(size=(B, L)))
    base = [rng.normal(size=(B, 4, 8)) for _ in range(2)]
    other = rng.normal(size=(B, 4, 8))

    def dill(x: Tensor) -> Tensor:
        return loss_dill([x, x * 0.5 + other], base)

    res["dill"] = finite_diff_check(dill, rng.normal(size=(B, 4, 8)))
    samples = [_toy_sample(rng, i, L, 6, True) for i in range(B)]
    eos = Tensor(rng.normal(size=(B, 6)))
    video = rng.normal(size=(B, L, 6))
    disc_v = finite_diff_check(lambda x: loss_disc(x, eos, samples, 0.5), video)
    disc_e = finite_diff_check(lambda x: loss_disc(Tensor(video), x, samples, 0.5), eos.data)
    res["disc"] = max(disc_v, disc_e)
    return res


_TINY = dict(hidden_dim=8, num_encoder_layers=1, num_decoder_layers=2, num_heads=2, num_queries=4,
             ffn_dim=16, video_dim=6, text_dim=6, max_query_len=8)
# parameters whose gradient is generically far from zero, so relative error is meaningful
_PROBE = ("head.span2.w", "head.score.w", "head.saliency.w", "dec.q_ori", "dec.1.ffn.fc2.w",
          "dec.0.ca.v.w", "in.video.w", "enc.0.ca.q.w")
_PROBE_ACT = ("dec.q_act", "dec.1.ffn_act.fc2.w")


def _param_probe(model: Model, name: str, rng: np.random.Generator, loss: Callable[[], Tensor],
                 coords: int = 4) -> float:
    """Finite-difference a few coordinates of one parameter through ``loss``."""
    original = model.params[name]
    flat = original.data.reshape(-1)
    idx = rng.choice(flat.size, size=min(coords, flat.size), replace=False)
    frozen = flat.copy()
    frozen[idx] = 0.0
    scatter = np.zeros((idx.size, flat.size))
    scatter[np.arange(idx.size), idx] = 1.0

    def f(x: Tensor) -> Tensor:
        full = T.reshape(T.reshape(x, (1, idx.size)) @ scatter, original.shape) + frozen.reshape(original.shape)
        model.params[name] = full
        try:
            return loss()
        finally:
            model.params[name] = original

    return finite_diff_check(f, flat[idx].copy())


def _total_checks(rng: np.random.Generator, seed: int) -> dict[str, float]:
    cfg = ModelConfig(**_TINY)
    model = Model(cfg, np.random.default_rng([seed, 1]))
    samples = [_toy_sample(rng, i, 12, 6, True) for i in range(2)]
    batch = Batch.from_samples(samples)
    weights = LossWeights()
    # matching is piecewise constant in the parameters; freeze it at the evaluation point
    with T.no_grad():
        out = model(batch)
    m1 = match_batch(out.spans.data, out.scores, samples, weights)

    def stage1() -> Tensor:
        return total_loss_stage1(model(batch), samples, weights, matches=m1).total

    worst1 = max(_param_probe(model, n, rng, stage1) for n in rng.choice(_PROBE, size=2, replace=False))

    base = freeze_as_base(model)
    dual = make_distill_model(base, np.random.default_rng([seed, 2]), act_noise=0.1)
    base_dec = base.decoded_queries(batch)
    with T.no_grad():
        out2 = dual(batch)
    m2 = match_batch(out2.spans.data, out2.scores, samples, weights)

    def stage2() -> Tensor:
        o = dual(batch)
        res = total_loss_stage2(o, base_dec, samples, weights)
        # swap in the frozen matching: the stage-2 total is the stage-1 total plus the extra terms
        fixed = total_loss_stage1(o, samples, weights, matches=m2).total
        return res.total - total_loss_stage1(o, samples, weights).total + fixed

    names = list(rng.choice(_PROBE, size=1)) + list(rng.choice(_PROBE_ACT, size=1))
    worst2 = max(_param_probe(dual, n, rng, stage2) for n in names)
    return {"stage1": worst1, "stage2": worst2}


def grad_check(seeds: Iterable[int] = range(100)) -> dict[str, float]:
    """Worst relative error per loss term over ``seeds``."""
    worst = {k: 0.0 for k in LOSS_TERMS}
    for seed in seeds:
        rng = np.random.default_rng([seed, 4242])
        for k, v in {**_term_checks(rng), **_total_checks(rng, seed)}.items():
            worst[k] = max(worst[k], v)
    return worst
