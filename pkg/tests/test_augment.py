import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amr.augment import (AugmentConfig, Insertion, MiningError, MinedNegative, PlanError, RateError, SegmentRef,
                         SegmentStore, SplicePlan, attach_negatives, build_augmented_dataset, mine_negatives,
                         mining_precision, retained, splice, undersample_indices, undersample_segment)
from amr.domain import Dataset, TemporalSpan as S, iou
from amr.losses import PredictionSet
from amr.synth import SynthConfig, generate
from conftest import make_sample


# undersampling

def test_undersample_identity():
    rows = np.arange(20.0).reshape(10, 2)
    assert np.array_equal(undersample_segment(rows, 1.0), rows)


def test_undersample_trace():
    assert undersample_indices(10, 0.5).tolist() == [0, 2, 5, 7, 9]


def test_undersample_errors():
    with pytest.raises(RateError):
        undersample_indices(10, 0.1)
    with pytest.raises(RateError):
        undersample_indices(1, 1.0)
    with pytest.raises(RateError):
        undersample_indices(10, 0.0)


@settings(max_examples=1000, deadline=None)
@given(st.integers(2, 200), st.floats(0.0, 1.0, exclude_min=True))
def test_undersample_count(size, rate):
    if math.ceil(rate * size - 1e-9) < 2:
        with pytest.raises(RateError):
            undersample_indices(size, rate)
        return
    idx = undersample_indices(size, rate)
    assert len(idx) == math.ceil(rate * size - 1e-9)
    assert idx[0] == 0 and idx[-1] == size - 1
    assert np.all(np.diff(idx) > 0)


# splicing

def _store_with(segment_rows, source):
    ref = SegmentRef(source.video_id, source.query_id, S(0, len(segment_rows)), "gt")
    store = SegmentStore(sources={source.query_id: source})
    store.add(ref, segment_rows)
    return ref, store


def test_splice_fixture():
    rng = np.random.default_rng(0)
    bg = make_sample(1, length=100, dim=3, gt=((50, 60),), rng=rng)
    src = make_sample(2, length=30, dim=3, gt=((4, 12),), rng=rng)
    ref, store = _store_with(src.features[4:12], src)
    out = splice(bg, SplicePlan(bg.video_id, src.query_id, (Insertion(ref, 20, "gt"),)), store)
    assert out.length == 100 and out.gt_spans == (S(20, 28),)
    assert np.array_equal(out.features[20:28], src.features[4:12])
    assert np.array_equal(out.features[:20], bg.features[:20])
    assert np.array_equal(out.features[28:], bg.features[28:])
    assert np.array_equal(out.query_tokens, src.query_tokens)


def test_splice_empty_plan_is_noop():
    bg = make_sample(1, length=20)
    out = splice(bg, SplicePlan(bg.video_id, bg.query_id), SegmentStore())
    assert np.array_equal(out.features, bg.features) and out.gt_spans == ()


def test_splice_plan_errors():
    bg = make_sample(1, length=20, dim=3)
    src = make_sample(2, length=20, dim=3)
    ref, store = _store_with(src.features[:6], src)
    with pytest.raises(PlanError, match="overlap"):
        splice(bg, SplicePlan(bg.video_id, src.query_id, (Insertion(ref, 2, "gt"), Insertion(ref, 5, "gt"))), store)
    with pytest.raises(PlanError, match="exceeds"):
        splice(bg, SplicePlan(bg.video_id, src.query_id, (Insertion(ref, 16, "gt"),)), store)
    own, store2 = _store_with(bg.features[:4], bg)
    with pytest.raises(PlanError, match="own video"):
        splice(bg, SplicePlan(bg.video_id, bg.query_id, (Insertion(own, 0, "gt"),)), store2)


# augmentation run

@pytest.fixture(scope="module")
def synth_train():
    return generate(SynthConfig(seed=3, num_samples=60), "train")


def _fake_negatives(ds):
    out = []
    for s in ds:
        free = [f for f in range(s.length - 4) if all(iou(S(f, f + 4), g) == 0 for g in s.gt_spans)]
        out.append(MinedNegative(s.video_id, s.query_id, S(free[0], free[0] + 4), 0.9, "d1-model-on-d2"))
    return out


def test_augmented_invariants_and_regeneration(synth_train):
    negs = _fake_negatives(synth_train)
    cfg = AugmentConfig(seed=5)
    aug = build_augmented_dataset(synth_train, negs, cfg)
    assert len(aug) == len(synth_train) - aug.meta["skipped"]
    assert aug.split_tag == "augmented"
    src = synth_train.by_query()
    for s in aug:
        assert s.length == src[s.query_id.split("#")[0]].length
        assert len(s.gt_spans) == len(src[s.query_id.split("#")[0]].gt_spans)
        for a in s.ambiguous_spans:
            assert all(iou(a, g) == 0 for g in s.gt_spans)
        assert s.saliency_pos is not None
    assert any(s.ambiguous_spans for s in aug)
    again = build_augmented_dataset(synth_train, negs, cfg)
    assert [s.features.tobytes() for s in aug] == [s.features.tobytes() for s in again]


def test_no_negatives_gives_no_ambiguous(synth_train):
    aug = build_augmented_dataset(synth_train, [], AugmentConfig(seed=1))
    assert all(not s.ambiguous_spans for s in aug)
    boost_off = build_augmented_dataset(synth_train, _fake_negatives(synth_train), AugmentConfig(seed=1, use_boost=False))
    assert all(not s.ambiguous_spans for s in boost_off)


def test_unplaceable_sample_is_skipped():
    real = Dataset((make_sample(0, length=12, gt=((0, 12),)), make_sample(1, length=4, gt=((0, 2),))))
    aug = build_augmented_dataset(real, [], AugmentConfig(seed=0, rate_range=(1.0, 1.0)))
    assert aug.meta["skipped"] == 1 and len(aug) == 1


# mining

def test_retention_conditions():
    gt = [S(10, 20)]
    assert retained(S(0, 5), 0.9, gt, 0.7)
    assert not retained(S(0, 11), 0.99, gt, 0.7)
    assert not retained(S(0, 5), 0.7, gt, 0.7)


def test_mine_negatives_with_scripted_trainer():
    ds = Dataset(tuple(make_sample(i, length=30, gt=((10, 15),)) for i in range(6)))
    calls = []

    def trainer(fold):
        calls.append({s.query_id for s in fold})

        def predict(samples):
            return [PredictionSet([[0, 5], [9, 14], [20, 25], [20, 25]], [0.9, 0.95, 0.6, 0.8]) for _ in samples]
        return predict

    mined = mine_negatives(ds, trainer, 0.7, np.random.default_rng(0))
    assert len(calls) == 2 and not calls[0] & calls[1] and len(calls[0] | calls[1]) == 6
    assert {n.query_id for n in mined} == {s.query_id for s in ds}
    for n in mined:
        assert n.confidence > 0.7 and iou(n.span, S(10, 15)) == 0
    per_query = [n for n in mined if n.query_id == "q0"]
    assert [(n.span, n.confidence) for n in per_query] == [(S(0, 5), 0.9), (S(20, 25), 0.8)]
    # each sample is mined by the model that never saw it
    for n in mined:
        fold = 0 if n.source_fold == "d1-model-on-d2" else 1
        assert n.query_id not in calls[fold]


def test_mining_errors():
    with pytest.raises(MiningError):
        mine_negatives(Dataset((make_sample(0),)), lambda f: None, 0.7, np.random.default_rng(0))
    ds = Dataset(tuple(make_sample(i) for i in range(4)))
    with pytest.raises(MiningError):
        mine_negatives(ds, lambda f: None, 1.0, np.random.default_rng(0))

    def diverge(fold):
        raise ArithmeticError("nan")

    with pytest.raises(MiningError, match="diverged"):
        mine_negatives(ds, diverge, 0.7, np.random.default_rng(0))


def test_attach_and_precision():
    ds = Dataset(tuple(make_sample(i, length=30, gt=((10, 15),)) for i in range(2)))
    negs = [MinedNegative("v0", "q0", S(0, 5), 0.9, "d1-model-on-d2"),
            MinedNegative("v0", "q0", S(20, 26), 0.8, "d1-model-on-d2")]
    out = attach_negatives(ds, negs)
    assert out[0].ambiguous_spans == (S(0, 5), S(20, 26)) and out[1].ambiguous_spans == ()
    assert mining_precision(negs, {"q0": [S(20, 25)]}) == 0.5
    assert mining_precision([], {}) == 0.0
