import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amr.domain import (Dataset, NormalizedSpan, SampleError, SpanError, TemporalSpan, draw_saliency_pair,
                        from_normalized, giou, indicator_mask, iou, split_two_fold, to_normalized)
from conftest import make_sample

S = TemporalSpan


@st.composite
def spans(draw, length=60):
    start = draw(st.integers(0, length - 1))
    return S(start, draw(st.integers(start + 1, length)))


def test_span_validation():
    with pytest.raises(SpanError):
        S(3, 3)
    with pytest.raises(SpanError):
        S(-1, 2)
    with pytest.raises(SpanError):
        S(0.0, 2)
    assert S(np.int64(1), 4).length == 3


def test_iou_examples():
    assert iou(S(0, 10), S(5, 15)) == pytest.approx(1 / 3)
    assert iou(S(0, 5), S(5, 10)) == 0.0
    assert iou(S(2, 7), S(2, 7)) == 1.0
    assert iou(S(0, 10), S(2, 4)) == pytest.approx(0.2)


def test_giou_examples():
    assert giou(S(0, 1), S(2, 3)) == pytest.approx(-1 / 3)
    assert giou(S(0, 10), S(5, 15)) == pytest.approx(1 / 3)
    assert giou(S(4, 9), S(4, 9)) == 1.0


@settings(max_examples=300, deadline=None)
@given(spans(), spans())
def test_iou_giou_properties(a, b):
    v, g = iou(a, b), giou(a, b)
    assert 0.0 <= v <= 1.0
    assert -1.0 < g <= v
    assert v == iou(b, a) and g == giou(b, a)


def test_indicator_mask():
    assert indicator_mask([S(2, 4)], 6).tolist() == [0, 0, 1, 1, 0, 0]
    assert indicator_mask([S(0, 2), S(1, 3)], 4).tolist() == [1, 1, 1, 0]
    assert indicator_mask([], 3).tolist() == [0, 0, 0]
    with pytest.raises(SpanError):
        indicator_mask([S(2, 7)], 6)


def test_normalization_example():
    assert to_normalized(S(25, 75), 100) == NormalizedSpan(0.5, 0.5)
    assert from_normalized(NormalizedSpan(0.5, 0.5), 100) == S(25, 75)


def test_decode_rounds_half_up_and_clamps():
    assert from_normalized(NormalizedSpan(0.5, 0.05), 10) == S(5, 6)  # 4.75 -> 5, 5.25 -> 5, widened
    assert from_normalized(NormalizedSpan(0.0, 0.5), 8) == S(0, 2)
    assert from_normalized(NormalizedSpan(1.2, 0.1), 8) == S(7, 8)
    assert from_normalized(NormalizedSpan(0.125, 0.25), 8) == S(0, 2)
    with pytest.raises(SpanError):
        to_normalized(S(0, 1), 0)


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 500).flatmap(lambda L: st.tuples(st.just(L), spans(L))))
def test_normalization_round_trip(case):
    L, span = case
    assert from_normalized(to_normalized(span, L), L) == span


def test_sample_validation():
    with pytest.raises(SampleError, match="exceeds"):
        make_sample(gt=((2, 20),))
    with pytest.raises(SampleError, match="overlapping"):
        make_sample(gt=((2, 5), (4, 7)))
    with pytest.raises(SampleError, match="ambiguous"):
        make_sample(gt=((2, 5),), amb=((4, 6),))
    with pytest.raises(SampleError, match="saliency_pos"):
        make_sample(gt=((2, 5),), pos=6)
    with pytest.raises(SampleError, match="saliency_neg"):
        make_sample(gt=((2, 5),), neg=3)
    s = make_sample(gt=((6, 8), (2, 5)), amb=((9, 10), (9, 10)))
    assert s.gt_spans == (S(2, 5), S(6, 8))
    assert s.ambiguous_spans == (S(9, 10),)
    assert not s.features.flags.writeable


def test_with_helpers_return_new_samples():
    s = make_sample(gt=((2, 5),))
    t = s.with_ambiguous([S(8, 10)]).with_saliency(3, 9)
    assert s.ambiguous_spans == () and s.saliency_pos is None
    assert t.ambiguous_spans == (S(8, 10),) and (t.saliency_pos, t.saliency_neg) == (3, 9)


def test_saliency_pair_is_inside_and_outside():
    s = make_sample(gt=((2, 5), (8, 9)))
    rng = np.random.default_rng(0)
    for _ in range(50):
        p, n = draw_saliency_pair(s, rng)
        assert p in (2, 3, 4, 8) and n not in (2, 3, 4, 8)
    assert draw_saliency_pair(make_sample(gt=()), rng) == (None, None)
    assert draw_saliency_pair(make_sample(length=4, gt=((0, 4),)), rng) == (None, None)


def test_dataset_rules(toy_dataset):
    with pytest.raises(SampleError, match="duplicate"):
        Dataset((make_sample(0), make_sample(0)))
    with pytest.raises(SampleError, match="split"):
        Dataset((), "test")
    assert len(toy_dataset) == 6 and toy_dataset[0].query_id == "q0"
    assert set(toy_dataset.by_query()) == {f"q{i}" for i in range(6)}


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 30), st.integers(0, 1000))
def test_two_fold_split(n, seed):
    ds = Dataset(tuple(make_sample(i) for i in range(n)))
    d1, d2 = split_two_fold(ds, np.random.default_rng(seed))
    q1, q2 = {s.query_id for s in d1}, {s.query_id for s in d2}
    assert not q1 & q2 and len(q1 | q2) == n
    assert abs(len(d1) - len(d2)) <= 1
    assert (d1.split_tag, d2.split_tag) == ("d1", "d2")
    again = split_two_fold(ds, np.random.default_rng(seed))[0]
    assert [s.query_id for s in again] == [s.query_id for s in d1]


def test_two_fold_needs_two():
    with pytest.raises(SampleError):
        split_two_fold(Dataset((make_sample(0),)), np.random.default_rng(0))
