import json
import struct

import numpy as np
import pytest

from amr import formats as F
from amr.augment import MinedNegative
from amr.domain import Dataset, TemporalSpan as S
from amr.losses import PredictionSet
from amr.model import Model, ModelConfig
from conftest import TINY, make_sample


def test_feature_round_trip_bytes(tmp_path):
    m = np.random.default_rng(0).normal(size=(64, 64)).astype(np.float32)
    p = tmp_path / "a.amrf"
    F.write_features(p, m)
    raw = p.read_bytes()
    assert raw[:4] == b"AMRF" and struct.unpack("<III", raw[4:16]) == (1, 64, 64)
    F.write_features(tmp_path / "b.amrf", F.read_features(p))
    assert (tmp_path / "b.amrf").read_bytes() == raw


def test_feature_errors():
    good = F.encode_features(np.ones((2, 3)))
    with pytest.raises(F.FormatError, match="expected 24"):
        F.decode_features(good[:-4])
    with pytest.raises(F.FormatError, match="magic"):
        F.decode_features(b"XXXX" + good[4:])
    with pytest.raises(F.FormatError, match="version"):
        F.decode_features(good[:4] + struct.pack("<I", 9) + good[8:])
    with pytest.raises(F.FormatError, match="header"):
        F.decode_features(good[:5])
    nan = F.encode_features(np.array([[1.0, np.nan, 2.0]]))
    with pytest.raises(F.FormatError, match="byte 20"):
        F.decode_features(nan)
    with pytest.raises(F.FormatError):
        F.encode_features(np.ones(3))


def test_empty_annotation_file(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    assert len(F.read_annotations(p)) == 0


def test_dataset_round_trip(tmp_path):
    samples = [make_sample(i, gt=((2, 5),), amb=((8, 10),), pos=3, neg=9) for i in range(3)]
    ds = Dataset(tuple(samples))
    path = F.write_dataset(tmp_path, ds, "train")
    back = F.read_annotations(path)
    for a, b in zip(ds, back):
        assert (a.query_id, a.video_id, a.gt_spans, a.ambiguous_spans) == (b.query_id, b.video_id, b.gt_spans,
                                                                            b.ambiguous_spans)
        assert (a.saliency_pos, a.saliency_neg) == (b.saliency_pos, b.saliency_neg)
        assert np.array_equal(a.features.astype(np.float32), b.features)
    assert F.read_gt_spans(path) == {s.query_id: s.gt_spans for s in ds}


def _write_one(tmp_path, **rec):
    F.write_features(tmp_path / "v.amrf", np.zeros((10, 4)))
    F.write_features(tmp_path / "q.amrf", np.zeros((3, 4)))
    base = {"qid": "q", "vid": "v", "query_feature_path": "q.amrf", "video_feature_path": "v.amrf",
            "spans": [[1, 3]]}
    base.update(rec)
    p = tmp_path / "a.jsonl"
    p.write_text(json.dumps({k: v for k, v in base.items() if v is not None}) + "\n")
    return p


@pytest.mark.parametrize("rec,msg", [
    (dict(spans=None), "spans"),
    (dict(spans=[[1, 20]]), "exceeds"),
    (dict(spans=[[1.5, 3]]), "integer"),
    (dict(spans=[[1]]), "malformed"),
    (dict(extra=1), "extra"),
    (dict(video_feature_path="missing.amrf"), "does not exist"),
])
def test_annotation_errors_name_the_field(tmp_path, rec, msg):
    with pytest.raises(F.FormatError, match=msg):
        F.read_annotations(_write_one(tmp_path, **rec))


def test_fps_conversion(tmp_path):
    ds = F.read_annotations(_write_one(tmp_path, spans=[[0.5, 1.2]]), fps=2.0)
    assert ds[0].gt_spans == (S(1, 2),)


def test_malformed_json_line(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"qid": 1}\n{oops\n')
    with pytest.raises(F.FormatError, match=":2:"):
        F.read_jsonl(p)


def test_predictions_round_trip(tmp_path):
    preds = [PredictionSet([[0, 4], [5, 9]], [0.25, 0.75]), PredictionSet([[1, 2]], [0.5])]
    F.write_predictions(tmp_path / "p.jsonl", ["a", "b"], preds)
    back = F.read_predictions(tmp_path / "p.jsonl")
    assert back["a"].windows.tolist() == [[0, 4], [5, 9]] and back["a"].scores.tolist() == [0.25, 0.75]
    (tmp_path / "bad.jsonl").write_text('{"qid": "a", "pred": [[0, 1]]}\n')
    with pytest.raises(F.FormatError):
        F.read_predictions(tmp_path / "bad.jsonl")


def test_checkpoint_round_trip(tmp_path):
    m = Model(ModelConfig(**TINY), np.random.default_rng(0))
    F.save_checkpoint(tmp_path / "m.ckpt", m)
    back = F.load_checkpoint(tmp_path / "m.ckpt")
    assert back.digest() == m.digest() and back.config == m.config
    raw = (tmp_path / "m.ckpt").read_bytes()
    with pytest.raises(F.FormatError, match="truncated"):
        F.decode_checkpoint(raw[:-3])
    with pytest.raises(F.FormatError, match="trailing"):
        F.decode_checkpoint(raw + b"\0")
    with pytest.raises(F.FormatError, match="magic"):
        F.decode_checkpoint(b"NOPE" + raw[4:])


def test_negatives_round_trip():
    negs = [MinedNegative("v", "q", S(3, 7), 0.9, "d1-model-on-d2")]
    assert F.records_to_negatives(json.loads(json.dumps(F.negatives_to_records(negs)))) == negs
