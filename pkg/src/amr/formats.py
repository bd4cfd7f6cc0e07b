"""On-disk formats: feature files, annotation lines, predictions, reports, checkpoints.

Feature file ("AMRF"), little-endian::

    magic   4 bytes  b"AMRF"
    version u32      1
    rows    u32      L
    cols    u32      C
    payload L*C float32, row-major

Checkpoint ("AMRC"), little-endian::

    magic   4 bytes  b"AMRC"
    version u32      1
    cfg_len u32      length of the UTF-8 JSON config block
    config  cfg_len bytes
    count   u32      number of parameter blobs
    per blob: name_len u16, name UTF-8, ndim u32, dims ndim*u32, payload float64
"""
from __future__ import annotations

import json
import math
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .domain import Dataset, Sample, TemporalSpan
from .losses import PredictionSet

FEATURE_MAGIC = b"AMRF"
CHECKPOINT_MAGIC = b"AMRC"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    pass


# feature files

def encode_features(matrix: np.ndarray) -> bytes:
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise FormatError(f"feature matrix must be 2-D, got shape {m.shape}")
    return _HEADER.pack(FEATURE_MAGIC, FORMAT_VERSION, m.shape[0], m.shape[1]) + m.astype("<f4").tobytes()


def decode_features(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise FormatError(f"{source}: header truncated at byte {len(buf)}, need {_HEADER.size}")
    magic, version, rows, cols = _HEADER.unpack_from(buf)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r} at byte 0")
    if version != FORMAT_VERSION:
        raise FormatError(f"{source}: unsupported version {version} at byte 4")
    expected = 4 * rows * cols
    actual = len(buf) - _HEADER.size
    if actual != expected:
        raise FormatError(f"{source}: payload has {actual} bytes, expected {expected} (from byte {_HEADER.size})")
    arr = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(rows, cols)
    bad = np.flatnonzero(~np.isfinite(arr.reshape(-1)))
    if bad.size:
        raise FormatError(f"{source}: non-finite value at byte {_HEADER.size + 4 * int(bad[0])}")
    return arr.astype(np.float64)


def write_features(path, matrix: np.ndarray) -> None:
    Path(path).write_bytes(encode_features(matrix))


def read_features(path) -> np.ndarray:
    return decode_features(Path(path).read_bytes(), str(path))


# annotation lines

def sample_to_record(sample: Sample, query_feature_path: str, video_feature_path: str) -> dict:
    rec = {
        "qid": sample.query_id,
        "vid": sample.video_id,
        "query_feature_path": query_feature_path,
        "video_feature_path": video_feature_path,
        "spans": [s.as_list() for s in sample.gt_spans],
    }
    if sample.ambiguous_spans:
        rec["ambiguous_spans"] = [s.as_list() for s in sample.ambiguous_spans]
    if sample.saliency_pos is not None and sample.saliency_neg is not None:
        rec["saliency"] = {"pos": sample.saliency_pos, "neg": sample.saliency_neg}
    return rec


def _spans(raw, field: str, qid: str, fps: float | None) -> tuple[TemporalSpan, ...]:
    if not isinstance(raw, list):
        raise FormatError(f"{qid}: field {field!r} must be a list of [start, end]")
    out = []
    for pair in raw:
        if not (isinstance(pair, (list, tuple)) and len(pair) == 2):
            raise FormatError(f"{qid}: field {field!r} has malformed entry {pair!r}")
        s, e = pair
        if fps is not None:
            s, e = math.floor(s * fps + 0.5), math.floor(e * fps + 0.5)
        if not (float(s).is_integer() and float(e).is_integer()):
            raise FormatError(f"{qid}: field {field!r} needs integer frame bounds, got {pair!r}")
        try:
            out.append(TemporalSpan(int(s), int(e)))
        except ValueError as exc:
            raise FormatError(f"{qid}: field {field!r}: {exc}") from exc
    return tuple(out)


_REQUIRED = ("qid", "vid", "query_feature_path", "video_feature_path", "spans")
_OPTIONAL = ("ambiguous_spans", "saliency")


def record_to_sample(rec: dict, base_dir: Path, fps: float | None = None, cache: dict | None = None) -> Sample:
    for key in _REQUIRED:
        if key not in rec:
            raise FormatError(f"annotation record is missing field {key!r}")
    unknown = set(rec) - set(_REQUIRED) - set(_OPTIONAL) - {"confidence", "source_fold"}
    if unknown:
        raise FormatError(f"{rec['qid']}: unknown field(s) {sorted(unknown)}")
    cache = {} if cache is None else cache

    def load(rel: str) -> np.ndarray:
        p = (base_dir / rel).resolve()
        if p not in cache:
            if not p.exists():
                raise FormatError(f"{rec['qid']}: feature file {rel} does not exist")
            cache[p] = read_features(p)
        return cache[p]

    sal = rec.get("saliency") or {}
    try:
        return Sample(
            video_id=str(rec["vid"]),
            query_id=str(rec["qid"]),
            features=load(rec["video_feature_path"]),
            query_tokens=load(rec["query_feature_path"]),
            gt_spans=_spans(rec["spans"], "spans", rec["qid"], fps),
            ambiguous_spans=_spans(rec.get("ambiguous_spans", []), "ambiguous_spans", rec["qid"], fps),
            saliency_pos=sal.get("pos"),
            saliency_neg=sal.get("neg"),
        )
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(str(exc)) from exc


def read_jsonl(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
    return out


def write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_annotations(path, split_tag: str = "train", fps: float | None = None) -> Dataset:
    path = Path(path)
    cache: dict = {}
    samples = [record_to_sample(r, path.parent, fps, cache) for r in read_jsonl(path)]
    return Dataset(tuple(samples), split_tag)


def read_gt_spans(path, fps: float | None = None) -> dict[str, tuple[TemporalSpan, ...]]:
    """Ground truth per qid, without touching feature files."""
    out = {}
    for rec in read_jsonl(path):
        for key in ("qid", "spans"):
            if key not in rec:
                raise FormatError(f"{path}: annotation record is missing field {key!r}")
        out[str(rec["qid"])] = tuple(sorted(_spans(rec["spans"], "spans", rec["qid"], fps)))
    return out


def write_dataset(directory, dataset: Dataset, name: str) -> Path:
    """Write features under ``directory/features`` and ``directory/<name>.jsonl``; return the jsonl path."""
    directory = Path(directory)
    (directory / "features").mkdir(parents=True, exist_ok=True)
    records = []
    for s in dataset:
        vrel = f"features/{_safe(s.video_id)}.video.amrf"
        qrel = f"features/{_safe(s.query_id)}.query.amrf"
        write_features(directory / vrel, s.features)
        write_features(directory / qrel, s.query_tokens)
        records.append(sample_to_record(s, qrel, vrel))
    out = directory / f"{name}.jsonl"
    write_jsonl(out, records)
    return out


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)


# predictions and metric reports

def write_predictions(path, qids: Sequence[str], preds: Sequence[PredictionSet]) -> None:
    write_jsonl(path, ({"qid": q, "pred": [[int(w[0]), int(w[1]), float(s)] for w, s in zip(p.windows, p.scores)]}
                       for q, p in zip(qids, preds)))


def read_predictions(path) -> dict[str, PredictionSet]:
    out = {}
    for rec in read_jsonl(path):
        if "qid" not in rec or "pred" not in rec:
            raise FormatError(f"{path}: prediction record needs 'qid' and 'pred'")
        rows = rec["pred"]
        if not all(isinstance(r, list) and len(r) == 3 for r in rows):
            raise FormatError(f"{path}: {rec['qid']}: each prediction must be [start, end, score]")
        arr = np.array(rows, dtype=np.float64).reshape(-1, 3)
        out[str(rec["qid"])] = PredictionSet(arr[:, :2], arr[:, 2])
    return out


def write_report(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8")


# checkpoints

def encode_checkpoint(config: dict, params: dict[str, np.ndarray]) -> bytes:
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", FORMAT_VERSION, len(cfg)), cfg, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes, source: str = "<bytes>") -> tuple[dict, dict[str, np.ndarray]]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"{source}: truncated at byte {pos}, need {n} more bytes")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{source}: bad checkpoint magic at byte 0")
    version, cfg_len = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version} at byte 4")
    config = json.loads(take(cfg_len).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(dims)) if ndim else 1
        params[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(buf):
        raise FormatError(f"{source}: {len(buf) - pos} trailing bytes after byte {pos}")
    return config, params


def save_checkpoint(path, model) -> None:
    Path(path).write_bytes(encode_checkpoint(model.config.to_dict(), model.state_dict()))


def load_checkpoint(path):
    from .model import Model, ModelConfig

    config, params = decode_checkpoint(Path(path).read_bytes(), str(path))
    model = Model(ModelConfig(**config))
    model.load_state_dict(params)
    return model


# negative dumps

def negatives_to_records(negatives) -> list[dict]:
    return [{"qid": n.query_id, "vid": n.video_id, "spans": [n.span.as_list()],
             "confidence": n.confidence, "source_fold": n.source_fold} for n in negatives]


def records_to_negatives(records: Iterable[dict]):
    from .augment import MinedNegative

    out = []
    for r in records:
        for s, e in r["spans"]:
            out.append(MinedNegative(str(r["vid"]), str(r["qid"]), TemporalSpan(int(s), int(e)),
                                     float(r["confidence"]), str(r["source_fold"])))
    return out
