"""Seeded synthetic planted-event benchmark.

Every video is a sequence of isotropic-noise frames with a few planted
events. Each event class has a video prototype and an unrelated text
prototype. A query names one target class: its events are the ground truth.
Near-miss distractors (the target prototype rotated by ``distractor_angle``)
and events of other classes are planted but left unlabeled.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .domain import Dataset, Sample, TemporalSpan, draw_saliency_pair


class SynthConfigError(ValueError):
    pass


class UnsupportedDatasetError(ValueError):
    pass


_SPLIT_CODES = {"train": 1, "val": 2}


@dataclass
class SynthConfig:
    num_samples: int = 200
    num_val: int = 50
    length: int = 64
    dim: int = 64
    num_event_classes: int = 4
    events_per_sample: tuple[int, int] = (1, 2)
    event_length: tuple[int, int] = (6, 14)
    distractors_per_sample: tuple[int, int] = (1, 1)
    other_events_per_sample: tuple[int, int] = (0, 0)
    distractor_angle: float = 0.3
    noise_sigma: float = 1.5
    query_len: int = 4
    token_noise: float = 0.3
    min_gap: int = 2
    seed: int = 0

    def __post_init__(self):
        for name in ("events_per_sample", "event_length", "distractors_per_sample", "other_events_per_sample"):
            lo, hi = getattr(self, name)
            setattr(self, name, (int(lo), int(hi)))
            if lo > hi or lo < 0:
                raise SynthConfigError(f"{name} must be an increasing non-negative range, got {(lo, hi)}")
        if not 0 < self.distractor_angle <= np.pi / 2:
            raise SynthConfigError("distractor_angle must lie in (0, pi/2]")
        if self.noise_sigma < 0:
            raise SynthConfigError("noise_sigma must be >= 0")
        if self.event_length[0] < 1:
            raise SynthConfigError("events need at least one frame")
        if self.events_per_sample[0] < 1:
            raise SynthConfigError("every sample needs at least one target event")
        if self.num_event_classes < 1 or self.query_len < 2:
            raise SynthConfigError("need >= 1 event class and >= 2 query tokens")
        most = self.events_per_sample[1] + self.distractors_per_sample[1] + self.other_events_per_sample[1]
        if self.event_length[1] * most + self.min_gap * (most - 1) > self.length:
            raise SynthConfigError(
                f"{most} events of up to {self.event_length[1]} frames do not fit in length {self.length}")
        if self.other_events_per_sample[1] > 0 and self.num_event_classes < 2:
            raise SynthConfigError("other-class events need at least two classes")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass
class Prototypes:
    video: np.ndarray  # classes x C, norm sqrt(C)
    distractor: np.ndarray  # classes x C
    text: np.ndarray  # classes x C
    eos: np.ndarray  # C


def _scaled_unit(v: np.ndarray, dim: int) -> np.ndarray:
    return v / np.linalg.norm(v) * np.sqrt(dim)


def make_prototypes(cfg: SynthConfig) -> Prototypes:
    rng = np.random.default_rng([cfg.seed, 0])
    C = cfg.dim
    video = np.stack([_scaled_unit(rng.normal(size=C), C) for _ in range(cfg.num_event_classes)])
    distractor = np.empty_like(video)
    for k in range(cfg.num_event_classes):
        u = rng.normal(size=C)
        u -= (u @ video[k]) / (video[k] @ video[k]) * video[k]
        u = _scaled_unit(u, C)
        distractor[k] = np.cos(cfg.distractor_angle) * video[k] + np.sin(cfg.distractor_angle) * u
    text = np.stack([_scaled_unit(rng.normal(size=C), C) for _ in range(cfg.num_event_classes)])
    eos = _scaled_unit(rng.normal(size=C), C)
    return Prototypes(video, distractor, text, eos)


def _place(lengths: list[int], total: int, gap: int, rng: np.random.Generator) -> list[int]:
    """Random non-overlapping starts (in the given order) with at least ``gap`` frames between events."""
    slack = total - sum(lengths) - gap * (len(lengths) - 1)
    if slack < 0:
        raise SynthConfigError("events do not fit")
    cuts = np.sort(rng.integers(0, slack + 1, size=len(lengths)))
    starts, pos, used = [], 0, 0
    for i, n in enumerate(lengths):
        pos += int(cuts[i]) - used
        used = int(cuts[i])
        starts.append(pos)
        pos += n + gap
    return starts


def _make_sample(cfg: SynthConfig, protos: Prototypes, split: str, i: int):
    rng = np.random.default_rng([cfg.seed, _SPLIT_CODES[split], i])
    C, L = cfg.dim, cfg.length
    target = int(rng.integers(cfg.num_event_classes))
    n_t = int(rng.integers(cfg.events_per_sample[0], cfg.events_per_sample[1] + 1))
    n_d = int(rng.integers(cfg.distractors_per_sample[0], cfg.distractors_per_sample[1] + 1))
    n_o = int(rng.integers(cfg.other_events_per_sample[0], cfg.other_events_per_sample[1] + 1))
    kinds = ["target"] * n_t + ["distractor"] * n_d + ["other"] * n_o
    kinds = [kinds[j] for j in rng.permutation(len(kinds))]
    lengths = [int(rng.integers(cfg.event_length[0], cfg.event_length[1] + 1)) for _ in kinds]
    starts = _place(lengths, L, cfg.min_gap, rng)

    feats = rng.normal(size=(L, C))
    gt, planted = [], []
    others = [k for k in range(cfg.num_event_classes) if k != target]
    for kind, s, n in zip(kinds, starts, lengths):
        if kind == "target":
            proto = protos.video[target]
            gt.append(TemporalSpan(s, s + n))
        elif kind == "distractor":
            proto = protos.distractor[target]
            planted.append(TemporalSpan(s, s + n))
        else:
            proto = protos.video[others[int(rng.integers(len(others)))]]
        feats[s:s + n] = proto + cfg.noise_sigma * rng.normal(size=(n, C))

    content = protos.text[target] + cfg.token_noise * rng.normal(size=(cfg.query_len - 1, C))
    tokens = np.vstack([content, protos.eos])
    sample = Sample(f"{split}-v{i:04d}", f"{split}-q{i:04d}", feats, tokens, tuple(gt))
    pos, neg = draw_saliency_pair(sample, rng)
    return sample.with_saliency(pos, neg), planted, target


def generate(cfg: SynthConfig, split: str = "train") -> Dataset:
    """Deterministic dataset for ``split`` ("train" uses num_samples, "val" num_val)."""
    if split not in _SPLIT_CODES:
        raise SynthConfigError(f"unknown split {split!r}")
    protos = make_prototypes(cfg)
    count = cfg.num_samples if split == "train" else cfg.num_val
    samples, planted, classes = [], {}, {}
    for i in range(count):
        s, p, k = _make_sample(cfg, protos, split, i)
        samples.append(s)
        planted[s.query_id] = p
        classes[s.query_id] = k
    return Dataset(tuple(samples), split, {"planted": planted, "target_class": classes, "synth": cfg.to_dict()})


def planted_oracle(dataset: Dataset) -> dict[str, list[TemporalSpan]]:
    """The generator's distractor placements per query id."""
    planted = dataset.meta.get("planted")
    if planted is None:
        raise UnsupportedDatasetError("dataset was not produced by the synthetic generator")
    return {q: list(v) for q, v in planted.items()}
