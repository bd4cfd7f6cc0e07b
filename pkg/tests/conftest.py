import numpy as np
import pytest

from amr.domain import Dataset, Sample, TemporalSpan
from amr.model import ModelConfig

TINY = dict(hidden_dim=8, num_encoder_layers=1, num_decoder_layers=2, num_heads=2, num_queries=4,
            ffn_dim=16, video_dim=6, text_dim=6, max_query_len=8)


def make_sample(i=0, length=12, dim=6, gt=((2, 5),), amb=(), pos=None, neg=None, rng=None, tokens=3):
    rng = rng if rng is not None else np.random.default_rng(i)
    return Sample(f"v{i}", f"q{i}", rng.normal(size=(length, dim)), rng.normal(size=(tokens, dim)),
                  tuple(TemporalSpan(*g) for g in gt), tuple(TemporalSpan(*a) for a in amb),
                  saliency_pos=pos, saliency_neg=neg)


@pytest.fixture
def tiny_config():
    return ModelConfig(**TINY)


@pytest.fixture
def toy_dataset():
    rng = np.random.default_rng(7)
    samples = [make_sample(i, gt=((1 + i % 4, 4 + i % 4),), pos=2 + i % 4, neg=11, rng=rng) for i in range(6)]
    return Dataset(tuple(samples), "train")


# acceptance results, printed once at the end of the session
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
