"""Shared fixtures: a tiny synthetic dataset and matching model config."""

import numpy as np
import pytest

from stickerrank import data
from stickerrank.config import ModelConfig, SyntheticSpec, TrainConfig
from stickerrank.model import StickerRanker


def tiny_cfg(**kw):
    defaults = dict(
        vocab_size=40, d=8, n_head=2, pos_dim=4, dropout=0.0,
        image_size=32, image_channels=1, p=2, conv_channels=(3, 4),
        max_utterances=4, max_words=10, max_history=6, n_candidates=10, n_emoji=3,
    )
    defaults.update(kw)
    return ModelConfig(**defaults).validate()


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    spec = SyntheticSpec(
        n_samples=12, n_users=3, n_styles=3, vocab_size=40, stickers_per_style=5,
        image_size=32, channels=1, min_history=0, max_history=4,
        min_utterances=2, max_utterances=4, min_words=3, max_words=8,
    )
    out = str(tmp_path_factory.mktemp("tiny") / "ds")
    data.write_dataset(data.generate_synthetic(spec, seed=20), out)
    return out


@pytest.fixture(scope="session")
def tiny_samples(tiny_dataset):
    return data.load_samples(tiny_dataset, tiny_cfg())


@pytest.fixture()
def tiny_model():
    return StickerRanker.build(tiny_cfg(), seed=7)


@pytest.fixture()
def train_cfg():
    return TrainConfig(margin=0.3, lambda_cls=1.0, lr=1e-4, batch_size=4, max_epochs=2, seed=0)


def sample_with_history(samples):
    for s in samples:
        if len(s.history) >= 2:
            return s
    raise AssertionError("fixture dataset lacks a sample with history")


def sample_without_history(samples):
    for s in samples:
        if len(s.history) == 0:
            return s
    raise AssertionError("fixture dataset lacks a history-free sample")
