"""Shared fixtures: small corpora and encoder configs sized for fast tests."""

import numpy as np
import pytest

from serft.corpus import SyntheticCorpusSpec, generate_synthetic_corpus
from serft.encoder import EncoderConfig


@pytest.fixture(scope="session")
def tiny_corpus():
    """100 short utterances, highly separable, all 5 sessions populated."""
    spec = SyntheticCorpusSpec(
        n_utterances=100,
        n_speakers=10,
        feature_dim=16,
        frame_range=(10, 20),
        separability=6.0,
        seed=7,
    )
    return generate_synthetic_corpus(spec)


@pytest.fixture
def tiny_encoder_cfg():
    return EncoderConfig(input_dim=16, n_layers=2, model_dim=16, n_heads=2, ff_dim=32, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
