"""Shared test fixtures and configuration."""

from typing import Callable, Dict, Iterator, List

import numpy as np
import pytest

from crossfact.config import Settings, get_settings
from crossfact.core import Label
from crossfact.data import CorpusSpec, Example, Vocabulary, build_vocabulary, generate_corpus
from crossfact.losses import LossSpec
from crossfact.model import ModelParams, init_params
from crossfact.trainer import TrainConfig


@pytest.fixture(autouse=True)
def clear_settings_cache() -> Iterator[None]:
    """Settings are cached per process; tests that set env vars need a fresh read."""
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture
def test_settings() -> Settings:
    return Settings(log_level="DEBUG", eval_batch_size=16, ece_bins=20)


@pytest.fixture
def tiny_spec() -> CorpusSpec:
    """A corpus small enough to train in well under a second."""
    return CorpusSpec(
        train_size=30,
        dev_size=12,
        test_size=12,
        vocab_size=40,
        n_topics=4,
        evidence_length=5,
        claim_length=2,
        seed=3,
    )


@pytest.fixture
def tiny_corpus(tiny_spec: CorpusSpec) -> Dict[str, List[Example]]:
    return generate_corpus(tiny_spec)


@pytest.fixture
def identity_corpus(tiny_spec: CorpusSpec) -> Dict[str, List[Example]]:
    """Every translation is token-identical to its original."""
    return generate_corpus(tiny_spec.model_copy(update={"cognate_ratio": 1.0, "noise_rate": 0.0}))


@pytest.fixture
def tiny_vocab(tiny_corpus: Dict[str, List[Example]]) -> Vocabulary:
    return build_vocabulary(tiny_corpus.values())


@pytest.fixture
def small_params(tiny_vocab: Vocabulary) -> ModelParams:
    return init_params(seed=0, vocab=tiny_vocab, embed_dim=8, hidden_dim=6)


@pytest.fixture
def fast_config() -> TrainConfig:
    return TrainConfig(
        loss_spec=LossSpec(),
        batch_size=8,
        max_epochs=2,
        patience=2,
        learning_rate=1e-2,
        embed_dim=8,
        hidden_dim=8,
        seed=1,
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def make_example() -> Callable[..., Example]:
    """Build an Example from space-separated claim and evidence strings."""

    def factory(claim: str, evidence: str, label: Label, lang: str = "src", pair_id: int = 0) -> Example:
        return Example(
            claim=tuple(claim.split()), evidence=tuple(evidence.split()), label=label, lang=lang, pair_id=pair_id
        )

    return factory
