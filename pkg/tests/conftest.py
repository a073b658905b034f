"""Shared fixtures: corpus slices and a briefly trained toy model."""

from pathlib import Path

import numpy as np
import pytest

from leapmtp.corpus import Corpus, load_corpus
from leapmtp.model import ModelConfig, TransformerLM
from leapmtp.training import TrainingConfig, train

DATA = Path(__file__).resolve().parents[1] / "data" / "corpus.txt"

SMALL = ModelConfig(
    vocab_size=258, d_model=48, n_layers=2, n_attn_heads=4,
    max_positions=512, n_pred_heads=4, leap_stride=2,
)


@pytest.fixture(scope="session")
def corpus_full() -> Corpus:
    return load_corpus(DATA)


@pytest.fixture(scope="session")
def corpus_small(corpus_full) -> Corpus:
    return Corpus(documents=[d.copy() for d in corpus_full.documents[:400]],
                  tokenizer=corpus_full.tokenizer)


@pytest.fixture(scope="session")
def untrained_model() -> TransformerLM:
    return TransformerLM.init(SMALL, seed=1234)


@pytest.fixture(scope="session")
def trained_model(untrained_model, corpus_small) -> TransformerLM:
    """Two-stage recipe, abbreviated: enough steps that extra heads carry
    signal, small enough to keep the suite fast."""
    model = untrained_model.copy()
    train(model, corpus_small, TrainingConfig(
        stage="warmup", learning_rate=1e-3, epochs=2, batch_size=8,
        window_len=128, seed=7, max_steps=60,
    ))
    train(model, corpus_small, TrainingConfig(
        stage="full", learning_rate=1e-3, epochs=3, batch_size=8,
        beta=0.2, window_len=128, seed=8, max_steps=150,
    ))
    return model


@pytest.fixture()
def prompt_tokens(corpus_small):
    from leapmtp.corpus import BOS_ID

    def make(i: int, length: int = 12) -> list[int]:
        doc = corpus_small.documents[i % len(corpus_small.documents)]
        return [BOS_ID] + doc[:length].tolist()

    return make
