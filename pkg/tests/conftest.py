import numpy as np
import pytest

from shrinkpipe.autodiff import seeded_rng
from shrinkpipe.model import EncoderModel, ModelConfig
from shrinkpipe.tokenizer import (SyntheticSpec, build_tokenizer, encode_corpus,
                                  generate_synthetic_corpus, train_validation_split)

TINY = ModelConfig(num_layers=2, hidden_size=8, num_heads=2, ffn_size=16, vocab_size=12,
                   max_positions=6)


def random_model(config=TINY, seed=0, std=None) -> EncoderModel:
    """Seeded random model; ``std`` rescales matrices away from the 0.02 default."""
    model = EncoderModel.random(config, seeded_rng(seed))
    if std is not None:
        rng = seeded_rng(seed + 1)
        model.params = {k: (rng.standard_normal(v.shape) * std).astype(np.float32)
                        if not k.endswith("norm.scale") else v
                        for k, v in model.params.items()}
    return model


def random_ids(config, batch, seq, seed=0, low=5):
    rng = np.random.default_rng(seed)
    return rng.integers(low, config.vocab_size, size=(batch, seq))


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture(scope="session")
def small_corpus():
    data = generate_synthetic_corpus(SyntheticSpec(num_topics=3, vocab_per_topic=20,
                                                   doc_count=300, doc_length=16, seed=1))
    train, val = train_validation_split(data.texts, 0.1, 0)
    tok = build_tokenizer(train, 1000)
    return tok, encode_corpus(tok, train), encode_corpus(tok, val, "validation"), data


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
