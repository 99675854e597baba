import numpy as np
import pytest
import torch
from hypothesis import settings

from textrec.corpus import ItemRecord
from textrec.encoder import ModelConfig, init_params

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

torch.set_num_threads(1)


@pytest.fixture
def tiny_config():
    return ModelConfig(vocab_size=50, hidden_dim=8, num_heads=2, ffn_dim=16, encoder_layers=1,
                       decoder_layers=1, max_session_len=8, dtype="float64")


@pytest.fixture
def tiny_model(tiny_config):
    return init_params(tiny_config, seed=3)


@pytest.fixture
def toy_catalog():
    return {
        "a": ItemRecord("a", (("title", "red shoe"),)),
        "b": ItemRecord("b", (("title", "blue hat"),)),
        "c": ItemRecord("c", (("title", "green sock"),)),
    }


def random_tokens(rng, shape, vocab=50, fill=0.7):
    tokens = rng.integers(3, vocab, size=shape)
    mask = rng.random(shape) < fill
    mask[..., 0] = True
    tokens[~mask] = 0
    return tokens, mask


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
