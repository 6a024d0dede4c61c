import os

import numpy as np
import pytest
from httpx import ASGITransport, AsyncClient

from app.core.tensor import precision
from app.data.vocab import Vocabulary
from app.main import app
from app.schemas.data import DataConfig, Task
from app.schemas.model import ModelConfig, ShortcutVariant
from app.schemas.train import TrainConfig
from app.services.translator import set_translator

RUN_SLOW = os.getenv("LEXSHORT_RUN_SLOW") == "1"


def pytest_collection_modifyitems(config, items):
    if RUN_SLOW:
        return
    skip = pytest.mark.skip(reason="slow; set LEXSHORT_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def tiny_config(variant: ShortcutVariant = ShortcutVariant.NONE, **overrides) -> ModelConfig:
    """Two-layer float64 model small enough for finite-difference checks."""
    values = {
        "n_layers": 2,
        "d_model": 8,
        "head_count": 2,
        "d_ff": 16,
        "vocab_size": 12,
        "dropout_rate": 0.0,
        "max_len": 16,
        "dtype": "float64",
        "variant": variant,
        **overrides,
    }
    return ModelConfig(**values)


@pytest.fixture(scope="function")
def float64():
    """Run the test with float64 as the default dtype"""
    with precision(np.float64):
        yield


@pytest.fixture(scope="function")
def toy_config():
    return tiny_config()


@pytest.fixture(scope="function")
def copy_data_config(tmp_path):
    return DataConfig(task=Task.COPY, size=60, content_words=8, function_words=2, min_len=2, max_len=5,
                      valid_fraction=0.1, test_fraction=0.1, path=str(tmp_path / "copy"))


@pytest.fixture(scope="function")
def lexicon_data_config(tmp_path):
    return DataConfig(task=Task.LEXICON, size=60, content_words=8, function_words=2, ambiguous_words=2,
                      min_len=3, max_len=5, valid_fraction=0.1, test_fraction=0.1, path=str(tmp_path / "lexicon"))


@pytest.fixture(scope="function")
def small_vocab():
    """Vocabulary over n0..n7 with descending counts"""
    tokens = [f"n{i}" for i in range(8)]
    return Vocabulary(tokens, {token: 100 - 10 * i for i, token in enumerate(tokens)})


@pytest.fixture(scope="function")
def fast_train_config():
    return TrainConfig(total_steps=6, warmup_steps=4, batch_tokens=64, checkpoint_every=2, validate_every=3,
                       log_every=2, seed=3, queue_size=2)


@pytest.fixture(scope="function")
async def api_client():
    """HTTP client bound to the app; any translator set by the test is dropped afterwards"""
    set_translator(None)
    async with AsyncClient(transport=ASGITransport(app=app), base_url="http://test") as client:
        yield client
    set_translator(None)
