import json

import numpy as np
import pytest

from core.config_manager import StageConfig, TrainRunConfig
from core.model import ModelConfig
from core.optim import WsdSchedule

CORPUS_TEXT = (
    "the quick brown fox jumps over the lazy dog. "
    "a mixture of experts routes every token to a few of its experts. "
    "attention experts share their keys and values. "
)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end training runs (deselect with -m 'not slow')")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    """Small float64 model for exact numerical checks."""
    return ModelConfig(n_layers=2, d_model=16, n_experts=4, top_k=2, heads_per_expert=2,
                       d_head=4, d_mlp=12, vocab_size=32, max_positions=64, dtype="float64")


@pytest.fixture
def byte_cfg():
    """Byte-vocabulary model small enough for a few hundred CPU training steps."""
    return ModelConfig(n_layers=2, d_model=32, n_experts=4, top_k=2, heads_per_expert=2,
                       d_head=8, d_mlp=48, vocab_size=256, max_positions=64, dtype="float64")


@pytest.fixture
def corpus_file(tmp_path):
    path = tmp_path / "corpus.txt"
    path.write_text(CORPUS_TEXT * 40, encoding="utf-8")
    return path


def _write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")
    return path


@pytest.fixture
def write_jsonl():
    return _write_jsonl


@pytest.fixture
def sft_file(tmp_path):
    rows = [{"prompt": [104, 105, 58], "response": [111, 107, 33, 10]},
            {"prompt": [113, 63], "response": [97, 10]}]
    return _write_jsonl(tmp_path / "sft.jsonl", rows * 4)


@pytest.fixture
def preference_file(tmp_path):
    rows = [{"prompt": [113, 58], "chosen": [121, 101, 115], "rejected": [110, 111]},
            {"prompt": [104, 105], "chosen": [104, 101, 108, 108, 111], "rejected": [98, 121, 101]}]
    return _write_jsonl(tmp_path / "preferences.jsonl", rows * 4)


@pytest.fixture
def make_run_config(tmp_path, byte_cfg, corpus_file, sft_file, preference_file):
    """Factory for a small, fast TrainRunConfig; keyword arguments override train fields."""
    def factory(model=None, schedule=None, sft=None, dpo=None, **train):
        values = dict(seq_len=16, batch_tokens=64, steps=12, seed=0, corpus=str(corpus_file),
                      out_dir=str(tmp_path / "run"), checkpoint_interval=4, log_interval=1,
                      prefetch=2, progress=False)
        values.update(train)
        return TrainRunConfig(
            model=model or byte_cfg,
            schedule=schedule or WsdSchedule(warmup_steps=2, stable_end=8, decay_steps=4, max_lr=3e-3),
            sft=sft or StageConfig(dataset=str(sft_file), lr=3e-3, batch_size=4, epochs=3),
            dpo=dpo or StageConfig(dataset=str(preference_file), lr=1e-3, batch_size=4, epochs=1, eta=0.1),
            **values,
        )
    return factory
