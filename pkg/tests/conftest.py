import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from speechllm.data import DialectParams, SynthConfig, synth_corpus
from speechllm.encoder import EncoderConfig
from speechllm.llm import CharTokenizer, LLMConfig
from speechllm.model import ModelConfig, SpeechLLM
from speechllm.projector import ProjectorConfig

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

TINY_SYNTH = SynthConfig(alphabet="abcdefgh", feature_dim=8, frames_per_symbol=16, min_len=3, max_len=6)
TINY_DIALECTS = [
    DialectParams("standard", None, 0.0, {}),
    DialectParams("accent", 7, 0.2, {}),
    DialectParams("dialect", 9, 0.1, {"a": "b", "b": "a"}),
]


def tiny_model_config(kind="linear", k=4):
    return ModelConfig(
        encoder=EncoderConfig(d_in=8, d_model=16, n_layers=1, n_heads=2, ff_mult=2, attn_window=4),
        projector=ProjectorConfig(kind=kind, downsample_k=k, num_queries=8, hidden=16, n_layers=1, n_heads=2),
        llm=LLMConfig(d_model=16, n_layers=1, n_heads=2, ff_mult=2),
        lora_rank=4,
        lora_alpha=8.0,
        prompt="go",
    )


def tiny_tokenizer():
    return CharTokenizer.for_corpus(TINY_SYNTH.alphabet, "go")


@pytest.fixture
def tiny_corpus():
    return synth_corpus(1, 24, TINY_DIALECTS, TINY_SYNTH)


@pytest.fixture
def tiny_model():
    return SpeechLLM(tiny_model_config(), tiny_tokenizer(), seed=0)


def tiny_run_config(tmp_path=None, **plan):
    """A RunConfig that trains in seconds; used by the stage, CLI and sweep tests."""
    from speechllm.config import config_from_dict

    data = {
        "seed": 5,
        "corpus": {
            "n_utts": 30,
            "synth": {"alphabet": "abcdefgh", "feature_dim": 8, "frames_per_symbol": 16, "min_len": 3, "max_len": 6},
            "dialects": [
                {"name": "standard", "rotation_seed": None, "noise": 0.0, "substitutions": {}},
                {"name": "dialect", "rotation_seed": 9, "noise": 0.1, "substitutions": {"a": "b", "b": "a"}},
            ],
        },
        "model": {
            "encoder": {"d_in": 8, "d_model": 16, "n_layers": 1, "n_heads": 2, "ff_mult": 2, "attn_window": 4},
            "projector": {"hidden": 16, "n_layers": 1, "n_heads": 2, "num_queries": 8},
            "llm": {"d_model": 16, "n_layers": 1, "n_heads": 2, "ff_mult": 2},
            "lora_rank": 4,
            "lora_alpha": 8.0,
            "prompt": "go",
        },
        "pretrain": {"llm_steps": 3, "ctc_steps": 2, "hparams": {"lr": 1e-3, "micro_batch_size": 4, "n_accum": 1}},
        "optimizer": {"lr": 1e-3, "micro_batch_size": 4, "n_accum": 2},
        "plan": {"steps": {1: 2, 2: 2, 3: 2, 4: 2}, **plan},
        "eval": {"max_len": 10},
    }
    if tmp_path is not None:
        data["out"] = str(tmp_path)
    return config_from_dict(data)


def bitwise_equal(a, b):
    return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance.LINES:
            terminalreporter.write_line(line)
