"""Run configuration: nested dataclasses loaded strictly from YAML.

Every section is optional in the file; missing keys take the defaults below,
unknown keys are rejected before any compute happens.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from speechllm.data import DialectParams, SynthConfig, default_dialects
from speechllm.errors import ConfigError
from speechllm.model import ModelConfig
from speechllm.stages import PlanConfig, TrainHParams


@dataclass
class CorpusConfig:
    n_utts: int = 2000
    synth: SynthConfig = field(default_factory=SynthConfig)
    dialects: list = field(default_factory=default_dialects)
    split: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    # optional manifests replace the synthetic corpus for train / held-out data
    train_manifest: Optional[str] = None
    heldout_manifest: Optional[str] = None

    def __post_init__(self):
        if self.n_utts < 1:
            raise ConfigError(f"corpus.n_utts must be >= 1, got {self.n_utts}")
        if len(self.split) != 3 or any(f < 0 for f in self.split) or abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError(f"corpus.split must be three non-negative fractions summing to 1, got {self.split}")
        if not self.dialects:
            raise ConfigError("corpus.dialects must not be empty")


@dataclass
class PretrainConfig:
    """Stand-ins for pretrained components: a copy-task LLM and an optional CTC-finetuned encoder."""

    llm_steps: int = 2000
    llm_noise: float = 0.5
    ctc_steps: int = 0
    hparams: TrainHParams = field(default_factory=lambda: TrainHParams(lr=2e-3, micro_batch_size=16, n_accum=1))


@dataclass
class EvalConfig:
    max_len: int = 40
    batch_size: int = 64
    split: str = "test"

    def __post_init__(self):
        if self.split not in ("dev", "test"):
            raise ConfigError(f"eval.split must be dev or test, got {self.split!r}")


def _toy_hparams():
    return TrainHParams(lr=2e-3, micro_batch_size=8, n_accum=2)


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    optimizer: TrainHParams = field(default_factory=_toy_hparams)
    plan: PlanConfig = field(default_factory=lambda: PlanConfig(steps={1: 300, 2: 300, 3: 300, 4: 300}))
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self):
        return asdict(self)

    def dump(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)
        return path


# ---------------------------------------------------------------------------
# strict loading

_INT_KEYED = {(PlanConfig, "steps"), (PlanConfig, "lr"), (PlanConfig, "groups")}


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {unknown}")
    kwargs = {}
    for key, value in data.items():
        path = f"{where}.{key}" if where else key
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, path)
        elif cls is CorpusConfig and key == "dialects":
            if not isinstance(value, list):
                raise ConfigError(f"{path}: expected a list of dialects")
            kwargs[key] = [_build(DialectParams, d, f"{path}[{i}]") for i, d in enumerate(value)]
        elif (cls, key) in _INT_KEYED:
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected a mapping from stage index")
            try:
                kwargs[key] = {int(k): v for k, v in value.items()}
            except ValueError:
                raise ConfigError(f"{path}: stage keys must be integers") from None
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def config_from_dict(data):
    return _build(RunConfig, data or {}, "")


def load_config(path=None):
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    return config_from_dict(data)

