"""Multi-stage freeze/unfreeze training schedule.

Canonical plan::

    1: projector + llm_bridge
    2: encoder
    3: lora            (llm_body with llm_mode=full, nothing with llm_mode=frozen)
    4: encoder + projector + llm_bridge + lora

A fresh optimizer is built at every stage boundary.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from speechllm.autodiff import GROUP_NAMES, AdamW, AdamWConfig, Tensor, backward, take_rows
from speechllm.errors import ConfigError, NonFiniteLossError
from speechllm.llm import batch_loss, regulate_batch
from speechllm.metrics import evaluate
from speechllm.model import collate

log = logging.getLogger(__name__)

LLM_MODES = ("lora", "full", "frozen")
PLAN_GROUPS = ("encoder", "projector", "llm_bridge", "llm_body", "lora")


@dataclass
class TrainHParams:
    lr: float = 1.0e-5
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1.0e-6
    weight_decay: float = 0.01
    clip: float = 5.0
    micro_batch_size: int = 5
    n_accum: int = 20

    def __post_init__(self):
        if self.n_accum < 1:
            raise ConfigError(f"n_accum must be >= 1, got {self.n_accum}")
        if self.micro_batch_size < 1:
            raise ConfigError(f"micro_batch_size must be >= 1, got {self.micro_batch_size}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")

    def adamw(self, lr=None):
        return AdamWConfig(
            lr=self.lr if lr is None else lr,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            weight_decay=self.weight_decay,
        )


@dataclass(frozen=True)
class StageSpec:
    index: int
    trainable_groups: frozenset
    steps: int
    lr: Optional[float] = None
    llm_mode: str = "lora"

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError(f"stage {self.index}: steps must be >= 0")
        unknown = set(self.trainable_groups) - set(GROUP_NAMES)
        if unknown:
            raise ConfigError(f"stage {self.index}: unknown parameter group(s) {sorted(unknown)}")


@dataclass
class StagePlan:
    stages: list
    hparams: TrainHParams = field(default_factory=TrainHParams)
    seed: int = 0

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("a stage plan needs at least one stage")
        idx = [s.index for s in self.stages]
        if idx[0] != 1 or any(b <= a for a, b in zip(idx, idx[1:])):
            raise ConfigError(f"stage indices must increase strictly from 1, got {idx}")

    def __len__(self):
        return len(self.stages)

    @property
    def uses_lora(self):
        return any("lora" in s.trainable_groups for s in self.stages)


@dataclass
class PlanConfig:
    """What a run config says about the schedule; see :func:`build_stage_plan`."""

    stages: list = field(default_factory=lambda: [1, 2, 3, 4])
    steps: dict = field(default_factory=lambda: {1: 100, 2: 100, 3: 100, 4: 100})
    lr: dict = field(default_factory=dict)
    groups: dict = field(default_factory=dict)
    llm_mode: str = "lora"
    stage4_lora: bool = True


def canonical_groups(index, llm_mode="lora", stage4_lora=True):
    if llm_mode not in LLM_MODES:
        raise ConfigError(f"llm_mode must be one of {LLM_MODES}, got {llm_mode!r}")
    llm = {"lora": {"lora"}, "full": {"llm_body"}, "frozen": set()}[llm_mode]
    if index == 1:
        return {"projector", "llm_bridge"}
    if index == 2:
        return {"encoder"}
    if index == 3:
        return set(llm)
    if index == 4:
        extra = llm if (llm_mode != "lora" or stage4_lora) else set()
        return {"encoder", "projector", "llm_bridge"} | extra
    raise ConfigError(f"stage index must be in 1..4, got {index}")


def build_stage_plan(config: PlanConfig, hparams=None, seed=0):
    """Resolve a :class:`PlanConfig` into a validated :class:`StagePlan`."""
    stages = []
    for i in config.stages:
        i = int(i)
        if i not in (1, 2, 3, 4):
            raise ConfigError(f"stage index must be in 1..4, got {i}")
        if i in config.groups:
            groups = set(config.groups[i])
            unknown = groups - set(PLAN_GROUPS)
            if unknown:
                raise ConfigError(f"stage {i}: unknown parameter group(s) {sorted(unknown)}")
        else:
            groups = canonical_groups(i, config.llm_mode, config.stage4_lora)
        if "llm_body" in groups and config.llm_mode != "full":
            raise ConfigError(f"stage {i}: llm_body is only trainable with llm_mode=full")
        if "lora" in groups and config.llm_mode != "lora":
            raise ConfigError(f"stage {i}: lora group requires llm_mode=lora")
        if i not in config.steps:
            raise ConfigError(f"stage {i}: no step budget given")
        stages.append(StageSpec(i, frozenset(groups), int(config.steps[i]), config.lr.get(i), config.llm_mode))
    return StagePlan(stages, hparams or TrainHParams(), seed)


# ---------------------------------------------------------------------------
# execution


@dataclass
class StageMetrics:
    index: int
    steps: int = 0
    losses: list = field(default_factory=list)
    seconds: float = 0.0
    checkpoint: Optional[str] = None

    @property
    def final_loss(self):
        return self.losses[-1] if self.losses else math.nan


def micro_batches(data, size, rng):
    """Endless stream of shuffled index lists; every epoch is a fresh permutation."""
    n = len(data)
    while True:
        order = rng.permutation(n)
        for start in range(0, n, size):
            yield [data[i] for i in order[start : start + size]]


def _step_loop(params_owner, loss_fn, batches, steps, hparams, lr, on_step=None, label=None):
    """Shared optimise loop: ``steps`` optimizer steps of ``n_accum`` micro-batches each."""
    opt = AdamW(params_owner, hparams.adamw(lr), clip=hparams.clip)
    params_owner.zero_grad()
    losses = []
    trainable = params_owner.num_trainable() > 0
    for step in range(1, steps + 1):
        total = 0.0
        for _ in range(hparams.n_accum):
            loss = loss_fn(next(batches))
            value = float(loss.data)
            if not math.isfinite(value):
                raise NonFiniteLossError(label, step, value)
            if trainable:
                backward(loss)
            total += value
        opt.step(scale=1.0 / hparams.n_accum)
        losses.append(total / hparams.n_accum)
        if on_step is not None:
            on_step(step, losses[-1], opt.state.hp.lr)
    return losses


def run_stage(model, data, spec: StageSpec, hparams: TrainHParams = None, seed=0, run_dir=None):
    """Train the groups named in ``spec`` for exactly ``spec.steps`` optimizer steps.

    Returns (model, StageMetrics). On a non-finite loss the model is restored to
    its state at stage entry and :class:`NonFiniteLossError` is raised.
    """
    hparams = hparams or TrainHParams()
    metrics = StageMetrics(spec.index)
    if "lora" in spec.trainable_groups and not model.has_lora:
        raise ConfigError(f"stage {spec.index} trains lora but the model has no adapters")
    reg = model.registry
    reg.freeze_all()
    for g in spec.trainable_groups:
        if g in reg.groups:
            reg.set_trainable(g, True)
    t0 = time.perf_counter()
    if spec.steps > 0:
        snapshot = model.state_dict()
        rng = np.random.default_rng([seed, spec.index])
        batches = (collate(b, model.tokenizer, model.dtype) for b in micro_batches(data, hparams.micro_batch_size, rng))
        log_fh = open(Path(run_dir) / "metrics.jsonl", "a") if run_dir is not None else None

        def on_step(step, loss, lr):
            if log_fh is not None:
                log_fh.write(json.dumps({"stage": spec.index, "step": step, "loss": loss, "lr": lr}) + "\n")
            if step % 25 == 0 or step == spec.steps:
                log.info("stage %d step %d/%d loss %.4f", spec.index, step, spec.steps, loss)

        try:
            metrics.losses = _step_loop(reg, model.loss, batches, spec.steps, hparams, spec.lr, on_step, spec.index)
        except NonFiniteLossError:
            model.load_state_dict(snapshot)
            raise
        finally:
            if log_fh is not None:
                log_fh.close()
            reg.zero_grad()
        metrics.steps = spec.steps
    reg.freeze_all()
    metrics.seconds = time.perf_counter() - t0
    if run_dir is not None:
        ckpt = Path(run_dir) / f"stage{spec.index}"
        model.save(ckpt, step=spec.steps, extra={"stage": spec.index, "trainable_groups": sorted(spec.trainable_groups)})
        metrics.checkpoint = str(ckpt)
    return model, metrics


def run_plan(model, data, plan: StagePlan, heldout=None, run_dir=None, eval_max_len=None):
    """Run every stage in order; after each, score ``heldout`` (if given).

    Returns (model, reports, stage_metrics) where reports holds one CerReport per stage.
    """
    if plan.uses_lora and not model.has_lora:
        model.install_lora()
    if run_dir is not None:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
    reports, all_metrics = [], []
    for spec in plan.stages:
        model, metrics = run_stage(model, data, spec, plan.hparams, plan.seed, run_dir)
        all_metrics.append(metrics)
        if heldout:
            report = evaluate(model, heldout, max_len=eval_max_len)
            reports.append(report)
            log.info("stage %d held-out CER %.4f", spec.index, report.overall)
            if run_dir is not None:
                with open(Path(run_dir) / f"stage{spec.index}" / "report.json", "w") as fh:
                    json.dump(report.to_dict(), fh, indent=1)
    return model, reports, all_metrics


# ---------------------------------------------------------------------------
# pieces that stand in for pretrained components


def random_transcripts(rng, alphabet, n, min_len, max_len):
    letters = np.array(list(alphabet))
    return ["".join(letters[rng.integers(0, len(letters), size=rng.integers(min_len, max_len + 1))]) for _ in range(n)]


def copy_task_loss(model, texts, noise, rng):
    """Decoder loss when the speech segment holds (noisy) embeddings of the transcript itself."""
    llm = model.llm
    ids = [model.tokenizer.encode(t) for t in texts]
    lengths = np.array([len(i) for i in ids])
    padded = np.zeros((len(ids), int(lengths.max())), dtype=np.int64)
    for b, row in enumerate(ids):
        padded[b, : len(row)] = row
    speech = take_rows(llm.tok_emb, padded)
    if noise:
        speech = speech + (noise * rng.standard_normal(speech.shape)).astype(model.dtype)
    reg = regulate_batch(llm, model.prompt_ids, speech, lengths, ids)
    return batch_loss(llm, reg)


def pretrain_llm(model, alphabet, steps, hparams: TrainHParams, seed=0, noise=0.5, min_len=5, max_len=30):
    """Teach the decoder body to transcribe a speech segment that carries symbol embeddings.

    This substitutes for starting from a pretrained LLM. Only llm_body is updated;
    the registry's trainable flags are restored afterwards.
    """
    reg = model.registry
    before = reg.trainable_groups()
    reg.freeze_all()
    reg.set_trainable("llm_body", True)
    rng = np.random.default_rng([seed, 1000])

    def texts():
        while True:
            yield random_transcripts(rng, alphabet, hparams.micro_batch_size, min_len, max_len)

    try:
        losses = _step_loop(reg, lambda t: copy_task_loss(model, t, noise, rng), texts(), steps, hparams, None,
                            label="llm-pretrain")
    finally:
        reg.freeze_all()
        for g in before:
            reg.set_trainable(g, True)
    return losses


def ctc_finetune_encoder(model, data, steps, hparams: TrainHParams, seed=0):
    """ASR finetuning of the encoder through a CTC head (the 'finetuned encoder' variant)."""
    reg = model.registry
    reg.freeze_all()
    reg.set_trainable("encoder", True)
    reg.set_trainable("ctc_head", True)
    rng = np.random.default_rng([seed, 2000])
    batches = (collate(b, model.tokenizer, model.dtype) for b in micro_batches(data, hparams.micro_batch_size, rng))
    try:
        return _step_loop(reg, model.ctc_loss, batches, steps, hparams, None, label="ctc")
    finally:
        reg.freeze_all()
