"""End-to-end procedures behind the command line: data, model preparation, training and sweeps."""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import time
from pathlib import Path

from speechllm.autodiff.checkpoint import config_hash
from speechllm.data import read_manifest, split_corpus, synth_corpus, write_manifest
from speechllm.errors import ConfigError
from speechllm.llm import CharTokenizer
from speechllm.metrics import format_rows
from speechllm.model import SpeechLLM
from speechllm.stages import build_stage_plan, ctc_finetune_encoder, pretrain_llm, run_plan

log = logging.getLogger(__name__)

# rows of the sweep tables, in the order the reference tables list them
PROJECTOR_ROWS = ("conv1d", "linear", "transformer", "qformer")
RATE_ROWS = ("conv1d", "linear", "transformer")
RATES = (1, 2, 4, 8)
STAGE_PROJECTORS = ("linear", "conv1d")
DISPLAY = {"linear": "Linear", "conv1d": "Conv1d", "transformer": "Transformer", "qformer": "Q-Former"}
ENCODER_RATE_HZ = 25.0


def rate_label(hz):
    return "-" if hz is None else f"{hz:g}Hz"


def tokenizer_for(cfg):
    return CharTokenizer.for_corpus(cfg.corpus.synth.alphabet, cfg.model.prompt)


def corpus_splits(cfg):
    """(train, dev, test) from the synthetic generator, deterministic in ``cfg.seed``."""
    corpus = synth_corpus(cfg.seed, cfg.corpus.n_utts, cfg.corpus.dialects, cfg.corpus.synth)
    return split_corpus(corpus, cfg.corpus.split)


def load_data(cfg):
    """(train, heldout) lists; manifests named in the config take precedence over synthesis."""
    if cfg.corpus.train_manifest or cfg.corpus.heldout_manifest:
        if not (cfg.corpus.train_manifest and cfg.corpus.heldout_manifest):
            raise ConfigError("corpus.train_manifest and corpus.heldout_manifest must be given together")
        return list(read_manifest(cfg.corpus.train_manifest)), list(read_manifest(cfg.corpus.heldout_manifest))
    train, dev, test = corpus_splits(cfg)
    return train, (dev if cfg.eval.split == "dev" else test)


def generate(cfg, out_dir):
    """Write train/dev/test manifests (features as binary tensor files) and a config snapshot."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, part in zip(("train", "dev", "test"), corpus_splits(cfg)):
        paths[name] = write_manifest(part, out_dir / f"{name}.jsonl", feature_dir=out_dir / "features")
    cfg.dump(out_dir / "config.yaml")
    return paths


# ---------------------------------------------------------------------------
# pretrained stand-ins, memoised per process so sweep cells share them

_CACHE = {}


def _pretrained_llm(cfg, tokenizer, log_fh=None):
    key = ("llm", cfg.seed, config_hash({"llm": dataclasses.asdict(cfg.model.llm), "prompt": cfg.model.prompt,
                                          "synth": dataclasses.asdict(cfg.corpus.synth),
                                          "steps": cfg.pretrain.llm_steps, "noise": cfg.pretrain.llm_noise,
                                          "hp": dataclasses.asdict(cfg.pretrain.hparams), "dtype": cfg.model.dtype}))
    if key not in _CACHE:
        base = SpeechLLM(cfg.model, tokenizer, seed=cfg.seed, lora=False)
        t0 = time.perf_counter()
        losses = pretrain_llm(base, cfg.corpus.synth.alphabet, cfg.pretrain.llm_steps, cfg.pretrain.hparams,
                              seed=cfg.seed, noise=cfg.pretrain.llm_noise, min_len=cfg.corpus.synth.min_len,
                              max_len=cfg.corpus.synth.max_len)
        log.info("LLM pretraining: %d steps in %.1fs", len(losses), time.perf_counter() - t0)
        _CACHE[key] = (base.group_state("llm_body"), losses)
    state, losses = _CACHE[key]
    if log_fh is not None:
        for i, loss in enumerate(losses, 1):
            log_fh.write(json.dumps({"stage": "llm_pretrain", "step": i, "loss": loss,
                                     "lr": cfg.pretrain.hparams.lr}) + "\n")
    return state


def _ctc_encoder(cfg, tokenizer, train):
    key = ("ctc", cfg.seed, config_hash({"enc": dataclasses.asdict(cfg.model.encoder),
                                          "pretrain": dataclasses.asdict(cfg.pretrain),
                                          "corpus": dataclasses.asdict(cfg.corpus), "dtype": cfg.model.dtype}))
    if key not in _CACHE:
        base = SpeechLLM(cfg.model, tokenizer, seed=cfg.seed, lora=False)
        ctc_finetune_encoder(base, train, cfg.pretrain.ctc_steps, cfg.pretrain.hparams, seed=cfg.seed)
        _CACHE[key] = base.group_state("encoder")
    return _CACHE[key]


def prepare_model(cfg, train, log_fh=None):
    """Fresh model with the pretrained LLM body (and CTC-finetuned encoder when requested)."""
    tokenizer = tokenizer_for(cfg)
    model = SpeechLLM(cfg.model, tokenizer, seed=cfg.seed, lora=cfg.plan.llm_mode == "lora")
    if cfg.pretrain.llm_steps > 0:
        model.load_state_dict(_pretrained_llm(cfg, tokenizer, log_fh), strict=False)
    if cfg.pretrain.ctc_steps > 0:
        model.load_state_dict(_ctc_encoder(cfg, tokenizer, train), strict=False)
    return model


def train(cfg, out_dir):
    """Run the configured stage plan; returns a summary dict also written to summary.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    plan = build_stage_plan(cfg.plan, cfg.optimizer, cfg.seed)
    cfg.dump(out_dir / "config.yaml")
    (out_dir / "metrics.jsonl").unlink(missing_ok=True)
    train_set, heldout = load_data(cfg)
    with open(out_dir / "metrics.jsonl", "a") as fh:
        model = prepare_model(cfg, train_set, fh)
    model, reports, metrics = run_plan(model, train_set, plan, heldout, out_dir, cfg.eval.max_len)
    summary = {
        "config_hash": config_hash(cfg.to_dict()),
        "seed": cfg.seed,
        "projector": cfg.model.projector.kind,
        "downsample_k": cfg.model.projector.downsample_k,
        "llm_mode": cfg.plan.llm_mode,
        "stages": [
            {
                "stage": m.index,
                "steps": m.steps,
                "trainable_groups": sorted(s.trainable_groups),
                "final_loss": m.final_loss,
                "seconds": m.seconds,
                "cer": r.overall,
                "cer_by_dialect": r.by_dialect(),
                "truncated": r.n_truncated,
                "checkpoint": m.checkpoint,
            }
            for s, m, r in zip(plan.stages, metrics, reports)
        ],
        "seconds": time.perf_counter() - t0,
    }
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1)
    with open(out_dir / "report.txt", "w") as fh:
        fh.write(stage_table([(cfg.model.projector.kind, reports)]) + "\n")
    return summary, reports


# ---------------------------------------------------------------------------
# sweeps


def _cell(cfg, out_dir):
    return train(cfg, out_dir)[1]


def _with(cfg, kind=None, k=None, ctc=None, stages=None):
    cfg = copy.deepcopy(cfg)
    if kind is not None:
        cfg.model.projector.kind = kind
    if k is not None:
        cfg.model.projector.downsample_k = k
    if ctc is not None:
        cfg.pretrain.ctc_steps = ctc
    if stages is not None:
        cfg.plan.stages = list(stages)
    return cfg


def _pct(report):
    return f"{100 * report.overall:.2f}"


def sweep_projector(cfg, out_dir, kinds=PROJECTOR_ROWS, ctc_steps=None):
    """Projector type x encoder variant after the first stage only."""
    ctc_steps = ctc_steps or cfg.pretrain.ctc_steps or 200
    rows = [("Projector", "Frame Rate", "Pretrained", "Finetuned")]
    cells = {}
    for kind in kinds:
        row = [DISPLAY[kind], rate_label(None if kind == "qformer" else ENCODER_RATE_HZ / cfg.model.projector.downsample_k)]
        for variant, steps in (("pretrained", 0), ("finetuned", ctc_steps)):
            reports = _cell(_with(cfg, kind=kind, ctc=steps, stages=[1]), Path(out_dir) / f"{kind}_{variant}")
            cells[(kind, variant)] = reports[-1].overall
            row.append(_pct(reports[-1]))
        rows.append(tuple(row))
    return rows, cells


def sweep_ctc(cfg, out_dir, ctc_steps=None):
    """The pretrained-vs-CTC-finetuned encoder comparison for the configured projector."""
    return sweep_projector(cfg, out_dir, kinds=(cfg.model.projector.kind,), ctc_steps=ctc_steps)


def sweep_rate(cfg, out_dir, kinds=RATE_ROWS, rates=RATES):
    """Projector type x downsampling rate after the first stage only."""
    rows = [("Projector",) + tuple(rate_label(ENCODER_RATE_HZ / k) for k in rates)]
    cells = {}
    for kind in kinds:
        row = [DISPLAY[kind]]
        for k in rates:
            reports = _cell(_with(cfg, kind=kind, k=k, stages=[1]), Path(out_dir) / f"{kind}_k{k}")
            cells[(kind, k)] = reports[-1].overall
            row.append(_pct(reports[-1]))
        rows.append(tuple(row))
    return rows, cells


def stage_rows(runs):
    """Stage x projector rows, one CER column per dialect tag plus the overall rate."""
    tags = sorted({t for _, reports in runs for r in reports for t in r.by_dialect()})
    rows = [("Stage", "Projector") + tuple(tags) + ("Overall",)]
    n_stages = max(len(reports) for _, reports in runs)
    for i in range(n_stages):
        for kind, reports in runs:
            if i >= len(reports):
                continue
            by = reports[i].by_dialect()
            rows.append((str(i + 1), DISPLAY[kind]) + tuple(f"{100 * by[t]:.2f}" if t in by else "-" for t in tags)
                        + (_pct(reports[i]),))
    return rows


def stage_table(runs):
    return format_rows(stage_rows(runs))


def sweep_stages(cfg, out_dir, kinds=STAGE_PROJECTORS):
    """Per-stage, per-dialect CER of the full plan for the two reference projectors."""
    runs = []
    cells = {}
    for kind in kinds:
        reports = _cell(_with(cfg, kind=kind), Path(out_dir) / kind)
        runs.append((kind, reports))
        for i, r in enumerate(reports, 1):
            cells[(i, kind)] = r.overall
    return runs, cells


SWEEPS = ("projector", "rate", "ctc", "stages")


def sweep(kind, cfg, out_dir):
    """Run one sweep; writes table.txt and table.json under ``out_dir`` and returns the table text."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(out_dir / "config.yaml")
    if kind == "projector":
        rows, cells = sweep_projector(cfg, out_dir)
    elif kind == "ctc":
        rows, cells = sweep_ctc(cfg, out_dir)
    elif kind == "rate":
        rows, cells = sweep_rate(cfg, out_dir)
    elif kind == "stages":
        runs, cells = sweep_stages(cfg, out_dir)
        rows = stage_rows(runs)
    else:
        raise ValueError(f"unknown sweep kind {kind!r}; choose from {SWEEPS}")
    text = format_rows(rows)
    with open(out_dir / "table.txt", "w") as fh:
        fh.write(text + "\n")
    with open(out_dir / "table.json", "w") as fh:
        json.dump({"kind": kind, "rows": [list(r) for r in rows],
                   "cells": {"|".join(map(str, k)): v for k, v in cells.items()}}, fh, indent=1)
    return text
