"""The assembled speech LLM: encoder -> projector -> bridge -> decoder, with parameter groups."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from speechllm.autodiff import ParameterRegistry, Tensor, default_dtype
from speechllm.autodiff.checkpoint import load_checkpoint, save_checkpoint
from speechllm.encoder import CTCHead, EncoderConfig, SpeechEncoder, ctc_loss_batch
from speechllm.llm import (
    DEFAULT_PROMPT,
    CharTokenizer,
    DecoderLM,
    LLMConfig,
    apply_lora,
    batch_loss,
    greedy_decode,
    merge_lora,
    regulate_batch,
    segment_positions,
)
from speechllm.projector import Bridge, ProjectorConfig, build_projector


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    projector: ProjectorConfig = field(default_factory=ProjectorConfig)
    llm: LLMConfig = field(default_factory=LLMConfig)
    lora_rank: int = 12
    lora_alpha: float = 32.0
    prompt: str = DEFAULT_PROMPT
    dtype: str = "float32"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(
            encoder=EncoderConfig(**d["encoder"]),
            projector=ProjectorConfig(**d["projector"]),
            llm=LLMConfig(**d["llm"]),
            lora_rank=d["lora_rank"],
            lora_alpha=d["lora_alpha"],
            prompt=d["prompt"],
            dtype=d["dtype"],
        )


@dataclass
class Batch:
    features: np.ndarray
    lengths: np.ndarray
    transcript_ids: list
    texts: list
    dialects: list
    utt_ids: list

    def __len__(self):
        return len(self.texts)


def collate(utterances, tokenizer, dtype=np.float32):
    """Right-pad features of a list of utterances into one batch."""
    lengths = np.array([u.features.shape[0] for u in utterances], dtype=np.int64)
    D = utterances[0].features.shape[1]
    feats = np.zeros((len(utterances), int(lengths.max()), D), dtype=dtype)
    for i, u in enumerate(utterances):
        feats[i, : lengths[i]] = u.features
    return Batch(
        features=feats,
        lengths=lengths,
        transcript_ids=[tokenizer.encode(u.transcript) for u in utterances],
        texts=[u.transcript for u in utterances],
        dialects=[u.dialect for u in utterances],
        utt_ids=[u.utt_id for u in utterances],
    )


class SpeechLLM:
    def __init__(self, cfg: ModelConfig, tokenizer: CharTokenizer, seed=0, lora=True):
        self.cfg = cfg
        self.tokenizer = tokenizer
        self.seed = seed
        self.dtype = np.dtype(cfg.dtype)
        # one stream per component, so e.g. the LLM init does not depend on the projector kind
        rngs = [np.random.default_rng([seed, i]) for i in range(5)]
        with default_dtype(self.dtype):
            self.encoder = SpeechEncoder(cfg.encoder, rngs[0])
            self.projector = build_projector(cfg.encoder.d_model, cfg.projector, rngs[1])
            self.bridge = Bridge(cfg.encoder.d_model, cfg.llm.d_model, rngs[2])
            self.llm = DecoderLM(len(tokenizer), cfg.llm, rngs[3])
            self.ctc_head = CTCHead(cfg.encoder.d_model, len(tokenizer), rngs[4])
        self.prompt_ids = tokenizer.encode(cfg.prompt)
        self.registry = ParameterRegistry()
        self.registry.add_module("encoder", "encoder", self.encoder)
        self.registry.add_module("projector", "projector", self.projector)
        self.registry.add_module("llm_bridge", "bridge", self.bridge)
        self.registry.add_module("llm_body", "llm", self.llm)
        self.registry.add_module("ctc_head", "ctc_head", self.ctc_head)
        if lora:
            self.install_lora()

    # -- LoRA ---------------------------------------------------------------
    @property
    def has_lora(self):
        return bool(self.llm.adapters())

    def install_lora(self, rank=None, alpha=None):
        rank = self.cfg.lora_rank if rank is None else rank
        alpha = self.cfg.lora_alpha if alpha is None else alpha
        rng = np.random.default_rng([self.seed, 12])
        with default_dtype(self.dtype):
            installed = apply_lora(self.llm, rank, alpha, rng)
        for name, ad in installed:
            self.registry.add("lora", f"llm.{name}.lora_A", ad.A)
            self.registry.add("lora", f"llm.{name}.lora_B", ad.B)

    def merge_lora(self):
        merged = merge_lora(self.llm)
        for name in merged:
            self.registry.remove(f"llm.{name}.lora_A")
            self.registry.remove(f"llm.{name}.lora_B")

    # -- forward paths --------------------------------------------------------
    def speech_embeddings(self, features, lengths):
        h, enc_len = self.encoder(Tensor(features.astype(self.dtype, copy=False)), lengths)
        p, proj_len = self.projector(h, enc_len)
        return self.bridge(p), proj_len

    def loss(self, batch: Batch):
        es, lens = self.speech_embeddings(batch.features, batch.lengths)
        reg = regulate_batch(self.llm, self.prompt_ids, es, lens, batch.transcript_ids)
        return batch_loss(self.llm, reg)

    def ctc_loss(self, batch: Batch):
        h, enc_len = self.encoder(Tensor(batch.features.astype(self.dtype, copy=False)), batch.lengths)
        return ctc_loss_batch(self.ctc_head(h), enc_len, batch.transcript_ids)

    def transcribe(self, batch: Batch, max_len):
        """Greedy transcripts (TokenSequence) for every utterance of the batch."""
        from speechllm.autodiff import no_grad

        with no_grad():
            es, lens = self.speech_embeddings(batch.features, batch.lengths)
            prompt = self.llm.tok_emb.data[self.prompt_ids]
            P = len(self.prompt_ids)
            B, Lmax, d = es.shape
            n = P + int(lens.max())
            emb = np.zeros((B, n, d), dtype=self.dtype)
            seg = np.zeros((B, n), dtype=np.int64)
            pos = np.zeros((B, n), dtype=np.int64)
            for b in range(B):
                L = int(lens[b])
                emb[b, :P] = prompt
                emb[b, P : P + L] = es.data[b, :L]
                seg[b, : P + L], pos[b, : P + L] = segment_positions(P, L, 0)
        return greedy_decode(self.llm, (emb, seg, pos), P + lens, max_len)

    # -- state -----------------------------------------------------------------
    def state_dict(self):
        return self.registry.state_dict()

    def load_state_dict(self, arrays, strict=True):
        self.registry.load_state_dict(arrays, strict=strict)

    def group_state(self, *groups):
        """Copies of the arrays of the named parameter groups."""
        return {n: t.data.copy() for g in groups for n, t in self.registry.groups[g].parameters.items()}

    def save(self, directory, step=0, config=None, extra=None):
        meta = {
            "model_config": self.cfg.to_dict(),
            "vocabulary": self.tokenizer.symbols,
            "lora": self.has_lora,
            "seed": self.seed,
            "loss_reduction": "mean over supervised transcript+EOS tokens",
            "template": "prompt | speech | transcript; no separators; segment-local positions",
        }
        meta.update(extra or {})
        return save_checkpoint(
            directory, self.state_dict(), self.registry.group_membership(), step=step, config=config, extra=meta
        )

    @classmethod
    def load(cls, directory):
        arrays, meta = load_checkpoint(directory)
        cfg = ModelConfig.from_dict(meta["model_config"])
        tokenizer = CharTokenizer(meta["vocabulary"][3:])
        model = cls(cfg, tokenizer, seed=meta.get("seed", 0), lora=meta["lora"])
        model.load_state_dict(arrays)
        return model, meta
