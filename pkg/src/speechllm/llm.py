"""Toy decoder-only LLM: character tokenizer, sequence regulation, masked loss, greedy decoding, LoRA.

Regulation template (no separator tokens)::

    [prompt tokens] [speech embeddings] [transcript tokens]

Position ids restart in every segment: prompt 0..P-1, speech 0..L-1 and
transcript 1..|T|, so the token that predicts character j+1 carries the same
position id as speech vector j+1. A learned segment embedding marks which
segment a position belongs to. The loss covers the |T| transcript characters
and the terminating EOS, i.e. the predictions made at positions
P+L-1 .. P+L+|T|-1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from speechllm.autodiff import Module, Tensor, concat, cross_entropy, no_grad, parameter, take_rows
from speechllm.errors import ConfigError, ContractError, LoraStateError, TokenizationError, UndefinedLossError
from speechllm.layers import LayerNorm, Linear, LoraAdapter, TransformerBlock, NEG_INF, _normal, causal_mask, sinusoidal_table

PAD, BOS, EOS = 0, 1, 2
SPECIALS = ("<pad>", "<bos>", "<eos>")
DEFAULT_PROMPT = "Transcribe the following speech"

SEG_PROMPT, SEG_SPEECH, SEG_TRANSCRIPT = 0, 1, 2
ROLES = ("prompt", "transcript", "generated")
LORA_TARGETS = ("wq", "wv")


class CharTokenizer:
    """Character-level vocabulary; ids 0-2 are PAD/BOS/EOS."""

    def __init__(self, symbols):
        seen = []
        for s in symbols:
            if s not in seen and s not in SPECIALS:
                seen.append(s)
        self.symbols = list(SPECIALS) + seen
        self._index = {s: i for i, s in enumerate(self.symbols)}

    @classmethod
    def for_corpus(cls, alphabet, prompt=DEFAULT_PROMPT):
        return cls(sorted(set(alphabet) | set(prompt)))

    def __len__(self):
        return len(self.symbols)

    def encode(self, text):
        try:
            return [self._index[c] for c in text]
        except KeyError as exc:
            raise TokenizationError(exc.args[0], text) from None

    def decode(self, ids):
        return "".join(self.symbols[i] for i in ids if i >= len(SPECIALS))

    def save(self, path):
        Path(path).write_text("".join(s + "\n" for s in self.symbols), encoding="utf-8")

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if tuple(lines[:3]) != SPECIALS:
            raise ConfigError(f"{path}: vocabulary must start with {SPECIALS}")
        return cls(lines[3:])


@dataclass
class TokenSequence:
    ids: list
    role: str
    truncated: bool = False

    def __post_init__(self):
        if self.role not in ROLES:
            raise ContractError(f"unknown token role {self.role!r}")

    def __len__(self):
        return len(self.ids)


@dataclass
class LLMConfig:
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    ff_mult: int = 4


class DecoderLM(Module):
    def __init__(self, vocab_size, cfg: LLMConfig, rng):
        self.cfg = cfg
        d = cfg.d_model
        self.tok_emb = parameter(_normal(rng, (vocab_size, d), 1.0))
        self.seg_emb = parameter(_normal(rng, (3, d), 1.0))
        self.blocks = [TransformerBlock(d, cfg.n_heads, cfg.ff_mult, rng) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(d)
        # small output init so an untrained model predicts close to uniform
        self.head = Linear(d, vocab_size, rng, bias=False, std=0.02)

    @property
    def d_model(self):
        return self.cfg.d_model

    @property
    def vocab_size(self):
        return self.tok_emb.shape[0]

    def embed(self, ids):
        return take_rows(self.tok_emb, np.asarray(ids, dtype=np.int64))

    def __call__(self, x, position_ids, segment_ids):
        """Causal forward over (B, N, d) input embeddings; returns final hidden states."""
        x = x + sinusoidal_table(position_ids, self.d_model, x.dtype)
        x = x + take_rows(self.seg_emb, segment_ids)
        mask = causal_mask(x.shape[1], x.dtype)
        for blk in self.blocks:
            x = blk(x, mask=mask)
        return self.ln_f(x)

    def logits(self, hidden):
        return self.head(hidden)

    # -- LoRA --------------------------------------------------------------
    def lora_targets(self, targets=LORA_TARGETS):
        out = []
        for i, blk in enumerate(self.blocks):
            for t in targets:
                if not hasattr(blk.attn, t):
                    raise ConfigError(f"unknown LoRA target {t!r}")
                out.append((f"blocks.{i}.attn.{t}", getattr(blk.attn, t)))
        return out

    def adapters(self):
        return [(name, lin._lora) for name, lin in self.lora_targets(("wq", "wk", "wv", "wo")) if lin._lora is not None]


def apply_lora(llm, rank=12, alpha=32.0, rng=None, targets=LORA_TARGETS):
    """Install zero-initialised adapters on the attention projections named in ``targets``.

    Returns the list of (name, adapter) pairs installed.
    """
    if rank < 1:
        raise ConfigError(f"LoRA rank must be >= 1, got {rank}")
    rng = rng if rng is not None else np.random.default_rng(0)
    found = llm.lora_targets(targets)
    if any(lin._lora is not None for _, lin in found):
        raise LoraStateError("LoRA adapters already installed")
    installed = []
    for name, lin in found:
        lin._lora = LoraAdapter(lin.d_in, lin.d_out, rank, alpha, rng)
        lin._lora.A.data = lin._lora.A.data.astype(lin.weight.dtype)
        lin._lora.B.data = lin._lora.B.data.astype(lin.weight.dtype)
        installed.append((name, lin._lora))
    return installed


def merge_lora(llm):
    """Fold W + (alpha/rank) A B into the base weights and drop the adapters."""
    merged = []
    for name, lin in llm.lora_targets(("wq", "wk", "wv", "wo")):
        if lin._lora is None:
            continue
        lin.weight.data = (lin.weight.data + lin._lora.delta()).astype(lin.weight.dtype)
        lin._lora = None
        merged.append(name)
    if not merged:
        raise LoraStateError("no LoRA adapters to merge")
    return merged


# ---------------------------------------------------------------------------
# regulation


def tokenize_embed(llm, tokenizer, text, role="prompt"):
    """Eqs. E = Embedding(Tokenizer(text)) for prompt or transcript text."""
    ids = tokenizer.encode(text)
    seq = TokenSequence(ids=ids, role=role)
    if not ids:
        return seq, Tensor(np.zeros((0, llm.d_model), dtype=llm.tok_emb.dtype))
    return seq, llm.embed(ids)


@dataclass
class RegulatedSequence:
    embeddings: Tensor
    loss_mask: np.ndarray
    segment_ids: np.ndarray
    position_ids: np.ndarray
    targets: np.ndarray = field(default=None)

    def __len__(self):
        return self.embeddings.shape[0]

    @property
    def n_supervised(self):
        return int(self.loss_mask.sum())


def segment_positions(n_prompt, n_speech, n_transcript):
    seg = np.concatenate([
        np.full(n_prompt, SEG_PROMPT), np.full(n_speech, SEG_SPEECH), np.full(n_transcript, SEG_TRANSCRIPT)
    ]).astype(np.int64)
    pos = np.concatenate([np.arange(n_prompt), np.arange(n_speech), np.arange(1, n_transcript + 1)]).astype(np.int64)
    return seg, pos


def regulate(E_p, E_s, E_t=None, transcript_ids=None):
    """Concatenate prompt, speech and transcript embeddings into one LLM input.

    With no (or an empty) transcript this is the inference prefix and the loss
    mask is empty.
    """
    d = E_s.shape[-1]
    parts = [E_p, E_s] + ([E_t] if E_t is not None else [])
    for p in parts:
        if p.ndim != 2 or p.shape[-1] != d:
            raise ContractError(f"segment width {p.shape[-1]} differs from speech width {d}")
    n_p, n_s = E_p.shape[0], E_s.shape[0]
    n_t = 0 if E_t is None else E_t.shape[0]
    emb = concat([p for p in parts if p.shape[0] > 0], axis=0)
    seg, pos = segment_positions(n_p, n_s, n_t)
    n = n_p + n_s + n_t
    mask = np.zeros(n, dtype=bool)
    targets = np.full(n, -1, dtype=np.int64)
    if n_t > 0:
        start = n_p + n_s - 1
        mask[start : start + n_t + 1] = True
        if transcript_ids is not None:
            if len(transcript_ids) != n_t:
                raise ContractError(f"{len(transcript_ids)} transcript ids for {n_t} transcript embeddings")
            targets[start : start + n_t + 1] = list(transcript_ids) + [EOS]
    return RegulatedSequence(emb, mask, seg, pos, targets)


def forward_loss(llm, reg: RegulatedSequence):
    """Mean next-token cross-entropy over the supervised positions of one regulated sequence."""
    idx = np.flatnonzero(reg.loss_mask)
    if idx.size == 0:
        raise UndefinedLossError("loss mask selects no position")
    if reg.targets is None or np.any(reg.targets[idx] < 0):
        raise ContractError("regulated sequence carries no targets for its supervised positions")
    hidden = llm(reg.embeddings.reshape(1, len(reg), -1), reg.position_ids[None], reg.segment_ids[None])
    sel = hidden.reshape(len(reg), -1)[idx]
    return cross_entropy(llm.logits(sel), reg.targets[idx])


# ---------------------------------------------------------------------------
# batched regulation used for training


@dataclass
class RegulatedBatch:
    embeddings: Tensor
    position_ids: np.ndarray
    segment_ids: np.ndarray
    lengths: np.ndarray
    loss_rows: np.ndarray
    targets: np.ndarray


def regulate_batch(llm, prompt_ids, speech, speech_lengths, transcripts):
    """Right-padded batch of regulated sequences built with a single row gather.

    ``speech`` is a (B, Lmax, d) Tensor whose first ``speech_lengths[b]`` rows are valid.
    """
    B, Lmax, d = speech.shape
    V = llm.vocab_size
    P = len(prompt_ids)
    lens = np.array([P + int(speech_lengths[b]) + len(transcripts[b]) for b in range(B)])
    N = int(lens.max())
    index = np.full((B, N), PAD, dtype=np.int64)
    seg = np.zeros((B, N), dtype=np.int64)
    pos = np.zeros((B, N), dtype=np.int64)
    rows, targets = [], []
    for b in range(B):
        L, t_ids = int(speech_lengths[b]), transcripts[b]
        n = lens[b]
        index[b, :P] = prompt_ids
        index[b, P : P + L] = V + b * Lmax + np.arange(L)
        index[b, P + L : n] = t_ids
        s, p = segment_positions(P, L, len(t_ids))
        seg[b, :n], pos[b, :n] = s, p
        start = P + L - 1
        rows.extend(b * N + start + np.arange(len(t_ids) + 1))
        targets.extend(list(t_ids) + [EOS])
    table = concat([llm.tok_emb, speech.reshape(B * Lmax, d)], axis=0)
    emb = take_rows(table, index)
    return RegulatedBatch(emb, pos, seg, lens, np.asarray(rows, dtype=np.int64), np.asarray(targets, dtype=np.int64))


def batch_loss(llm, reg: RegulatedBatch):
    """Mean cross-entropy over all supervised tokens of the batch."""
    if reg.loss_rows.size == 0:
        raise UndefinedLossError("batch has no supervised positions")
    hidden = llm(reg.embeddings, reg.position_ids, reg.segment_ids)
    B, N, d = hidden.shape
    sel = hidden.reshape(B * N, d)[reg.loss_rows]
    return cross_entropy(llm.logits(sel), reg.targets)


# ---------------------------------------------------------------------------
# greedy generation


class _KVCache:
    """Per-layer key/value buffers for incremental decoding (plain arrays, inference only)."""

    def __init__(self, n_layers, B, n_heads, capacity, dh, dtype):
        self.k = [np.zeros((B, n_heads, capacity, dh), dtype=dtype) for _ in range(n_layers)]
        self.v = [np.zeros((B, n_heads, capacity, dh), dtype=dtype) for _ in range(n_layers)]
        self.valid = np.zeros((B, capacity), dtype=bool)
        self.size = 0


def _cached_forward(llm, x, pos, seg, cache, causal):
    """Run (B, n, d) new positions through the decoder, appending their keys/values to ``cache``."""
    B, n, d = x.shape
    lo, hi = cache.size, cache.size + n
    h = x + sinusoidal_table(pos, d, x.dtype) + llm.seg_emb.data[seg]
    mask = np.where(cache.valid[:, None, None, :hi], 0.0, NEG_INF).astype(x.dtype)
    if causal:
        mask = mask + np.pad(causal_mask(n, x.dtype), ((0, 0), (lo, 0)))
    for li, blk in enumerate(llm.blocks):
        attn = blk.attn
        a_in = blk.ln1(Tensor(h))
        q = attn._split(attn.wq(a_in)).data
        cache.k[li][:, :, lo:hi] = attn._split(attn.wk(a_in)).data
        cache.v[li][:, :, lo:hi] = attn._split(attn.wv(a_in)).data
        k, v = cache.k[li][:, :, :hi], cache.v[li][:, :, :hi]
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(q.shape[-1])) + mask
        scores = np.exp(scores - scores.max(axis=-1, keepdims=True))
        att = scores / scores.sum(axis=-1, keepdims=True)
        out = (att @ v).transpose(0, 2, 1, 3).reshape(B, n, d)
        h = h + attn.wo(Tensor(out)).data
        h = h + blk.ff(blk.ln2(Tensor(h))).data
    cache.size = hi
    return llm.ln_f(Tensor(h)).data


def greedy_decode(llm, prefix, prefix_lengths, max_len):
    """Batched greedy decoding with a key/value cache.

    ``prefix`` is a (B, Nmax, d) array of right-padded, regulated prompt+speech
    embeddings together with their segment/position ids: a tuple (emb, seg, pos).
    Returns a list of TokenSequence with role "generated".
    """
    if max_len < 1:
        raise ContractError("max_len must be >= 1")
    emb, seg, pos = prefix
    B, n, _ = emb.shape
    prefix_lengths = np.asarray(prefix_lengths, dtype=np.int64)
    blk0 = llm.blocks[0].attn
    cache = _KVCache(
        len(llm.blocks), B, blk0.n_heads, n + max_len, llm.d_model // blk0.n_heads, emb.dtype
    )
    cache.valid[:, :n] = np.arange(n)[None, :] < prefix_lengths[:, None]
    out = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    with no_grad():
        hidden = _cached_forward(llm, emb, pos, seg, cache, causal=True)
        h_last = hidden[np.arange(B), prefix_lengths - 1]
        for step in range(max_len):
            nxt = llm.logits(Tensor(h_last)).data.argmax(axis=-1)
            for b in np.flatnonzero(~done):
                if nxt[b] == EOS:
                    done[b] = True
                else:
                    out[b].append(int(nxt[b]))
            if done.all() or step == max_len - 1:
                break
            cache.valid[:, cache.size] = True
            x = llm.tok_emb.data[nxt][:, None, :]
            p = np.full((B, 1), step + 1, dtype=np.int64)
            s = np.full((B, 1), SEG_TRANSCRIPT, dtype=np.int64)
            h_last = _cached_forward(llm, x, p, s, cache, causal=False)[:, 0]
    return [TokenSequence(ids=o, role="generated", truncated=not done[b]) for b, o in enumerate(out)]


def generate(llm, E_p, E_s, max_len):
    """Greedy transcription of one utterance from its prompt and speech embeddings."""
    reg = regulate(E_p, E_s)
    n = len(reg)
    prefix = (reg.embeddings.data[None], reg.segment_ids[None], reg.position_ids[None])
    return greedy_decode(llm, prefix, [n], max_len)[0]
