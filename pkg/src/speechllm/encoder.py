"""Toy speech encoder (100 Hz features -> 25 Hz frames) and the CTC objective used to finetune it."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from speechllm import kernels
from speechllm.autodiff import Module, Tensor, custom_op, gelu, log_softmax
from speechllm.errors import ContractError, CTCInfeasibleError, EmptyOutputError
from speechllm.layers import NEG_INF, Conv1d, LayerNorm, Linear, TransformerBlock, key_padding_mask, time_mask

INPUT_RATE_HZ = 100.0
STRIDE = 4
OUTPUT_RATE_HZ = INPUT_RATE_HZ / STRIDE


@dataclass
class EncoderConfig:
    d_in: int = 16
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ff_mult: int = 4
    attn_window: int = 8


@dataclass
class FeatureSequence:
    frames: np.ndarray
    frame_rate_hz: float = INPUT_RATE_HZ

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ContractError(f"feature sequence must be a non-empty T x D matrix, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ContractError("feature sequence contains non-finite values")

    def __len__(self):
        return self.frames.shape[0]

    @property
    def duration_s(self):
        return len(self) / self.frame_rate_hz


@dataclass
class EncoderOutput:
    frames: Tensor
    frame_rate_hz: float = OUTPUT_RATE_HZ

    def __len__(self):
        return self.frames.shape[0]


def output_length(n_frames):
    return n_frames // STRIDE


class SpeechEncoder(Module):
    """Two stride-2 convolutions followed by local-window self-attention blocks.

    Attention is restricted to +/- ``attn_window`` frames, so each output frame
    depends on a bounded stretch of input (see :meth:`receptive_field`).
    """

    def __init__(self, cfg: EncoderConfig, rng):
        self.cfg = cfg
        self.conv1 = Conv1d(cfg.d_in, cfg.d_model, 3, 2, 1, rng)
        self.conv2 = Conv1d(cfg.d_model, cfg.d_model, 3, 2, 1, rng)
        self.blocks = [TransformerBlock(cfg.d_model, cfg.n_heads, cfg.ff_mult, rng) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(cfg.d_model)

    def receptive_field(self):
        """Radius in output frames beyond which an output frame ignores the input."""
        return self.cfg.n_layers * self.cfg.attn_window + 1

    def __call__(self, feats, lengths):
        feats = feats if isinstance(feats, Tensor) else Tensor(feats)
        lengths = np.asarray(lengths, dtype=np.int64)
        if lengths.min() < STRIDE:
            raise EmptyOutputError(f"utterance of {int(lengths.min())} frames is shorter than the encoder stride {STRIDE}")
        if feats.shape[-1] != self.cfg.d_in:
            raise ContractError(f"encoder expects {self.cfg.d_in}-dim features, got {feats.shape[-1]}")
        l1 = lengths // 2
        x = gelu(self.conv1(feats)) * time_mask(l1, feats.shape[1] // 2)
        l2 = l1 // 2
        x = gelu(self.conv2(x)) * time_mask(l2, x.shape[1] // 2)
        n = x.shape[1]
        idx = np.arange(n)
        band = (np.abs(idx[:, None] - idx[None, :]) > self.cfg.attn_window) * NEG_INF
        mask = band.astype(x.dtype)[None, None] + key_padding_mask(l2, n, x.dtype)
        for blk in self.blocks:
            x = blk(x, mask=mask)
        return self.ln_f(x), l2


def encode(encoder, S: FeatureSequence) -> EncoderOutput:
    """H_s = Encoder(S) for a single 100 Hz utterance."""
    if S.frame_rate_hz != INPUT_RATE_HZ:
        raise ContractError(f"encoder expects {INPUT_RATE_HZ} Hz features, got {S.frame_rate_hz}")
    frames, lengths = encoder(S.frames[None].astype(encoder.conv1.weight.dtype), [len(S)])
    return EncoderOutput(frames=frames[0, : int(lengths[0])], frame_rate_hz=S.frame_rate_hz / STRIDE)


class CTCHead(Module):
    def __init__(self, d_in, vocab_size, rng):
        self.proj = Linear(d_in, vocab_size + 1, rng)
        self.blank = vocab_size

    def __call__(self, h):
        return self.proj(h)


def min_ctc_frames(target):
    """Fewest frames that can emit ``target``: one per label plus a blank between repeats."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _ctc_single(logp, target, blank):
    target = np.asarray(target, dtype=np.int64)
    need = min_ctc_frames(target)
    if logp.shape[0] < need:
        raise CTCInfeasibleError(f"target of length {len(target)} needs {need} frames, only {logp.shape[0]} available")
    nll, grad = kernels.ctc_forward_backward(np.ascontiguousarray(logp, dtype=np.float64), target, int(blank))
    if not np.isfinite(nll):
        raise CTCInfeasibleError("no alignment collapses to the target")
    return nll, grad


def ctc_loss(logits, target, blank=None):
    """Negative log-probability of ``target`` summed over all CTC alignments.

    ``logits`` is a (T', V+1) Tensor; the blank defaults to the last index.
    """
    blank = logits.shape[-1] - 1 if blank is None else blank
    logp = log_softmax(logits, axis=-1)
    nll, grad = _ctc_single(logp.data, target, blank)
    return custom_op(np.asarray(nll, dtype=logits.dtype), (logp,), lambda g: (g * grad.astype(logp.dtype),))


def ctc_loss_batch(logits, lengths, targets, blank=None):
    """Mean per-utterance CTC loss over a padded (B, T', V+1) batch."""
    blank = logits.shape[-1] - 1 if blank is None else blank
    logp = log_softmax(logits, axis=-1)
    B = logits.shape[0]
    total = 0.0
    full_grad = np.zeros(logp.shape, dtype=np.float64)
    for b in range(B):
        n = int(lengths[b])
        nll, grad = _ctc_single(logp.data[b, :n], targets[b], blank)
        total += nll
        full_grad[b, :n] = grad
    full_grad /= B
    return custom_op(np.asarray(total / B, dtype=logits.dtype), (logp,), lambda g: (g * full_grad.astype(logp.dtype),))


def ctc_greedy_decode(logits, blank=None):
    """Best-path decoding: per-frame argmax, merge repeats, drop blanks."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    blank = arr.shape[-1] - 1 if blank is None else blank
    best = arr.argmax(axis=-1)
    out, prev = [], None
    for c in best.tolist():
        if c != prev and c != blank:
            out.append(c)
        prev = c
    return out
