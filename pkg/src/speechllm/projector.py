"""Projectors from 25 Hz encoder frames to LLM-width speech embeddings.

All projectors keep the encoder width; :class:`Bridge` then maps to the LLM
embedding width (E_s = Linear(Projector(H_s))). Rate-based kinds emit
floor(T'/k) vectors, dropping the trailing T' mod k frames; the Q-Former emits
a fixed number of query outputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from speechllm.autodiff import Module, Tensor, gelu, parameter
from speechllm.encoder import EncoderOutput
from speechllm.errors import ConfigError, ContractError, EmptyOutputError
from speechllm.layers import (
    Conv1d,
    FeedForward,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    TransformerBlock,
    _normal,
    as_tensor,
    key_padding_mask,
    sinusoidal_table,
)

KINDS = ("linear", "conv1d", "transformer", "qformer")
RATES = (1, 2, 4, 8)


@dataclass
class ProjectorConfig:
    kind: str = "linear"
    downsample_k: int = 4
    num_queries: int = 64
    hidden: int = 256
    n_layers: int = 2
    n_heads: int = 4
    positional: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"projector kind must be one of {KINDS}, got {self.kind!r}")
        if self.downsample_k not in RATES:
            raise ConfigError(f"downsample_k must be one of {RATES}, got {self.downsample_k}")
        if self.num_queries < 1:
            raise ConfigError("num_queries must be positive")


@dataclass
class SpeechEmbedding:
    vectors: Tensor
    frame_rate_hz: Optional[float]

    def __len__(self):
        return self.vectors.shape[0]


def _check_length(lengths, k):
    if np.min(lengths) < k:
        raise EmptyOutputError(f"{int(np.min(lengths))} encoder frames cannot fill a group of {k}")


def stack_frames(h, k):
    """(B, T', d) -> (B, T'//k, k*d) by concatenating consecutive frames feature-wise."""
    B, n, d = h.shape
    L = n // k
    if L * k != n:
        h = h[:, : L * k, :]
    return h.reshape(B, L, k * d)


class LinearProjector(Module):
    def __init__(self, d, cfg, rng):
        self.k = cfg.downsample_k
        self.fc1 = Linear(self.k * d, cfg.hidden, rng)
        self.fc2 = Linear(cfg.hidden, d, rng)

    def out_lengths(self, lengths):
        return np.asarray(lengths) // self.k

    def __call__(self, h, lengths):
        _check_length(lengths, self.k)
        return self.fc2(gelu(self.fc1(stack_frames(h, self.k)))), self.out_lengths(lengths)


class Conv1dProjector(Module):
    """Kernel 2k-1, stride k, k-1 zero frames on both sides."""

    def __init__(self, d, cfg, rng):
        self.k = k = cfg.downsample_k
        self.conv = Conv1d(d, d, 2 * k - 1, k, k - 1, rng)

    def out_lengths(self, lengths):
        return np.asarray(lengths) // self.k

    def __call__(self, h, lengths):
        _check_length(lengths, self.k)
        return gelu(self.conv(h)), self.out_lengths(lengths)


class TransformerProjector(Module):
    def __init__(self, d, cfg, rng):
        self.k = cfg.downsample_k
        self.inp = Linear(self.k * d, d, rng)
        self.blocks = [TransformerBlock(d, cfg.n_heads, 4, rng) for _ in range(cfg.n_layers)]
        self.ln = LayerNorm(d)

    def out_lengths(self, lengths):
        return np.asarray(lengths) // self.k

    def __call__(self, h, lengths):
        _check_length(lengths, self.k)
        out_len = self.out_lengths(lengths)
        x = self.inp(stack_frames(h, self.k))
        mask = key_padding_mask(out_len, x.shape[1], x.dtype)
        for blk in self.blocks:
            x = blk(x, mask=mask)
        return self.ln(x), out_len


class QFormerBlock(Module):
    def __init__(self, d, n_heads, rng):
        self.ln_self = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, n_heads, rng)
        self.ln_cross = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, n_heads, rng)
        self.ln_ff = LayerNorm(d)
        self.ff = FeedForward(d, 4 * d, rng)

    def __call__(self, q, keys, values, mask):
        q = q + self.self_attn(self.ln_self(q))
        q = q + self.cross_attn(self.ln_cross(q), k_in=keys, v_in=values, mask=mask)
        return q + self.ff(self.ln_ff(q))


class QFormerProjector(Module):
    """Learned queries cross-attending to every encoder frame; keys carry sinusoidal positions."""

    def __init__(self, d, cfg, rng):
        self.num_queries = cfg.num_queries
        self.positional = cfg.positional
        self.queries = parameter(_normal(rng, (cfg.num_queries, d), 1.0))
        self.ln_kv = LayerNorm(d)
        self.blocks = [QFormerBlock(d, cfg.n_heads, rng) for _ in range(cfg.n_layers)]
        self.ln = LayerNorm(d)

    def out_lengths(self, lengths):
        return np.full(len(lengths), self.num_queries, dtype=np.int64)

    def __call__(self, h, lengths):
        _check_length(lengths, 1)
        h = as_tensor(h)
        B, n, d = h.shape
        values = self.ln_kv(h)
        keys = values + sinusoidal_table(np.arange(n), d, h.dtype) if self.positional else values
        mask = key_padding_mask(lengths, n, h.dtype)
        q = self.queries.reshape(1, self.num_queries, d) + np.zeros((B, 1, 1), dtype=h.dtype)
        for blk in self.blocks:
            q = blk(q, keys, values, mask)
        return self.ln(q), self.out_lengths(lengths)


_CLASSES = {
    "linear": LinearProjector,
    "conv1d": Conv1dProjector,
    "transformer": TransformerProjector,
    "qformer": QFormerProjector,
}


def build_projector(d_enc, cfg: ProjectorConfig, rng):
    return _CLASSES[cfg.kind](d_enc, cfg, rng)


class Bridge(Module):
    """The affine map from projector width to LLM embedding width."""

    def __init__(self, d_in, d_llm, rng):
        self.linear = Linear(d_in, d_llm, rng)

    @property
    def d_in(self):
        return self.linear.d_in

    def __call__(self, x):
        if x.shape[-1] != self.d_in:
            raise ContractError(f"bridge expects width {self.d_in}, got {x.shape[-1]}")
        return self.linear(x)


def output_rate(projector, input_rate_hz):
    if isinstance(projector, QFormerProjector):
        return None
    return input_rate_hz / projector.k


def to_llm_space(bridge, projected, frame_rate_hz=None):
    """Apply the bridge to a (L, d) projector output."""
    projected = projected if isinstance(projected, Tensor) else Tensor(projected)
    return SpeechEmbedding(vectors=bridge(projected), frame_rate_hz=frame_rate_hz)


def project(projector, bridge, H: EncoderOutput) -> SpeechEmbedding:
    """E_s for one utterance's encoder output."""
    frames = H.frames
    out, lengths = projector(frames.reshape(1, *frames.shape), [frames.shape[0]])
    return to_llm_space(bridge, out[0, : int(lengths[0])], output_rate(projector, H.frame_rate_hz))


def _project_kind(kind):
    def fn(projector, bridge, H):
        if not isinstance(projector, _CLASSES[kind]):
            raise ContractError(f"expected a {kind} projector, got {type(projector).__name__}")
        return project(projector, bridge, H)

    fn.__name__ = f"project_{kind}"
    fn.__doc__ = f"E_s through a {kind} projector."
    return fn


project_linear = _project_kind("linear")
project_conv1d = _project_kind("conv1d")
project_transformer = _project_kind("transformer")
project_qformer = _project_kind("qformer")
