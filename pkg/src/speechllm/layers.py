"""Building blocks shared by the encoder, projectors and the decoder."""

from __future__ import annotations

import math

import numpy as np

from speechllm.autodiff import Module, Tensor, conv1d, gelu, get_default_dtype, layer_norm, parameter, softmax

NEG_INF = -1e9


def _normal(rng, shape, std):
    return (rng.standard_normal(shape) * std).astype(get_default_dtype())


class LoraAdapter(Module):
    """Low-rank delta (alpha / rank) * A @ B; B starts at zero so the delta starts at zero."""

    def __init__(self, d_in, d_out, rank, alpha, rng):
        self.rank = rank
        self.alpha = alpha
        self.scale = alpha / rank
        self.A = parameter(_normal(rng, (d_in, rank), 1.0 / math.sqrt(d_in)))
        self.B = parameter(np.zeros((rank, d_out), dtype=get_default_dtype()))

    def delta(self):
        return self.scale * (self.A.data @ self.B.data)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True, std=None):
        self.weight = parameter(_normal(rng, (d_in, d_out), std if std is not None else 1.0 / math.sqrt(d_in)))
        self.bias = parameter(np.zeros(d_out, dtype=get_default_dtype())) if bias else None
        self._lora = None

    @property
    def d_in(self):
        return self.weight.shape[0]

    @property
    def d_out(self):
        return self.weight.shape[1]

    def __call__(self, x):
        y = x @ self.weight
        if self.bias is not None:
            y = y + self.bias
        if self._lora is not None:
            y = y + ((x @ self._lora.A) @ self._lora.B) * self._lora.scale
        return y


class LayerNorm(Module):
    def __init__(self, d):
        dt = get_default_dtype()
        self.gain = parameter(np.ones(d, dtype=dt))
        self.bias = parameter(np.zeros(d, dtype=dt))

    def __call__(self, x):
        return layer_norm(x, self.gain, self.bias)


class Conv1d(Module):
    """Strided temporal convolution with symmetric zero padding; trailing partial windows dropped.

    Output length is floor(T / stride) for any input length T >= stride.
    """

    def __init__(self, d_in, d_out, kernel, stride, padding, rng):
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.weight = parameter(_normal(rng, (kernel, d_in, d_out), 1.0 / math.sqrt(kernel * d_in)))
        self.bias = parameter(np.zeros(d_out, dtype=get_default_dtype()))

    def out_length(self, length):
        return length // self.stride

    def __call__(self, x):
        y = conv1d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)
        keep = x.shape[1] // self.stride
        if y.shape[1] != keep:
            y = y[:, :keep, :]
        return y


class FeedForward(Module):
    def __init__(self, d, hidden, rng):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)

    def __call__(self, x):
        return self.fc2(gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    def __init__(self, d, n_heads, rng, d_kv=None):
        if d % n_heads:
            raise ValueError(f"width {d} not divisible by {n_heads} heads")
        d_kv = d if d_kv is None else d_kv
        self.n_heads = n_heads
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d_kv, d, rng)
        self.wv = Linear(d_kv, d, rng)
        self.wo = Linear(d, d, rng)

    def _split(self, x):
        B, N, d = x.shape
        return x.reshape(B, N, self.n_heads, d // self.n_heads).transpose(0, 2, 1, 3)

    def __call__(self, x, k_in=None, v_in=None, mask=None):
        """``mask`` is an additive array broadcastable to (B, heads, Nq, Nk)."""
        k_in = x if k_in is None else k_in
        v_in = k_in if v_in is None else v_in
        B, Nq, d = x.shape
        q = self._split(self.wq(x))
        k = self._split(self.wk(k_in))
        v = self._split(self.wv(v_in))
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d // self.n_heads))
        if mask is not None:
            scores = scores + mask
        att = softmax(scores, axis=-1)
        out = (att @ v).transpose(0, 2, 1, 3).reshape(B, Nq, d)
        return self.wo(out)


class TransformerBlock(Module):
    """Pre-norm self-attention block."""

    def __init__(self, d, n_heads, ff_mult, rng):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, n_heads, rng)
        self.ln2 = LayerNorm(d)
        self.ff = FeedForward(d, ff_mult * d, rng)

    def __call__(self, x, mask=None):
        x = x + self.attn(self.ln1(x), mask=mask)
        return x + self.ff(self.ln2(x))


def sinusoidal_table(positions, d, dtype=None):
    """Fixed sin/cos encodings for integer ``positions`` (any shape) -> (..., d)."""
    positions = np.asarray(positions, dtype=np.float64)
    half = d // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    ang = positions[..., None] * freqs
    out = np.zeros(positions.shape + (d,))
    out[..., 0 : 2 * half : 2] = np.sin(ang)
    out[..., 1 : 2 * half : 2] = np.cos(ang)
    return out.astype(dtype or get_default_dtype())


def key_padding_mask(lengths, n_keys, dtype=None):
    """(B, 1, 1, n_keys) additive mask hiding keys at index >= length."""
    lengths = np.asarray(lengths)
    hide = np.arange(n_keys)[None, :] >= lengths[:, None]
    return (hide * NEG_INF).astype(dtype or get_default_dtype())[:, None, None, :]


def causal_mask(n, dtype=None):
    return (np.triu(np.ones((n, n), dtype=bool), k=1) * NEG_INF).astype(dtype or get_default_dtype())


def time_mask(lengths, n):
    """(B, n, 1) float mask of valid frames."""
    lengths = np.asarray(lengths)
    return (np.arange(n)[None, :] < lengths[:, None]).astype(get_default_dtype())[:, :, None]


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)
