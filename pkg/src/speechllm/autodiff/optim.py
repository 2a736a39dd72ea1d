"""AdamW with decoupled weight decay, element-wise gradient clipping and gradient accumulation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from speechllm.errors import ConfigError, ContractError

CLIP_VALUE = 5.0


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 1.0e-5
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1.0e-6
    weight_decay: float = 0.01


@dataclass
class OptimizerState:
    hp: AdamWConfig = field(default_factory=AdamWConfig)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)
    step_count: int = 0


def clip_gradients(grads, limit=CLIP_VALUE):
    """Clamp every gradient element into [-limit, limit].

    Accepts a single array, a list or a dict of arrays and returns the same kind.
    """
    if isinstance(grads, dict):
        return {k: np.clip(g, -limit, limit) for k, g in grads.items()}
    if isinstance(grads, (list, tuple)):
        return [np.clip(g, -limit, limit) for g in grads]
    return np.clip(grads, -limit, limit)


def adamw_update(p, g, m, v, t, hp, decay=True):
    """One bias-corrected AdamW update; returns (p', m', v').

    p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
    """
    if np.shape(p) != np.shape(g):
        raise ContractError(f"gradient shape {np.shape(g)} does not match parameter {np.shape(p)}")
    m = hp.beta1 * m + (1.0 - hp.beta1) * g
    v = hp.beta2 * v + (1.0 - hp.beta2) * g * g
    m_hat = m / (1.0 - hp.beta1**t)
    v_hat = v / (1.0 - hp.beta2**t)
    wd = hp.weight_decay if decay else 0.0
    p = p - hp.lr * (m_hat / (np.sqrt(v_hat) + hp.eps) + wd * p)
    return p, m, v


def adamw_step(params, grads, state, no_decay=()):
    """Apply one AdamW step in place to ``params`` (name -> Tensor) using ``grads`` (name -> array).

    Parameters absent from ``grads`` are skipped, including their decay.
    """
    hp = state.hp
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
            state.t[name] = 0
        elif state.m[name].shape != p.data.shape:
            raise ContractError(f"optimizer state for {name} has shape {state.m[name].shape}, parameter {p.shape}")
        state.t[name] += 1
        new_p, state.m[name], state.v[name] = adamw_update(
            p.data, g, state.m[name], state.v[name], state.t[name], hp, decay=name not in no_decay
        )
        p.data = new_p.astype(p.dtype, copy=False)
    state.step_count += 1


class AdamW:
    """Optimizer over the trainable tensors of a :class:`ParameterRegistry`.

    Weight decay is applied to matrices only (ndim >= 2); biases and norm gains are not decayed.
    """

    def __init__(self, registry, hp=None, clip=CLIP_VALUE):
        self.registry = registry
        self.state = OptimizerState(hp=hp or AdamWConfig())
        self.clip = clip

    def step(self, scale=1.0):
        """Scale accumulated ``.grad`` (e.g. 1/n_accum), clip, update, and clear gradients."""
        params, grads, no_decay = {}, {}, set()
        for name, t in self.registry.named_parameters(trainable_only=True):
            params[name] = t
            g = np.zeros_like(t.data) if t.grad is None else t.grad * scale
            grads[name] = g if self.clip is None else clip_gradients(g, self.clip)
            if t.ndim < 2:
                no_decay.add(name)
        adamw_step(params, grads, self.state, no_decay=no_decay)
        self.registry.zero_grad()


def accumulate_and_step(micro_batches, n_accum, loss_fn, optimizer):
    """Average gradients over ``n_accum`` micro-batches, clip, then take one optimizer step.

    ``micro_batches`` is consumed in chunks of ``n_accum``; a trailing partial chunk
    is averaged over its own size. Returns the per-micro-batch losses.
    """
    from speechllm.autodiff.tensor import backward

    if n_accum < 1:
        raise ConfigError(f"n_accum must be >= 1, got {n_accum}")
    losses, pending = [], 0
    optimizer.registry.zero_grad()
    for mb in micro_batches:
        loss = loss_fn(mb)
        backward(loss)
        losses.append(float(loss.data))
        pending += 1
        if pending == n_accum:
            optimizer.step(scale=1.0 / n_accum)
            pending = 0
    if pending:
        optimizer.step(scale=1.0 / pending)
    return losses
