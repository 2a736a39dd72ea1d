"""Parameter containers: a tiny Module base and the group registry used for freezing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from speechllm.autodiff.tensor import Tensor
from speechllm.errors import ConfigError

GROUP_NAMES = ("encoder", "projector", "llm_bridge", "llm_body", "lora", "ctc_head")


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


class Module:
    """Collects ``Tensor`` attributes (and nested modules / lists of modules) as parameters.

    Constants (masks, positional tables) are kept as plain numpy arrays so they
    are never mistaken for parameters.
    """

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return sum(p.size for p in self.parameters())


def _walk(value, name):
    if isinstance(value, Tensor):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")


@dataclass
class ParameterGroup:
    name: str
    parameters: dict = field(default_factory=dict)
    trainable: bool = True


class ParameterRegistry:
    """Maps every model parameter to exactly one named group.

    ``set_trainable`` is the freeze/unfreeze unit: it flips ``requires_grad`` on
    every tensor of a group, so frozen tensors never enter the autodiff graph
    and never receive gradients or optimizer updates.
    """

    def __init__(self):
        self.groups = {name: ParameterGroup(name) for name in GROUP_NAMES}
        self._group_of = {}

    def add(self, group, name, tensor):
        if group not in self.groups:
            raise ConfigError(f"unknown parameter group {group!r}")
        if name in self._group_of:
            raise ConfigError(f"parameter {name!r} already registered in group {self._group_of[name]!r}")
        self.groups[group].parameters[name] = tensor
        self._group_of[name] = group
        tensor.requires_grad = self.groups[group].trainable

    def add_module(self, group, prefix, module):
        for name, p in module.named_parameters(prefix=prefix + "."):
            self.add(group, name, p)

    def remove(self, name):
        group = self._group_of.pop(name)
        del self.groups[group].parameters[name]

    def group_of(self, name):
        return self._group_of[name]

    def set_trainable(self, group, flag):
        if group not in self.groups:
            raise ConfigError(f"unknown parameter group {group!r}")
        g = self.groups[group]
        g.trainable = bool(flag)
        for t in g.parameters.values():
            t.requires_grad = g.trainable
            if not flag:
                t.grad = None

    def freeze_all(self):
        for name in self.groups:
            self.set_trainable(name, False)

    def trainable_groups(self):
        return {name for name, g in self.groups.items() if g.trainable and g.parameters}

    def named_parameters(self, trainable_only=False):
        for gname, g in self.groups.items():
            if trainable_only and not g.trainable:
                continue
            yield from g.parameters.items()

    def __len__(self):
        return len(self._group_of)

    def __contains__(self, name):
        return name in self._group_of

    def __getitem__(self, name):
        return self.groups[self._group_of[name]].parameters[name]

    def num_trainable(self):
        return sum(t.size for _, t in self.named_parameters(trainable_only=True))

    def zero_grad(self):
        for _, t in self.named_parameters():
            t.grad = None

    def state_dict(self):
        """Copies of all parameter arrays keyed by name."""
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, arrays, strict=True):
        missing = [n for n in self._group_of if n not in arrays]
        extra = [n for n in arrays if n not in self._group_of]
        if strict and (missing or extra):
            raise ConfigError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, arr in arrays.items():
            if name not in self._group_of:
                continue
            t = self[name]
            if t.shape != arr.shape:
                raise ConfigError(f"shape mismatch for {name}: {t.shape} vs {arr.shape}")
            t.data = np.array(arr, dtype=t.dtype, copy=True)

    def group_membership(self):
        return dict(self._group_of)
