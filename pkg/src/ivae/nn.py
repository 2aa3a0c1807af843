"""Small MLP building blocks and the Adam/AMSGrad optimizer."""
from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "tanh": ad.tanh,
    "relu": ad.relu,
    "sigmoid": ad.sigmoid,
    "softplus": ad.softplus,
    "identity": lambda x: x,
}


class Module:
    """Container of named parameters with a train/eval flag."""

    training = True

    def parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for value in vars(self).values():
            if isinstance(value, Parameter):
                out[value.name] = value
            elif isinstance(value, Module):
                out.update(value.parameters())
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        out.update(item.parameters())
                    elif isinstance(item, Parameter):
                        out[item.name] = item
        return out

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for value in vars(self).values():
            if isinstance(value, Module):
                value.train(mode)
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        item.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-trainable state (batch-norm running statistics)."""
        out: dict[str, np.ndarray] = {}
        for value in vars(self).values():
            items = value if isinstance(value, (list, tuple)) else [value]
            for item in items:
                if isinstance(item, BatchNorm):
                    out[f"{item.name}.running_mean"] = item.running_mean
                    out[f"{item.name}.running_var"] = item.running_var
                elif isinstance(item, Module):
                    out.update(item.buffers())
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: p.data.copy() for k, p in self.parameters().items()}
        state.update({k: v.copy() for k, v in self.buffers().items()})
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        params = self.parameters()
        bufs = self.buffers()
        missing = (set(params) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)[:5]}")
        for k, p in params.items():
            p.data = np.array(state[k], dtype=np.float64).reshape(p.data.shape)
        for k, v in bufs.items():
            v[...] = np.asarray(state[k], dtype=np.float64).reshape(v.shape)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, name: str, rng: np.random.Generator,
                 group: str = "shared", modality: int | None = None):
        bound = np.sqrt(6.0 / (n_in + n_out))
        self.weight = Parameter(rng.uniform(-bound, bound, (n_in, n_out)), f"{name}.weight", group, modality)
        self.bias = Parameter(np.zeros(n_out), f"{name}.bias", group, modality)

    def __call__(self, x, params: Mapping[str, Tensor] | None = None) -> Tensor:
        w, b = self.weight, self.bias
        if params is not None:
            w = params.get(w.name, w)
            b = params.get(b.name, b)
        return ad.matmul(x, w) + b


class BatchNorm(Module):
    """Batch normalization over every axis but the last, with running stats."""

    def __init__(self, n: int, name: str, group: str = "shared", modality: int | None = None,
                 momentum: float = 0.1, eps: float = 1e-5):
        self.name = name
        self.gamma = Parameter(np.ones(n), f"{name}.gamma", group, modality)
        self.beta = Parameter(np.zeros(n), f"{name}.beta", group, modality)
        self.running_mean = np.zeros(n)
        self.running_var = np.ones(n)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x, params=None) -> Tensor:
        if self.training:
            out, mu, var = ad.batch_norm(x, self.gamma, self.beta, self.eps)
            m = self.momentum
            self.running_mean *= 1 - m
            self.running_mean += m * mu
            self.running_var *= 1 - m
            self.running_var += m * var
            return out
        inv = 1.0 / np.sqrt(self.running_var + self.eps)
        return (ad.as_tensor(x) - self.running_mean) * (self.gamma * inv) + self.beta


class MLP(Module):
    """Stack of linear layers with an activation after every hidden layer.

    ``dropout`` and ``batch_norm`` are applied to the input, in that order.
    """

    def __init__(self, sizes: list[int], name: str, rng: np.random.Generator, activation: str = "relu",
                 dropout: float = 0.0, batch_norm: bool = False, group: str = "shared",
                 modality: int | None = None, final_activation: bool = False):
        self.layers = [Linear(sizes[i], sizes[i + 1], f"{name}.layer{i}", rng, group, modality)
                       for i in range(len(sizes) - 1)]
        self.norm = BatchNorm(sizes[0], f"{name}.bn", group, modality) if batch_norm else None
        self.activation = activation
        self.dropout = dropout
        self.final_activation = final_activation

    def __call__(self, x, params: Mapping[str, Tensor] | None = None) -> Tensor:
        act = ACTIVATIONS[self.activation]
        if self.dropout:
            x = ad.dropout(x, self.dropout, training=self.training)
        if self.norm is not None:
            x = self.norm(x)
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x, params)
            if i < last or self.final_activation:
                x = act(x)
        return x


class Adam:
    """Adam over a name -> Parameter map, with optional AMSGrad."""

    def __init__(self, params: Mapping[str, Parameter], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, amsgrad: bool = False, clip_norm: float | None = None):
        self.params = dict(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.amsgrad = amsgrad
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.vmax = {k: np.zeros_like(p.data) for k, p in self.params.items()} if amsgrad else None

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        if self.clip_norm is not None:
            total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if total > self.clip_norm:
                grads = {k: g * (self.clip_norm / total) for k, g in grads.items()}
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, g in grads.items():
            p = self.params.get(name)
            if p is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.amsgrad:
                np.maximum(self.vmax[name], v, out=self.vmax[name])
                v = self.vmax[name]
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v, "vmax": self.vmax}


def snapshot(params: Mapping[str, Parameter]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def restore(params: Mapping[str, Parameter], values: Mapping[str, np.ndarray]) -> None:
    for k, v in values.items():
        params[k].data = np.array(v, dtype=np.float64).reshape(params[k].data.shape)


def count(params: Iterable[Parameter]) -> int:
    return int(sum(p.data.size for p in params))
