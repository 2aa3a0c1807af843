"""Shared test utilities: central finite differences and small fixtures."""
from __future__ import annotations

import numpy as np

from ivae import autodiff as ad


def numeric_grad(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of the scalar ``fn(x)`` over every entry of ``x`` (modified in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = fn()
        x[i] = old - h
        down = fn()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_error(a, b, floor: float = 1e-4) -> float:
    """Elementwise relative error; entries smaller than ``floor`` are compared absolutely.

    Central differences carry roughly 1e-9 of absolute round-off, so a pure
    relative measure is meaningless for gradients near zero.
    """
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def check_param_grads(loss_fn, params: dict, seed: int = 0, h: float = 1e-6) -> float:
    """Max relative error between tape gradients and finite differences.

    ``loss_fn()`` must build the loss under the currently active tape; it is
    called with a fresh tape seeded by ``seed`` each time so stochastic ops
    replay the same noise.
    """
    with ad.Tape(seed=seed) as tape:
        loss = loss_fn()
        grads = tape.backward(loss, params.values())

    def value():
        with ad.Tape(seed=seed):
            return float(loss_fn().data)

    worst = 0.0
    for name, p in params.items():
        num = numeric_grad(value, p.data, h)
        worst = max(worst, rel_error(grads[name], num))
    return worst


def random_mlp_loss(rng, depth=3):
    """(loss closure, params) for a small MLP with random widths and activation."""
    sizes = [int(s) for s in rng.integers(2, 6, depth + 1)]
    params = {}
    for i in range(depth):
        params[f"W{i}"] = ad.Parameter(rng.standard_normal((sizes[i], sizes[i + 1])) / np.sqrt(sizes[i]), f"W{i}")
        params[f"b{i}"] = ad.Parameter(0.1 * rng.standard_normal(sizes[i + 1]), f"b{i}")
    x = rng.standard_normal((4, sizes[0]))
    acts = [ad.tanh, ad.sigmoid, ad.softplus]
    act = acts[int(rng.integers(len(acts)))]

    def loss():
        h = x
        for i in range(depth):
            h = ad.matmul(h, params[f"W{i}"]) + params[f"b{i}"]
            if i < depth - 1:
                h = act(h)
        return ad.logsumexp(h, axis=-1).mean() + ad.square(h).mean()

    return loss, params


def tiny_tabular(n: int = 60, seed: int = 0):
    """(batch, schema, dataset) from a small synthetic mixed-type table."""
    from ivae.data import TabularDataset, synth_hetero
    raw, schema = synth_hetero(seed, n)
    ds = TabularDataset.build(raw, schema, seed)
    return ds.batch("train"), schema, ds


def tiny_trimodal(n: int = 40, seed: int = 0, classes: int = 4):
    from ivae.data import synth_trimodal
    return synth_trimodal(seed, n, classes)


def model_grads(model, batch, seed: int = 0):
    """Loss value and parameter gradients of one deterministic training step."""
    params = model.parameters()
    with ad.Tape(seed=seed) as tape:
        obj = model.objective(batch)
        grads = tape.backward(obj.loss, params.values())
    return float(obj.loss.data), grads
