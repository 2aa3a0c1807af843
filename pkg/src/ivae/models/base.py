"""Shared plumbing for the model families."""
from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from .. import likelihoods as lk
from ..data import DataBatch, Schema
from ..impartiality import BlockRegistry
from ..nn import Module


class BaseModel(Module):
    """Model with a schema, a block registry and an ``objective`` method."""

    kind = "base"
    default_loss = "elbo"
    losses: tuple[str, ...] = ()

    def __init__(self, schema: Schema, loss: str | None, K: int, fpsi: str, blocks, beta, seed: int):
        if schema is None or len(schema) == 0:
            raise ValueError("model needs a non-empty schema")
        loss = loss or self.default_loss
        if loss not in self.losses:
            raise ValueError(f"{self.kind} supports losses {self.losses}, got {loss!r}")
        if K < 1:
            raise ValueError("K must be >= 1")
        self.schema = schema
        self.loss = loss
        self.K = int(K)
        self.seed = seed
        self.registry = BlockRegistry(fpsi, blocks, beta, seed)

    @property
    def dims(self) -> dict[str, int]:
        return {m.name: m.dim for m in self.schema}

    def inventory(self) -> list[dict]:
        return self.registry.inventory()

    def config(self) -> dict:
        raise NotImplementedError

    def objective(self, batch: DataBatch, loss: str | None = None, K: int | None = None):
        raise NotImplementedError

    def loglik_terms(self, etas, batch: DataBatch, modalities=None) -> list[ad.Tensor]:
        idx = range(len(self.schema)) if modalities is None else modalities
        return [lk.log_prob(self.schema[d].spec, etas[d], batch.values[d], batch.masks[d]) for d in idx]


def encoder_features(schema: Schema, batch: DataBatch, modalities=None) -> np.ndarray:
    idx = range(len(schema)) if modalities is None else modalities
    parts = [lk.input_features(schema[d].spec, batch.values[d], batch.masks[d]) for d in idx]
    return np.concatenate(parts, axis=-1)


def total(terms):
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out
