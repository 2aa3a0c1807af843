"""scikit-learn style wrappers around the models and the training loop."""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import DataBatch, Modality, Preprocessor, Schema, infer_family, split_indices, tabular_schema
from .likelihoods import LikelihoodSpec
from .models import build_model
from .training import TrainConfig, train


class ImpartialVAE(TransformerMixin, BaseEstimator):
    """Tabular VAE (or HI-VAE) with one likelihood per column.

    ``fit`` takes a 2-D numeric array with NaN for missing entries.
    ``transform`` returns posterior means, ``predict`` fills the missing
    entries with the model's imputations on the original scale.
    """

    def __init__(self, model="vae", loss="elbo", fpsi="identity", blocks="li", beta="dim", K=1,
                 epochs=200, batch_size=128, lr=1e-3, amsgrad=False, families=None,
                 validation_fraction=0.1, seed=0, model_params=None):
        self.model = model
        self.loss = loss
        self.fpsi = fpsi
        self.blocks = blocks
        self.beta = beta
        self.K = K
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.amsgrad = amsgrad
        self.families = families
        self.validation_fraction = validation_fraction
        self.seed = seed
        self.model_params = model_params

    def _validate(self, X):
        return check_array(X, dtype=np.float64, ensure_all_finite="allow-nan")

    def fit(self, X, y=None):
        X = self._validate(X)
        if self.families is None:
            inferred = [infer_family(X[~np.isnan(X[:, j]), j]) for j in range(X.shape[1])]
        else:
            if len(self.families) != X.shape[1]:
                raise ValueError(f"{len(self.families)} families for {X.shape[1]} columns")
            inferred = [(f, len(np.unique(X[~np.isnan(X[:, j]), j])) if f == "categorical" else None)
                        for j, f in enumerate(self.families)]
        fams = [f for f, _ in inferred]
        self.schema_ = tabular_schema([f"x{j}" for j in range(X.shape[1])], fams, [c for _, c in inferred])
        val_frac = self.validation_fraction
        idx = split_indices(len(X), self.seed, (1.0 - val_frac, val_frac, 0.0))
        self.preprocessor_ = Preprocessor(fams).fit(X[idx["train"]])
        table = self.preprocessor_.transform(X)
        train_b = DataBatch.from_table(table[idx["train"]])
        val_b = DataBatch.from_table(table[idx["val"]], split="val") if len(idx["val"]) else None
        kw = dict(self.model_params or {})
        kw.update(loss=self.loss, fpsi=self.fpsi, blocks=self.blocks, beta=self.beta, seed=self.seed)
        if self.model != "hivae":
            kw["K"] = self.K
        self.model_ = build_model(self.model, self.schema_, **kw)
        cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, amsgrad=self.amsgrad,
                          seed=self.seed)
        self.train_result_ = train(self.model_, train_b, val_b, cfg)
        self.n_features_in_ = X.shape[1]
        return self

    def _batch(self, X):
        check_is_fitted(self, "model_")
        X = self._validate(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} columns, got {X.shape[1]}")
        return X, DataBatch.from_table(self.preprocessor_.transform(X))

    def transform(self, X):
        _, batch = self._batch(X)
        return self.model_.encode(batch)

    def predict(self, X):
        X, batch = self._batch(X)
        rec = np.concatenate([np.asarray(r).reshape(len(X), -1) for r in self.model_.reconstruct(batch)], axis=1)
        rec = self.preprocessor_.inverse_transform(rec)
        return np.where(np.isnan(X), rec, X)

    def reconstruct(self, X):
        """Model reconstruction of every entry, observed or not, on the original scale."""
        X, batch = self._batch(X)
        rec = np.concatenate([np.asarray(r).reshape(len(X), -1) for r in self.model_.reconstruct(batch)], axis=1)
        return self.preprocessor_.inverse_transform(rec)


class MultimodalVAE(TransformerMixin, BaseEstimator):
    """Mixture-of-experts multimodal VAE over a list of per-modality arrays.

    ``modalities`` is a list of ``{"name", "family", "dim", "classes"}``
    dicts.  ``X`` is a list with one ``(n, dim)`` array per modality; NaN marks
    a missing entry.
    """

    def __init__(self, modalities=(), model="mmvae", loss="siwae", fpsi="identity", blocks="li,eei,dei",
                 beta="one", K=5, latent_dim=10, hidden=64, epochs=50, batch_size=128, lr=1e-3,
                 amsgrad=True, validation_fraction=0.1, seed=0):
        self.modalities = modalities
        self.model = model
        self.loss = loss
        self.fpsi = fpsi
        self.blocks = blocks
        self.beta = beta
        self.K = K
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.amsgrad = amsgrad
        self.validation_fraction = validation_fraction
        self.seed = seed

    def _schema(self) -> Schema:
        if not self.modalities:
            raise ValueError("modalities must be declared")
        return Schema([Modality(m["name"], LikelihoodSpec(m["family"], int(m.get("dim", 1)), m.get("classes")))
                       for m in self.modalities])

    def _to_batch(self, X: Sequence, schema: Schema) -> DataBatch:
        if len(X) != len(schema):
            raise ValueError(f"expected {len(schema)} modality arrays, got {len(X)}")
        vals, masks = [], []
        n = None
        for arr, m in zip(X, schema):
            a = check_array(np.asarray(arr, dtype=np.float64).reshape(len(arr), -1), ensure_all_finite="allow-nan")
            if a.shape[1] != m.dim:
                raise ValueError(f"modality {m.name}: expected {m.dim} columns, got {a.shape[1]}")
            if n is not None and len(a) != n:
                raise ValueError("modalities have different numbers of rows")
            n = len(a)
            mask = ~np.isnan(a)
            vals.append(np.where(mask, a, 0.0))
            masks.append(mask)
        return DataBatch(vals, masks)

    def fit(self, X, y=None):
        schema = self._schema()
        batch = self._to_batch(X, schema)
        if y is not None:
            batch = DataBatch(batch.values, batch.masks, np.asarray(y))
        idx = split_indices(batch.n, self.seed, (1.0 - self.validation_fraction, self.validation_fraction, 0.0))
        self.schema_ = schema
        self.model_ = build_model(self.model, schema, loss=self.loss, fpsi=self.fpsi, blocks=self.blocks,
                                  beta=self.beta, K=self.K, latent_dim=self.latent_dim, hidden=self.hidden,
                                  seed=self.seed)
        val = batch.subset(idx["val"]) if len(idx["val"]) else None
        cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, amsgrad=self.amsgrad,
                          seed=self.seed)
        self.train_result_ = train(self.model_, batch.subset(idx["train"]), val, cfg)
        return self

    def transform(self, X, evidence=None):
        """Posterior means of the expert over ``evidence`` (all modalities by default)."""
        check_is_fitted(self, "model_")
        batch = self._to_batch(X, self.schema_)
        evidence = tuple(range(len(self.schema_))) if evidence is None else tuple(evidence)
        return self.model_.latents(batch, evidence)

    def predict(self, X, evidence=None, target=None):
        """Conditional generation of ``target`` (every modality when None) from ``evidence``."""
        check_is_fitted(self, "model_")
        batch = self._to_batch(X, self.schema_)
        D = len(self.schema_)
        evidence = tuple(range(D)) if evidence is None else tuple(evidence)
        targets = range(D) if target is None else [target]
        out = [self.model_.conditional_generate(batch, evidence, d) for d in targets]
        return out if target is None else out[0]
