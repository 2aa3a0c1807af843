"""HI-VAE: categorical-then-Gaussian hierarchical latent with a Gaussian-mixture prior."""
from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from .. import likelihoods as lk
from ..data import DataBatch, Schema
from ..nn import MLP, Linear
from .base import BaseModel, total
from .losses import Objective, kl_normal

_EPS = 1e-6


class NormalizationLayer:
    """Batch-statistics normalization for real and positive modalities.

    Real data are standardized; positive data are standardized in log space;
    counts enter the encoder as ``log1p``.  Decoder outputs for real and
    positive heads are mapped back with :meth:`denormalize`.
    """

    def __init__(self, schema: Schema):
        self.schema = schema
        self.stats: list[tuple[np.ndarray, np.ndarray] | None] = [None] * len(schema)

    def fit(self, batch: DataBatch) -> "NormalizationLayer":
        for d, m in enumerate(self.schema):
            if m.family not in ("normal", "lognormal"):
                continue
            x, obs = batch.values[d], batch.masks[d]
            z = np.log(np.where(obs, x, 1.0)) if m.family == "lognormal" else x
            n = np.maximum(obs.sum(axis=0), 1)
            mean = (z * obs).sum(axis=0) / n
            var = (((z - mean) ** 2) * obs).sum(axis=0) / n
            self.stats[d] = (mean, np.sqrt(np.maximum(var, _EPS)))
        return self

    def normalize(self, d: int, x: np.ndarray) -> np.ndarray:
        fam = self.schema[d].family
        if fam == "normal":
            mean, std = self.stats[d]
            return (x - mean) / std
        if fam == "lognormal":
            mean, std = self.stats[d]
            return (np.log(x) - mean) / std
        return x

    def denormalize_values(self, d: int, x: np.ndarray) -> np.ndarray:
        fam = self.schema[d].family
        if fam == "normal":
            mean, std = self.stats[d]
            return x * std + mean
        if fam == "lognormal":
            mean, std = self.stats[d]
            return np.exp(x * std + mean)
        return x

    def features(self, batch: DataBatch) -> np.ndarray:
        parts = []
        for d, m in enumerate(self.schema):
            x, obs = batch.values[d], batch.masks[d]
            fam = m.family
            if fam in ("normal", "lognormal"):
                safe = np.where(obs, x, 1.0 if fam == "lognormal" else 0.0)
                parts.append(self.normalize(d, safe) * obs)
            elif fam == "poisson":
                parts.append(np.log1p(np.where(obs, x, 0.0)) * obs)
            else:
                parts.append(lk.input_features(m.spec, x, obs))
        return np.concatenate(parts, axis=-1)

    def denormalize(self, d: int, eta: lk.NaturalParams) -> lk.NaturalParams:
        fam = self.schema[d].family
        if fam not in ("normal", "lognormal"):
            return eta
        mean, std = self.stats[d]
        p = dict(eta.params)
        p["loc"] = p["loc"] * std + mean
        p["var"] = p["var"] * (std * std)
        return lk.NaturalParams(eta.spec, eta.raw, p)


def gumbel_softmax(logits, tau: float, k: int) -> ad.Tensor:
    """Relaxed one-hot samples, shape ``(k, *logits.shape)``; noise from the tape rng."""
    logits = ad.as_tensor(logits)
    u = ad.tape_rng().random((k, *logits.shape))
    g = -np.log(-np.log(np.clip(u, 1e-300, 1.0 - 1e-16)))
    return ad.softmax((ad.log_softmax(logits) + g) * (1.0 / tau))


class HIVAE(BaseModel):
    """Hierarchical VAE with latent ``s`` (categorical) and ``z | s`` (Gaussian).

    Likelihood heads read ``[y, s]`` where ``y`` is the shared decoder output,
    so the LI block has the two shared inputs ``y`` and ``s`` with one
    resolver each.
    """

    kind = "hivae"
    losses = ("elbo",)

    def __init__(self, schema: Schema, d_z: int = 10, d_s: int = 10, hidden: int | None = None,
                 tau: float = 1.0, loss: str = "elbo", K: int = 1, fpsi: str = "identity", blocks="li",
                 beta="dim", seed: int = 0):
        super().__init__(schema, loss, K, fpsi, blocks, beta, seed)
        if d_s < 2:
            raise ValueError("d_s must be >= 2")
        self.d_z, self.d_s, self.tau = d_z, d_s, tau
        self.hidden = hidden or 5 * len(schema)
        rng = np.random.default_rng(seed)
        h = self.hidden
        n_in = sum(m.spec.n_inputs for m in schema)
        self.norm = NormalizationLayer(schema)
        self.enc_s = Linear(n_in, d_s, "encoder.s", rng, "encoder")
        self.enc_z = MLP([n_in + d_s, h, 2 * d_z], "encoder.z", rng, "tanh", group="encoder")
        self.prior_mu = Linear(d_s, d_z, "prior.mu", rng, "shared")
        self.decoder = MLP([d_z, h, h], "decoder", rng, "relu", group="shared", final_activation=True)
        self.heads = [Linear(h + d_s, m.spec.n_columns, f"head.{m.name}", rng, "head", d)
                      for d, m in enumerate(schema)]
        self.registry.declare("li", "li", ["y", "s"], schema.names, self.dims)

    def config(self) -> dict:
        return {"model": "hivae", "d_z": self.d_z, "d_s": self.d_s, "hidden": self.hidden, "tau": self.tau,
                "loss": self.loss, "K": self.K, "seed": self.seed}

    def _posterior(self, batch: DataBatch, K: int, hard: bool = False):
        self.norm.fit(batch)
        x = self.norm.features(batch)
        logits = self.enc_s(x)
        if hard:
            idx = np.argmax(logits.data, axis=-1)
            s = ad.Tensor(np.eye(self.d_s)[idx][None])
        else:
            s = gumbel_softmax(logits, self.tau, K)
        xk = np.broadcast_to(x, (s.shape[0], *x.shape))
        out = self.enc_z(ad.concat([xk, s]))
        mu, sigma = out[..., :self.d_z], ad.softplus(out[..., self.d_z:])
        return logits, s, mu, sigma

    def decode(self, z, s) -> list[lk.NaturalParams]:
        bp = self.registry.mark("li")
        y = self.decoder(z)
        etas = []
        for d, (mod, head) in enumerate(zip(self.schema, self.heads)):
            inp = ad.concat([bp.branch("y", mod.name, y), bp.branch("s", mod.name, s)])
            raw = bp.head_output(mod.name, head(inp))
            etas.append(self.norm.denormalize(d, lk.constrain(mod.spec, raw)))
        return etas

    def objective(self, batch: DataBatch, loss: str | None = None, K: int | None = None) -> Objective:
        K = K or self.K
        logits, s, mu, sigma = self._posterior(batch, K)
        z = ad.reparam_normal(mu, sigma, 1).reshape(mu.shape)
        recon = total(self.loglik_terms(self.decode(z, s), batch)).mean(axis=0)
        logq = ad.log_softmax(logits)
        kl_s = (ad.exp(logq) * logq).sum(axis=-1) + np.log(self.d_s)
        kl_z = kl_normal(mu, sigma, self.prior_mu(s)).mean(axis=0)
        elbo = recon - kl_s - kl_z
        return Objective(-elbo.mean(), elbo.data.copy())

    def encode(self, batch: DataBatch) -> np.ndarray:
        _, _, mu, _ = self._posterior(batch, 1, hard=True)
        return mu.data[0].copy()

    def reconstruct(self, batch: DataBatch) -> list[np.ndarray]:
        _, s, mu, _ = self._posterior(batch, 1, hard=True)
        etas = self.decode(mu, s)
        return [lk.impute(m.spec, e)[0] for m, e in zip(self.schema, etas)]
