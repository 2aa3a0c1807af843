"""Single-encoder VAE for tabular data, trained with ELBO, IWAE or DReG."""
from __future__ import annotations

import math

import numpy as np

from .. import autodiff as ad
from .. import likelihoods as lk
from ..data import DataBatch, Schema
from ..nn import MLP, Linear
from .base import BaseModel, encoder_features, total
from .losses import (Objective, iw_bound, kl_normal, normal_logpdf, normalized_weights,
                     std_normal_logpdf)


class VAE(BaseModel):
    """Encoder ``dropout, BN, 3 x (Linear, tanh), Linear(2l)``; decoder
    ``3 x (Linear, ReLU)`` producing the shared representation ``y``, followed
    by one linear head per modality.  The heads form one LI block on ``y``
    (two for DReG, whose encoder and decoder losses decode separately).
    """

    kind = "vae"
    losses = ("elbo", "iwae", "dreg")

    def __init__(self, schema: Schema, latent_dim: int | None = None, hidden: int = 50, loss: str = "elbo",
                 K: int = 1, fpsi: str = "identity", blocks="li", beta="dim", seed: int = 0,
                 dropout: float = 0.1, batch_norm: bool = True, stl: bool = False):
        super().__init__(schema, loss, K, fpsi, blocks, beta, seed)
        if self.loss == "dreg" and self.K < 2:
            raise ValueError("dreg needs K >= 2")
        self.latent_dim = latent_dim or max(1, math.ceil(schema.n_features / 2))
        self.hidden = hidden
        self.dropout_rate = dropout
        self.use_bn = batch_norm
        self.stl = stl
        rng = np.random.default_rng(seed)
        n_in = sum(m.spec.n_inputs for m in schema)
        h, l = hidden, self.latent_dim
        self.encoder = MLP([n_in, h, h, h, 2 * l], "encoder", rng, "tanh", dropout, batch_norm, "encoder")
        self.decoder = MLP([l, h, h, h], "decoder", rng, "relu", group="shared", final_activation=True)
        self.heads = [Linear(h, m.spec.n_columns, f"head.{m.name}", rng, "head", d)
                      for d, m in enumerate(schema)]
        names = schema.names
        block_ids = ("li.dec", "li.enc") if self.loss == "dreg" else ("li",)
        for b in block_ids:
            self.registry.declare(b, "li", ["y"], names, self.dims)
        self._block_ids = block_ids

    def config(self) -> dict:
        return {"model": "vae", "latent_dim": self.latent_dim, "hidden": self.hidden, "loss": self.loss,
                "K": self.K, "dropout": self.dropout_rate, "batch_norm": self.use_bn, "stl": self.stl,
                "seed": self.seed}

    # ------------------------------------------------------------------
    def posterior(self, batch: DataBatch):
        out = self.encoder(encoder_features(self.schema, batch))
        l = self.latent_dim
        return out[..., :l], ad.softplus(out[..., l:])

    def decode(self, z, block_id: str | None = None, params=None) -> list[lk.NaturalParams]:
        bp = self.registry.mark(block_id or self._block_ids[0])
        y = self.decoder(z, params)
        etas = []
        for mod, head in zip(self.schema, self.heads):
            raw = head(bp.branch("y", mod.name, y), params)
            etas.append(lk.constrain(mod.spec, bp.head_output(mod.name, raw)))
        return etas

    def objective(self, batch: DataBatch, loss: str | None = None, K: int | None = None) -> Objective:
        loss = loss or self.loss
        K = K or self.K
        mu, sigma = self.posterior(batch)
        z = ad.reparam_normal(mu, sigma, K)
        if loss == "dreg":
            return self._dreg(batch, mu, sigma, z)
        recon = total(self.loglik_terms(self.decode(z), batch))
        if loss == "elbo":
            elbo = recon.mean(axis=0) - kl_normal(mu, sigma)
            return Objective(-elbo.mean(), elbo.data.copy())
        if loss != "iwae":
            raise ValueError(f"unknown loss {loss!r}")
        qm, qs = (ad.detach(mu), ad.detach(sigma)) if self.stl else (mu, sigma)
        log_w = recon + std_normal_logpdf(z) - normal_logpdf(z, qm, qs)
        bound = iw_bound(log_w, 0)
        return Objective(-bound.mean(), bound.data.copy())

    def _dreg(self, batch, mu, sigma, z) -> Objective:
        qm, qs = ad.detach(mu), ad.detach(sigma)
        zd = ad.detach(z)
        recon_dec = total(self.loglik_terms(self.decode(zd, "li.dec"), batch))
        lw_dec = recon_dec + std_normal_logpdf(zd) - normal_logpdf(zd, qm, qs)
        frozen = {k: ad.detach(p) for k, p in self.decoder_parameters().items()}
        recon_enc = total(self.loglik_terms(self.decode(z, "li.enc", frozen), batch))
        lw_enc = recon_enc + std_normal_logpdf(z) - normal_logpdf(z, qm, qs)
        w = normalized_weights(lw_dec.data, axis=0)
        dec = (lw_dec * w).sum(axis=0)
        enc = (lw_enc * (w * w)).sum(axis=0)
        bound = iw_bound(lw_dec.data, 0).data
        return Objective(-(dec.mean() + enc.mean()), bound.copy())

    def decoder_parameters(self) -> dict:
        out = self.decoder.parameters()
        for head in self.heads:
            out.update(head.parameters())
        return out

    # ------------------------------------------------------------------
    def encode(self, batch: DataBatch) -> np.ndarray:
        """Posterior means (no tape, eval mode)."""
        mode = self.training
        self.eval()
        mu, _ = self.posterior(batch)
        self.train(mode)
        return mu.data.copy()

    def decode_mode(self, z: np.ndarray) -> list[np.ndarray]:
        mode = self.training
        self.eval()
        etas = self.decode(np.asarray(z, dtype=np.float64))
        self.train(mode)
        return [lk.impute(m.spec, e) for m, e in zip(self.schema, etas)]

    def reconstruct(self, batch: DataBatch) -> list[np.ndarray]:
        """Impute every modality by the modes of q(z|x) and of each likelihood."""
        return self.decode_mode(self.encode(batch))
