"""Mixture-of-experts multimodal VAEs (MVAE, MMVAE, MoPoE).

Each expert ``A`` is the Gaussian product of the unimodal posteriors of its
members; the variational posterior is the uniform mixture over experts.
Training uses stratified samples, one set ``Z_A`` per expert.

Blocks declared per model (``2 |experts| + D``):

* ``li:A``   input ``z`` = ``Z_A``, heads = decoders;
* ``eei:A``  input ``z`` = ``Z_A``, heads = the experts' densities in the
  mixture denominator;
* ``dei:d``  input ``theta`` = every parameter of decoder ``d``, heads = strata.
"""
from __future__ import annotations

from itertools import combinations

import numpy as np

from .. import autodiff as ad
from .. import likelihoods as lk
from ..data import DataBatch, Schema
from ..nn import MLP
from .base import BaseModel, encoder_features, total
from .losses import Objective, gaussian_poe, iw_bound, normal_logpdf, stack_last, std_normal_logpdf

EXPERT_RULES = ("mvae", "mmvae", "mopoe")
_SIGMA_FLOOR = 1e-6


def expert_sets(rule: str, n_modalities: int) -> list[tuple[int, ...]]:
    if rule not in EXPERT_RULES:
        raise ValueError(f"unknown expert rule {rule!r}; expected one of {EXPERT_RULES}")
    full = tuple(range(n_modalities))
    if rule == "mvae":
        return [full]
    if rule == "mmvae":
        return [(d,) for d in full]
    return [c for r in range(1, n_modalities + 1) for c in combinations(full, r)]


class MixtureVAE(BaseModel):
    """One encoder/decoder MLP pair per modality, combined through experts.

    ``head_scale="dim"`` multiplies the gradient reaching each decoder output
    by ``1 / dim`` in every run, blocks or not, so unblocked baselines get the
    same per-dimension weighting; block betas then default to 1.
    """

    kind = "mixture"
    losses = ("elbo", "iwae", "loose", "siwae")
    default_loss = "loose"

    def __init__(self, schema: Schema, experts: str = "mmvae", latent_dim: int = 10, hidden: int = 64,
                 loss: str = "loose", K: int = 10, fpsi: str = "identity", blocks="li,eei,dei",
                 beta="one", seed: int = 0, stl: bool = True, include_prior: bool = False,
                 head_scale: str = "dim", expert_list=None):
        super().__init__(schema, loss, K, fpsi, blocks, beta, seed)
        D = len(schema)
        self.rule = experts
        self.experts = [tuple(a) for a in expert_list] if expert_list is not None else expert_sets(experts, D)
        if len(self.experts) > 2 ** D - 1:
            raise ValueError(f"{len(self.experts)} experts exceed the {2 ** D - 1} nonempty subsets")
        for a in self.experts:
            if not a or any(not 0 <= d < D for d in a):
                raise ValueError(f"invalid expert {a}")
        self.latent_dim, self.hidden = latent_dim, hidden
        self.stl, self.include_prior = stl, include_prior
        if head_scale not in ("dim", "none"):
            raise ValueError("head_scale must be 'dim' or 'none'")
        self.head_scale = head_scale
        rng = np.random.default_rng(seed)
        h, l = hidden, latent_dim
        self.encoders = [MLP([m.spec.n_inputs, h, h, 2 * l], f"encoder.{m.name}", rng, "relu",
                             group="encoder", modality=d) for d, m in enumerate(schema)]
        self.decoders = [MLP([l, h, h, m.spec.n_columns], f"decoder.{m.name}", rng, "relu",
                             group="decoder", modality=d) for d, m in enumerate(schema)]
        labels = [self.label(a) for a in self.experts]
        for lab in labels:
            self.registry.declare(f"li:{lab}", "li", ["z"], schema.names, self.dims)
        for lab in labels:
            self.registry.declare(f"eei:{lab}", "eei", ["z"], labels)
        for m in schema:
            self.registry.declare(f"dei:{m.name}", "dei", ["theta"], labels)

    def label(self, expert) -> str:
        return "+".join(self.schema[d].name for d in expert)

    def config(self) -> dict:
        return {"model": self.rule, "latent_dim": self.latent_dim, "hidden": self.hidden, "loss": self.loss,
                "K": self.K, "stl": self.stl, "include_prior": self.include_prior,
                "head_scale": self.head_scale, "seed": self.seed}

    # ------------------------------------------------------------------
    def unimodal(self, batch: DataBatch, d: int):
        out = self.encoders[d](encoder_features(self.schema, batch, [d]))
        l = self.latent_dim
        return out[..., :l], ad.softplus(out[..., l:]) + _SIGMA_FLOOR

    def expert_posteriors(self, batch: DataBatch, experts=None):
        experts = self.experts if experts is None else experts
        needed = sorted({d for a in experts for d in a})
        uni = {d: self.unimodal(batch, d) for d in needed}
        post = []
        for a in experts:
            if len(a) == 1 and not self.include_prior:
                post.append(uni[a[0]])
            else:
                post.append(gaussian_poe([uni[d][0] for d in a], [uni[d][1] for d in a], self.include_prior))
        return post

    def mixture_log_density(self, z, post, block_pass=None) -> ad.Tensor:
        """``log (1/|experts|) sum_A q_A(z)`` with STL-detached expert parameters."""
        terms = []
        for a, (mu, sigma) in zip(self.experts, post):
            if self.stl:
                mu, sigma = ad.detach(mu), ad.detach(sigma)
            lab = self.label(a)
            zv = block_pass.branch("z", lab, z) if block_pass is not None else z
            lq = normal_logpdf(zv, mu, sigma)
            terms.append(block_pass.head_output(lab, lq) if block_pass is not None else lq)
        if len(terms) == 1:
            return terms[0]
        return ad.logsumexp(stack_last(terms), axis=-1) - np.log(len(terms))

    def log_weights(self, batch: DataBatch, K: int) -> list[ad.Tensor]:
        """Per-stratum ``log p(X, Z_A) - log q(Z_A | X)``, each of shape ``(K, batch)``."""
        post = self.expert_posteriors(batch)
        reg = self.registry
        dei = [reg.mark(f"dei:{m.name}") for m in self.schema]
        dec_params = [dec.parameters() for dec in self.decoders]
        out = []
        for a, (mu, sigma) in zip(self.experts, post):
            lab = self.label(a)
            z = ad.reparam_normal(mu, sigma, K)
            li = reg.mark(f"li:{lab}")
            terms = []
            for d, (m, dec) in enumerate(zip(self.schema, self.decoders)):
                params = dei[d].branch("theta", lab, dec_params[d])
                raw = dec(li.branch("z", m.name, z), params)
                raw = dei[d].head_output(lab, li.head_output(m.name, raw))
                if self.head_scale == "dim" and m.dim != 1:
                    raw = ad.scale_grad(raw, 1.0 / m.dim)
                eta = lk.constrain(m.spec, raw)
                terms.append(lk.log_prob(m.spec, eta, batch.values[d], batch.masks[d]))
            log_q = self.mixture_log_density(z, post, reg.mark(f"eei:{lab}"))
            out.append(total(terms) + std_normal_logpdf(z) - log_q)
        return out

    def objective(self, batch: DataBatch, loss: str | None = None, K: int | None = None) -> Objective:
        loss = loss or self.loss
        K = K or self.K
        lws = self.log_weights(batch, K)
        if loss in ("loose", "iwae"):
            per = [iw_bound(lw, 0) for lw in lws]
            bound = total(per) * (1.0 / len(per))
        elif loss == "siwae":
            bound = iw_bound(stack_last(lws), (0, 2))
        elif loss == "elbo":
            bound = total([lw.mean(axis=0) for lw in lws]) * (1.0 / len(lws))
        else:
            raise ValueError(f"unknown loss {loss!r}")
        return Objective(-bound.mean(), bound.data.copy())

    # ------------------------------------------------------------------
    def latents(self, batch: DataBatch, expert, rng: np.random.Generator | None = None) -> np.ndarray:
        """Samples (or means when ``rng`` is None) of ``Z ~ q_A(Z | X_A)``, eval mode, no tape."""
        (mu, sigma), = self.expert_posteriors(batch, [tuple(expert)])
        if rng is None:
            return mu.data.copy()
        return mu.data + sigma.data * rng.standard_normal(mu.shape)

    def decode(self, z: np.ndarray, d: int) -> lk.NaturalParams:
        return lk.constrain(self.schema[d].spec, self.decoders[d](np.asarray(z, dtype=np.float64)))

    def conditional_generate(self, batch: DataBatch, evidence, target: int,
                             rng: np.random.Generator | None = None, sample: bool = False) -> np.ndarray:
        """Impute modality ``target`` from ``Z ~ q_A`` with ``A = evidence``.

        ``rng`` draws the latent sample (posterior mean when None); ``sample``
        draws from the likelihood instead of taking its mode.
        """
        z = self.latents(batch, evidence, rng)
        eta = self.decode(z, target)
        spec = self.schema[target].spec
        if sample:
            return lk.sample(spec, eta, rng if rng is not None else np.random.default_rng(0))
        return lk.impute(spec, eta)

    def reconstruct(self, batch: DataBatch) -> list[np.ndarray]:
        full = tuple(range(len(self.schema)))
        return [self.conditional_generate(batch, full, d) for d in range(len(self.schema))]
