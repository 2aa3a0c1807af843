"""Model families: VAE (ELBO/IWAE/DReG), HI-VAE and mixture-based multimodal VAEs."""
from __future__ import annotations

from ..data import Schema
from .hivae import HIVAE, NormalizationLayer, gumbel_softmax
from .losses import LOSSES, Objective, gaussian_poe, iw_bound, kl_normal, normal_logpdf, normalized_weights
from .mixture import EXPERT_RULES, MixtureVAE, expert_sets
from .vae import VAE

MODEL_KINDS = ("vae", "hivae", "mvae", "mmvae", "mopoe")


def build_model(kind: str, schema: Schema, **kwargs):
    """Instantiate a model by CLI name; mixture kinds pick the expert rule."""
    if kind == "vae":
        return VAE(schema, **kwargs)
    if kind == "hivae":
        return HIVAE(schema, **kwargs)
    if kind in EXPERT_RULES:
        return MixtureVAE(schema, experts=kind, **kwargs)
    raise ValueError(f"unknown model {kind!r}; expected one of {MODEL_KINDS}")


__all__ = [
    "VAE", "HIVAE", "MixtureVAE", "NormalizationLayer", "Objective", "build_model", "expert_sets",
    "gaussian_poe", "gumbel_softmax", "iw_bound", "kl_normal", "normal_logpdf", "normalized_weights",
    "LOSSES", "MODEL_KINDS", "EXPERT_RULES",
]
