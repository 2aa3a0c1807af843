"""Gaussian densities and importance-weighted bounds shared by every model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor

LOG_2PI = float(np.log(2.0 * np.pi))
LOSSES = ("elbo", "iwae", "dreg", "loose", "siwae")


@dataclass
class Objective:
    """Differentiable surrogate plus the per-datum bound it estimates."""

    loss: Tensor
    bound: np.ndarray


def normal_logpdf(z, mu, sigma) -> Tensor:
    """Diagonal Gaussian log density summed over the last axis."""
    z, mu, sigma = ad.as_tensor(z), ad.as_tensor(mu), ad.as_tensor(sigma)
    return (-0.5 * LOG_2PI - ad.log(sigma) - 0.5 * ad.square((z - mu) / sigma)).sum(axis=-1)


def std_normal_logpdf(z) -> Tensor:
    z = ad.as_tensor(z)
    return (-0.5 * LOG_2PI - 0.5 * ad.square(z)).sum(axis=-1)


def kl_normal(mu, sigma, mu0=0.0) -> Tensor:
    """``KL(N(mu, sigma^2) || N(mu0, 1))`` summed over the last axis."""
    mu, sigma = ad.as_tensor(mu), ad.as_tensor(sigma)
    var = ad.square(sigma)
    return (0.5 * (var + ad.square(mu - mu0) - 1.0) - ad.log(sigma)).sum(axis=-1)


def iw_bound(log_w, axis=0) -> Tensor:
    """``log mean exp`` of log-weights over the sample axes."""
    log_w = ad.as_tensor(log_w)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    n = int(np.prod([log_w.shape[a] for a in axes]))
    return ad.logsumexp(log_w, axis=axes) - np.log(n)


def normalized_weights(log_w: np.ndarray, axis: int = 0) -> np.ndarray:
    """Self-normalized importance weights (constants, summing to 1 along ``axis``)."""
    lw = np.asarray(log_w, dtype=np.float64)
    m = lw.max(axis=axis, keepdims=True)
    w = np.exp(lw - m)
    return w / w.sum(axis=axis, keepdims=True)


def gaussian_poe(mus, sigmas, include_prior: bool = False):
    """Product of diagonal Gaussian experts: precisions add, means precision-averaged."""
    precs = [1.0 / ad.square(s) for s in sigmas]
    total = precs[0]
    weighted = mus[0] * precs[0]
    for m, p in zip(mus[1:], precs[1:]):
        total = total + p
        weighted = weighted + m * p
    if include_prior:
        total = total + 1.0
    mu = weighted / total
    sigma = ad.sqrt(1.0 / total)
    return mu, sigma


def stack_last(tensors) -> Tensor:
    """Stack equally shaped tensors along a new last axis."""
    return ad.concat([t.reshape(*t.shape, 1) for t in tensors])
