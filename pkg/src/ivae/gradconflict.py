"""Conflicting-gradient resolvers.

Every resolver maps a stack of per-head gradients, shape ``(D, l)``, to a
stack of the same shape; callers propagate the sum of the returned rows.
Scale-aware resolvers (gradnorm, mgda_ub, imtl_g, cagrad) change magnitudes,
direction-aware ones (graddrop, pcgrad) edit the rows themselves.  A chain
``"imtl_g+pcgrad"`` applies them left to right.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

KINDS = ("identity", "gradnorm", "mgda_ub", "imtl_g", "cagrad", "graddrop", "pcgrad")
SCALE_AWARE = frozenset({"gradnorm", "mgda_ub", "imtl_g", "cagrad"})
DIRECTION_AWARE = frozenset({"graddrop", "pcgrad"})

ALIASES = {
    "none": "identity", "": "identity", "id": "identity",
    "gn": "gradnorm", "mgda": "mgda_ub", "mgdaub": "mgda_ub", "mgda-ub": "mgda_ub",
    "imtl": "imtl_g", "imtl-g": "imtl_g", "imtlg": "imtl_g", "ca": "cagrad",
    "gd": "graddrop", "pg": "pcgrad",
}

GRADNORM_STEP = 1e-3
CAGRAD_STEPS = 200
CAGRAD_LR = 0.05


class ResolverError(RuntimeError):
    pass


@dataclass
class ResolverConfig:
    kind: str = "identity"
    alpha: float = 0.0
    state: dict = field(default_factory=dict)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def __post_init__(self):
        self.kind = ALIASES.get(self.kind.lower(), self.kind.lower())
        if self.kind not in KINDS:
            raise ValueError(f"unknown resolver {self.kind!r}; expected one of {KINDS}")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")

    def label(self) -> str:
        if self.kind in ("gradnorm", "cagrad"):
            return f"{self.kind}:alpha={self.alpha:g}"
        return self.kind


def _check(stack) -> np.ndarray:
    g = np.asarray(stack, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError(f"gradient stack must be 2-D (heads, coordinates), got shape {g.shape}")
    if g.shape[0] == 0:
        raise ResolverError("gradient stack has no heads")
    if not np.isfinite(g).all():
        raise ResolverError("gradient stack contains non-finite entries")
    return g


def resolve(cfg: ResolverConfig, stack) -> np.ndarray:
    g = _check(stack)
    kind = cfg.kind
    if kind == "identity":
        return stack if isinstance(stack, np.ndarray) else g
    if kind == "mgda_ub":
        return mgda_ub(g)
    if kind == "imtl_g":
        return imtl_g(g)
    if kind == "pcgrad":
        return pcgrad(g, cfg.rng)
    if kind == "graddrop":
        return graddrop(g, cfg.rng)
    if kind == "gradnorm":
        return gradnorm_modified(cfg, g)
    return cagrad(cfg, g)


# ---------------------------------------------------------------------------
# scale-aware


def min_norm_weights(stack, max_iter: int = 2000, tol: float = 1e-12) -> np.ndarray:
    """Convex weights minimizing ``||sum_d w_d g_d||^2`` (Frank-Wolfe with away steps)."""
    g = _check(stack)
    n = g.shape[0]
    gram = g @ g.T
    scale = np.max(np.diag(gram))
    if scale <= 0:
        return np.full(n, 1.0 / n)
    gram = gram / scale
    w = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        grad = gram @ w
        t = int(np.argmin(grad))
        gap = float(w @ grad - grad[t])
        if gap < tol:
            break
        active = np.flatnonzero(w > 0)
        a = active[int(np.argmax(grad[active]))]
        if gap >= float(grad[a] - w @ grad) or w[a] >= 1.0:
            d = -w.copy()
            d[t] += 1.0
            max_step = 1.0
        else:
            d = w.copy()
            d[a] -= 1.0
            max_step = w[a] / (1.0 - w[a])
        curv = float(d @ gram @ d)
        slope = float(grad @ d)
        step = max_step if curv <= 0 else min(max_step, max(0.0, -slope / curv))
        w = w + step * d
        w[w < 1e-15] = 0.0
        w /= w.sum()
    return w


def mgda_ub(stack) -> np.ndarray:
    """Rows ``D * w_d * g_d``: their mean is the min-norm point of the convex hull."""
    g = _check(stack)
    if not np.any(g):
        return np.zeros_like(g)
    w = min_norm_weights(g)
    return (g.shape[0] * w)[:, None] * g


def imtl_weights(stack) -> np.ndarray:
    g = _check(stack)
    n = g.shape[0]
    norms = np.linalg.norm(g, axis=1)
    live = np.flatnonzero(norms > 0)
    alpha = np.zeros(n)
    if live.size == 0:
        return alpha
    if live.size == 1:
        alpha[live] = n
        return alpha
    gl = g[live]
    u = gl / norms[live, None]
    dmat = gl[:1] - gl[1:]
    umat = u[:1] - u[1:]
    system = dmat @ umat.T
    if np.linalg.cond(system) > 1e12:
        raise ResolverError("imtl_g: singular normal system (near-parallel gradients); "
                            "consider mgda_ub or gradnorm instead")
    rest = np.linalg.solve(system.T, (gl[0] @ umat.T))
    a = np.concatenate([[1.0 - rest.sum()], rest])
    alpha[live] = a * n / a.sum()
    return alpha


def imtl_g(stack) -> np.ndarray:
    """Closed-form weights giving the aggregate equal projections on every unit row."""
    g = _check(stack)
    return imtl_weights(g)[:, None] * g


def gradnorm_modified(cfg: ResolverConfig, stack) -> np.ndarray:
    """GradNorm driven by gradient magnitudes instead of task losses.

    State: initial norms ``n0`` (first call) and weights ``w``.  Each call
    moves ``w`` by one signed step toward ``w_d n_d = mean(w n) r_d^alpha`` and
    renormalizes to ``sum(w) = D``.  The target uses the weighted norms so that
    renormalization does not fight it; for ``alpha=0`` the fixed point is
    ``w_d`` proportional to ``1 / n_d``.
    """
    g = _check(stack)
    n_heads = g.shape[0]
    norms = np.linalg.norm(g, axis=1)
    st = cfg.state
    if "n0" not in st or len(st["n0"]) != n_heads:
        st["n0"] = norms.copy()
        st["w"] = np.ones(n_heads)
    n0 = st["n0"]
    w = st["w"]
    ratio = np.ones(n_heads)
    ok = n0 > 0
    ratio[ok] = norms[ok] / n0[ok]
    mean_ratio = ratio.mean()
    rel = ratio / mean_ratio if mean_ratio > 0 else np.ones(n_heads)
    target = np.mean(w * norms) * rel ** cfg.alpha
    w = w - GRADNORM_STEP * np.sign(w * norms - target)
    w = np.maximum(w, 1e-6)
    w = w * (n_heads / w.sum())
    st["w"] = w
    return w[:, None] * g


def _project_simplex(v: np.ndarray) -> np.ndarray:
    n = v.size
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    rho = np.nonzero(u - css / np.arange(1, n + 1) > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def cagrad_direction(stack, c: float) -> np.ndarray:
    g = _check(stack)
    n = g.shape[0]
    g0 = g.mean(axis=0)
    if c == 0:
        return g0
    gram = g @ g.T
    scale = float(np.mean(np.diag(gram)))
    if scale <= 0:
        return g0
    gram = gram / scale
    ones = np.full(n, 1.0 / n)
    gg0 = gram @ ones
    sqrt_phi = c * np.sqrt(max(float(ones @ gg0), 0.0))
    w = np.full(n, 1.0 / n)
    for _ in range(CAGRAD_STEPS):
        gw_norm = np.sqrt(max(float(w @ gram @ w), 1e-20))
        grad = gg0 + sqrt_phi * (gram @ w) / gw_norm
        w = _project_simplex(w - CAGRAD_LR * grad)
    gw = w @ g
    gw_norm = np.linalg.norm(gw)
    if gw_norm == 0:
        return g0
    return g0 + (c * np.linalg.norm(g0) / gw_norm) * gw


def cagrad(cfg: ResolverConfig, stack) -> np.ndarray:
    """``D`` equal rows whose sum is the conflict-averse direction."""
    g = _check(stack)
    d = cagrad_direction(g, cfg.alpha)
    return np.tile(d / g.shape[0], (g.shape[0], 1))


# ---------------------------------------------------------------------------
# direction-aware


def pcgrad(stack, rng: np.random.Generator, return_last: bool = False):
    """Project each row off every conflicting row, visiting the others in random order."""
    g = _check(stack)
    n = g.shape[0]
    sq = np.einsum("ij,ij->i", g, g)
    out = g.copy()
    last = np.full(n, -1)
    for i in range(n):
        gi = out[i]
        others = np.array([j for j in range(n) if j != i], dtype=int)
        for j in rng.permutation(others) if others.size else ():
            if sq[j] == 0:
                continue
            dot = float(gi @ g[j])
            if dot < 0:
                gi -= (dot / sq[j]) * g[j]
                last[i] = j
    return (out, last) if return_last else out


def graddrop(stack, rng: np.random.Generator, u: np.ndarray | None = None) -> np.ndarray:
    """Keep, per coordinate, only entries of one randomly chosen sign.

    The positive sign is chosen with probability equal to the sign-purity
    score ``P = (1 + sum g / sum |g|) / 2`` of that coordinate.
    """
    g = _check(stack)
    total = g.sum(axis=0)
    mag = np.abs(g).sum(axis=0)
    purity = np.full(g.shape[1], 0.5)
    nz = mag > 0
    purity[nz] = 0.5 * (1.0 + total[nz] / mag[nz])
    if u is None:
        u = rng.random(g.shape[1])
    keep_pos = u < purity
    mask = np.where(g > 0, keep_pos[None, :], np.where(g < 0, ~keep_pos[None, :], True))
    return g * mask


# ---------------------------------------------------------------------------
# chains


class Resolver:
    """Stateful resolver chain bound to one block input."""

    def __init__(self, configs: list[ResolverConfig]):
        if not configs:
            configs = [ResolverConfig("identity")]
        self.configs = configs

    @property
    def is_identity(self) -> bool:
        return all(c.kind == "identity" for c in self.configs)

    def __call__(self, stack) -> np.ndarray:
        out = stack
        for cfg in self.configs:
            out = resolve(cfg, out)
        return out

    def label(self) -> str:
        return "+".join(c.label() for c in self.configs)


_TOKEN = re.compile(r"^(?P<kind>[A-Za-z_\-]+)(?::alpha=(?P<alpha>[0-9.eE+\-]+))?$")


def parse_chain(text: str) -> list[tuple[str, float]]:
    """Parse ``"kind[:alpha=a][+kind...]"`` into ``[(kind, alpha), ...]``."""
    out = []
    for token in (text or "identity").split("+"):
        token = token.strip()
        m = _TOKEN.match(token)
        if m is None:
            raise ValueError(f"cannot parse resolver token {token!r}")
        kind = ALIASES.get(m["kind"].lower(), m["kind"].lower())
        if kind not in KINDS:
            raise ValueError(f"unknown resolver {m['kind']!r}")
        out.append((kind, float(m["alpha"]) if m["alpha"] else 0.0))
    return out


def make_resolver(text: str, seed=0) -> Resolver:
    rng = np.random.default_rng(seed)
    return Resolver([ResolverConfig(kind, alpha, rng=rng) for kind, alpha in parse_chain(text)])


def sweep_grid(magnitude=("identity", "gradnorm:alpha=0", "mgda_ub", "imtl_g"),
               direction=("identity", "graddrop", "pcgrad")) -> list[str]:
    """Every magnitude-aware option followed by every direction-aware option."""
    grid = []
    for m in magnitude:
        for d in direction:
            parts = [p for p in (m, d) if p != "identity"]
            grid.append("+".join(parts) if parts else "identity")
    return grid
