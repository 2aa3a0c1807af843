"""Datasets: schema, likelihood inference, preprocessing, generators, post-hoc GMM."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.special import logsumexp as np_logsumexp
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .likelihoods import FAMILIES, LikelihoodSpec

log = logging.getLogger(__name__)

CATEGORICAL_MAX_LEVELS = 20
SPLIT_FRACTIONS = (0.7, 0.1, 0.2)
POSITIVE_FLOOR = 1e-20


# ---------------------------------------------------------------------------
# schema


@dataclass(frozen=True)
class Modality:
    name: str
    spec: LikelihoodSpec

    @property
    def family(self) -> str:
        return self.spec.family

    @property
    def dim(self) -> int:
        return self.spec.dim


@dataclass
class Schema:
    modalities: list[Modality]

    def __post_init__(self):
        if not self.modalities:
            raise ValueError("schema has no modalities")
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate modality names in {names}")

    def __len__(self) -> int:
        return len(self.modalities)

    def __iter__(self):
        return iter(self.modalities)

    def __getitem__(self, i) -> Modality:
        return self.modalities[i]

    @property
    def names(self) -> list[str]:
        return [m.name for m in self.modalities]

    @property
    def specs(self) -> list[LikelihoodSpec]:
        return [m.spec for m in self.modalities]

    @property
    def n_features(self) -> int:
        return sum(m.dim for m in self.modalities)

    def to_dict(self) -> dict:
        return {"modalities": [
            {"name": m.name, "family": m.family, "dim": m.dim,
             **({"classes": m.spec.classes} if m.spec.classes else {}),
             **({"scale": m.spec.scale} if m.family == "laplace" else {})}
            for m in self.modalities]}

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        mods = []
        for item in d["modalities"]:
            spec = LikelihoodSpec(item["family"], int(item.get("dim", 1)), item.get("classes"),
                                  float(item.get("scale", 0.75)))
            mods.append(Modality(item["name"], spec))
        return cls(mods)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def tabular_schema(names: Sequence[str], families: Sequence[str], classes: Sequence[int | None]) -> Schema:
    return Schema([Modality(n, LikelihoodSpec(f, 1, c)) for n, f, c in zip(names, families, classes)])


# ---------------------------------------------------------------------------
# batches


@dataclass
class DataBatch:
    """Per-modality values ``(n, dim)`` with boolean observation masks."""

    values: list[np.ndarray]
    masks: list[np.ndarray]
    labels: np.ndarray | None = None
    split: str = "train"

    def __post_init__(self):
        for v, m in zip(self.values, self.masks):
            if v.shape != m.shape:
                raise ValueError(f"value shape {v.shape} and mask shape {m.shape} differ")
            if np.isnan(v[m]).any():
                raise ValueError("observed entries contain NaN")

    @property
    def n(self) -> int:
        return self.values[0].shape[0]

    def subset(self, idx) -> "DataBatch":
        return DataBatch([v[idx] for v in self.values], [m[idx] for m in self.masks],
                         None if self.labels is None else self.labels[idx], self.split)

    def batches(self, size: int, rng: np.random.Generator | None = None) -> Iterator["DataBatch"]:
        order = rng.permutation(self.n) if rng is not None else np.arange(self.n)
        for start in range(0, self.n, size):
            yield self.subset(order[start:start + size])

    @classmethod
    def from_table(cls, table: np.ndarray, labels=None, split: str = "train") -> "DataBatch":
        """One single-column modality per table column; NaN marks missing."""
        table = np.asarray(table, dtype=np.float64)
        masks = ~np.isnan(table)
        vals = np.where(masks, table, 0.0)
        return cls([vals[:, [j]] for j in range(table.shape[1])],
                   [masks[:, [j]] for j in range(table.shape[1])], labels, split)

    def to_table(self) -> np.ndarray:
        cols = [np.where(m, v, np.nan) for v, m in zip(self.values, self.masks)]
        return np.concatenate(cols, axis=1)


# ---------------------------------------------------------------------------
# likelihood inference


def infer_family(values) -> tuple[str, int | None]:
    """Pick a likelihood for one column; returns ``(family, classes)``.

    Rules, first match wins: two distinct values -> bernoulli; at most 20
    distinct non-negative integers -> categorical; other non-negative
    integers -> poisson; strictly positive reals -> lognormal; else normal.
    """
    x = np.asarray(values)
    if x.dtype.kind not in "biuf":
        raise TypeError("non-numeric column; declare it categorical in the schema sidecar")
    x = x.astype(np.float64)
    x = x[~np.isnan(x)]
    if x.size == 0:
        raise ValueError("cannot infer a family from an empty column")
    levels = np.unique(x)
    if levels.size == 2:
        return "bernoulli", None
    integer = bool(np.all(x == np.round(x)))
    if integer and x.min() >= 0:
        if levels.size <= CATEGORICAL_MAX_LEVELS:
            return "categorical", int(levels.size)
        return "poisson", None
    if x.min() > 0:
        return "lognormal", None
    return "normal", None


# ---------------------------------------------------------------------------
# preprocessing


class Preprocessor(TransformerMixin, BaseEstimator):
    """Per-column transforms for single-column tabular modalities.

    normal: standardized.  lognormal: divided by the log-space std, so the
    log of the result has unit std.  poisson: shifted so the train minimum is
    0 (smaller values are clipped).  categorical/bernoulli: re-indexed from 0
    by the sorted train levels; unseen levels become missing.
    """

    def __init__(self, families: Sequence[str] = ()):
        self.families = families

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != len(self.families):
            raise ValueError(f"expected {len(self.families)} columns, got shape {X.shape}")
        self.stats_ = []
        for j, fam in enumerate(self.families):
            col = X[:, j]
            col = col[~np.isnan(col)]
            st: dict = {}
            if fam == "normal":
                st["mean"] = float(col.mean())
                std = float(col.std())
                if std == 0:
                    warnings.warn(f"column {j} has zero std; left unscaled", RuntimeWarning)
                    std = 1.0
                st["std"] = std
            elif fam == "lognormal":
                st["floor"] = POSITIVE_FLOOR if col.min() <= 0 else 0.0
                std = float(np.log(col + st["floor"]).std())
                if std == 0:
                    warnings.warn(f"column {j} has zero log-space std; left unscaled", RuntimeWarning)
                    std = 1.0
                st["log_std"] = std
            elif fam == "poisson":
                st["shift"] = float(col.min())
            elif fam in ("categorical", "bernoulli"):
                st["levels"] = np.unique(col).tolist()
            self.stats_.append(st)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        X = np.array(X, dtype=np.float64, copy=True)
        for j, (fam, st) in enumerate(zip(self.families, self.stats_)):
            col = X[:, j]
            obs = ~np.isnan(col)
            if fam == "normal":
                col[obs] = (col[obs] - st["mean"]) / st["std"]
            elif fam == "lognormal":
                col[obs] = np.exp(np.log(col[obs] + st["floor"]) / st["log_std"])
            elif fam == "poisson":
                col[obs] = np.maximum(col[obs] - st["shift"], 0.0)
            elif fam in ("categorical", "bernoulli"):
                levels = np.asarray(st["levels"])
                pos = np.searchsorted(levels, col[obs])
                pos = np.minimum(pos, len(levels) - 1)
                known = levels[pos] == col[obs]
                if not known.all():
                    warnings.warn(f"column {j}: {int((~known).sum())} unseen levels treated as missing",
                                  RuntimeWarning)
                col[obs] = np.where(known, pos, np.nan)
        return X

    def inverse_transform(self, X):
        check_is_fitted(self, "stats_")
        X = np.array(X, dtype=np.float64, copy=True)
        for j, (fam, st) in enumerate(zip(self.families, self.stats_)):
            col = X[:, j]
            obs = ~np.isnan(col)
            if fam == "normal":
                col[obs] = col[obs] * st["std"] + st["mean"]
            elif fam == "lognormal":
                # an underflowed mode of 0 maps back to 0
                with np.errstate(divide="ignore"):
                    col[obs] = np.exp(np.log(col[obs]) * st["log_std"]) - st["floor"]
            elif fam == "poisson":
                col[obs] = col[obs] + st["shift"]
            elif fam in ("categorical", "bernoulli"):
                levels = np.asarray(st["levels"])
                col[obs] = levels[np.clip(col[obs].astype(int), 0, len(levels) - 1)]
        return X


def split_indices(n: int, seed: int = 0, fractions=SPLIT_FRACTIONS) -> dict[str, np.ndarray]:
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return {"train": np.sort(order[:n_train]), "val": np.sort(order[n_train:n_train + n_val]),
            "test": np.sort(order[n_train + n_val:])}


def save_splits(splits: dict[str, np.ndarray], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, idx in splits.items():
        np.savetxt(out / f"split_{name}.txt", idx, fmt="%d")


@dataclass
class TabularDataset:
    """Raw table plus schema, splits, and a preprocessor fitted on train."""

    raw: np.ndarray
    schema: Schema
    splits: dict[str, np.ndarray]
    preprocessor: Preprocessor
    labels: np.ndarray | None = None

    @classmethod
    def build(cls, raw, schema: Schema, seed: int = 0, labels=None) -> "TabularDataset":
        raw = np.asarray(raw, dtype=np.float64)
        splits = split_indices(raw.shape[0], seed)
        pre = Preprocessor([m.family for m in schema]).fit(raw[splits["train"]])
        return cls(raw, schema, splits, pre, labels)

    def batch(self, split: str) -> DataBatch:
        idx = self.splits[split]
        lab = None if self.labels is None else self.labels[idx]
        return DataBatch.from_table(self.preprocessor.transform(self.raw[idx]), lab, split)


# ---------------------------------------------------------------------------
# CSV ingestion


def bundled_dataset(name: str) -> Path:
    """Path of a CSV shipped with the package (``hetero_small`` or ``survey_small``)."""
    path = Path(__file__).with_name("datasets") / f"{name}.csv"
    if not path.exists():
        raise FileNotFoundError(f"no bundled dataset {name!r}")
    return path


def load_csv(path, schema_path=None) -> tuple[np.ndarray, Schema]:
    """Read a headed CSV; families come from the sidecar or are inferred.

    Sidecar: JSON list of ``{name, family, classes?, missing_token?}``.  String
    columns are allowed only when the sidecar declares them categorical or
    bernoulli; their sorted distinct strings become codes.
    """
    path = Path(path)
    side = {}
    if schema_path is None and path.with_suffix(".json").exists():
        schema_path = path.with_suffix(".json")
    if schema_path is not None:
        side = {item["name"]: item for item in json.loads(Path(schema_path).read_text())}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    cols = list(zip(*rows)) if rows else [() for _ in header]
    table = np.full((len(rows), len(header)), np.nan)
    families, classes = [], []
    for j, name in enumerate(header):
        info = side.get(name, {})
        missing = {"", "NA", "NaN", "nan", "?", info.get("missing_token", "")}
        raw = [v.strip() for v in cols[j]]
        present = [v for v in raw if v not in missing]
        try:
            numeric = np.array([float(v) if v not in missing else np.nan for v in raw])
            is_numeric = True
        except ValueError:
            is_numeric = False
        fam = info.get("family")
        if not is_numeric:
            if fam not in ("categorical", "bernoulli"):
                raise TypeError(f"column {name!r} is non-numeric; declare it categorical in the sidecar")
            vocab = sorted(set(present))
            code = {v: i for i, v in enumerate(vocab)}
            numeric = np.array([code[v] if v not in missing else np.nan for v in raw], dtype=np.float64)
        if fam is None:
            fam, ncls = infer_family(numeric)
        else:
            if fam not in FAMILIES:
                raise ValueError(f"column {name!r}: unknown family {fam!r}")
            ncls = info.get("classes")
            if fam == "categorical" and ncls is None:
                ncls = int(np.unique(numeric[~np.isnan(numeric)]).size)
        table[:, j] = numeric
        families.append(fam)
        classes.append(ncls)
    return table, tabular_schema(header, families, classes)


# ---------------------------------------------------------------------------
# synthetic generators


DEFAULT_HETERO_SPEC = (
    {"name": "real_a", "family": "normal", "loc": 2.0, "scale": 1.5, "noise": 0.5},
    {"name": "real_b", "family": "normal", "loc": -1.0, "scale": 0.8, "noise": 0.3},
    {"name": "positive", "family": "lognormal", "loc": 0.5, "scale": 0.4, "noise": 0.3},
    {"name": "count", "family": "poisson", "low": 20.0, "high": 80.0},
    {"name": "cat_a", "family": "categorical", "classes": 4, "sharpness": 3.0},
    {"name": "cat_b", "family": "categorical", "classes": 4, "sharpness": 3.0},
)


def synth_hetero(seed: int = 0, n: int = 5000, spec: Sequence[dict] = DEFAULT_HETERO_SPEC,
                 latent_dim: int = 2) -> tuple[np.ndarray, Schema]:
    """Mixed-type table whose columns all load on one shared latent factor.

    Returns the raw table (categorical columns as codes) and its schema.
    """
    rng = np.random.default_rng(seed)
    load_rng = np.random.default_rng([seed, 1])
    u = rng.standard_normal((n, latent_dim))
    cols, names, fams, classes = [], [], [], []
    for col in spec:
        fam = col["family"]
        if fam == "categorical":
            k = int(col["classes"])
            w = load_rng.standard_normal((latent_dim, k))
            logits = col.get("sharpness", 3.0) * (u @ w)
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            v = (p.cumsum(axis=1) < rng.random((n, 1))).sum(axis=1).astype(np.float64)
            v = np.minimum(v, k - 1)
        else:
            w = load_rng.standard_normal(latent_dim)
            w /= np.linalg.norm(w)
            a = u @ w
            if fam == "normal":
                v = col["loc"] + col["scale"] * a + col["noise"] * rng.standard_normal(n)
            elif fam == "lognormal":
                v = np.exp(col["loc"] + col["scale"] * a + col["noise"] * rng.standard_normal(n))
            elif fam == "poisson":
                lam = col["low"] + (col["high"] - col["low"]) / (1.0 + np.exp(-a))
                v = rng.poisson(lam).astype(np.float64)
            elif fam == "bernoulli":
                v = (rng.random(n) < 1.0 / (1.0 + np.exp(-2.0 * a))).astype(np.float64)
            else:
                raise ValueError(f"synth_hetero cannot generate family {fam!r}")
            k = None
        cols.append(v)
        names.append(col["name"])
        fams.append(fam)
        classes.append(k if fam == "categorical" else None)
    table = np.stack(cols, axis=1) if n else np.zeros((0, len(spec)))
    return table, tabular_schema(names, fams, classes)


def poisson_rate_mean(spec: Sequence[dict] = DEFAULT_HETERO_SPEC, latent_dim: int = 2, seed: int = 0,
                      n_mc: int = 200_000) -> float:
    """Monte-Carlo mean of the Poisson column's rate, for generator self-checks."""
    col = next(c for c in spec if c["family"] == "poisson")
    a = np.random.default_rng(seed).standard_normal(n_mc)
    return float(np.mean(col["low"] + (col["high"] - col["low"]) / (1.0 + np.exp(-a))))


def trimodal_schema(classes: int = 10) -> Schema:
    return Schema([
        Modality("M", LikelihoodSpec("laplace", 16)),
        Modality("S", LikelihoodSpec("laplace", 64)),
        Modality("T", LikelihoodSpec("categorical", 1, classes)),
    ])


def synth_trimodal(seed: int = 0, n: int = 5000, classes: int = 10,
                   label_noise: float = 0.05) -> tuple[DataBatch, Schema]:
    """Three views of a shared class label.

    M: 16-d Gaussian around a class prototype (sd 0.5).  S: 64-d Gaussian
    around a weaker random class projection (sd 1.0).  T: the label itself,
    replaced by a different class with probability ``label_noise``.
    Prototypes depend only on ``classes``, so every seed shares them.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    proto_rng = np.random.default_rng([classes, 7])
    proto_m = proto_rng.standard_normal((classes, 16))
    proto_s = 0.5 * proto_rng.standard_normal((classes, 64))
    rng = np.random.default_rng(seed)
    c = rng.integers(0, classes, n)
    m = proto_m[c] + 0.5 * rng.standard_normal((n, 16))
    s = proto_s[c] + 1.0 * rng.standard_normal((n, 64))
    flip = rng.random(n) < label_noise
    other = (c + rng.integers(1, classes, n)) % classes
    t = np.where(flip, other, c).astype(np.float64)[:, None]
    vals = [m, s, t]
    batch = DataBatch(vals, [np.ones(v.shape, bool) for v in vals], c.astype(np.int64))
    return batch, trimodal_schema(classes)


# ---------------------------------------------------------------------------
# post-hoc GMM


@dataclass
class GMM:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihoods: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.weights.size

    def log_prob(self, x: np.ndarray) -> np.ndarray:
        return np_logsumexp(self._component_logpdf(x) + np.log(self.weights), axis=1)

    def _component_logpdf(self, x):
        diff = x[:, None, :] - self.means[None]
        return -0.5 * (np.sum(np.log(2 * np.pi * self.variances), axis=1)[None]
                       + np.sum(diff ** 2 / self.variances[None], axis=2))


VARIANCE_FLOOR = 1e-8


def default_components(n: int) -> int:
    return max(1, min(100, n // 50))


def fit_gmm(latents, k: int, rng: np.random.Generator | int | None = 0, max_iter: int = 200,
            tol: float = 1e-6) -> GMM:
    """Diagonal-covariance EM with k-means++ seeding."""
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("fit_gmm needs a non-empty (n, dim) array of latents")
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    n, dim = x.shape
    k = min(k, n)
    centers = [x[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(((x[:, None, :] - np.asarray(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(x[idx])
    gmm = GMM(np.full(k, 1.0 / k), np.array(centers), np.tile(np.maximum(x.var(axis=0), VARIANCE_FLOOR), (k, 1)))
    prev = -np.inf
    for _ in range(max_iter):
        logp = gmm._component_logpdf(x) + np.log(gmm.weights)
        ll_rows = np_logsumexp(logp, axis=1)
        ll = float(ll_rows.mean())
        gmm.log_likelihoods.append(ll)
        resp = np.exp(logp - ll_rows[:, None])
        nk = resp.sum(axis=0) + 1e-300
        gmm.weights = nk / n
        gmm.means = (resp.T @ x) / nk[:, None]
        gmm.variances = np.maximum((resp.T @ (x * x)) / nk[:, None] - gmm.means ** 2, VARIANCE_FLOOR)
        if abs(ll - prev) < tol:
            break
        prev = ll
    return gmm


def sample_gmm(gmm: GMM, n: int, rng: np.random.Generator | int | None = 0) -> np.ndarray:
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    comp = rng.choice(gmm.k, size=n, p=gmm.weights)
    return gmm.means[comp] + np.sqrt(gmm.variances[comp]) * rng.standard_normal((n, gmm.means.shape[1]))
