"""Reconstruction metrics, coherence, latent probes and the corrected t-test."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .data import DataBatch, Schema


# ---------------------------------------------------------------------------
# reconstruction errors


def nrmse(x, x_hat, mask=None) -> float:
    """``||x - x_hat||_2 / (N * (max(x) - min(x)))`` over observed entries."""
    x = np.asarray(x, dtype=np.float64).ravel()
    x_hat = np.asarray(x_hat, dtype=np.float64).ravel()
    if mask is not None:
        keep = np.asarray(mask, bool).ravel()
        x, x_hat = x[keep], x_hat[keep]
    if x.size == 0:
        raise ValueError("nrmse needs at least one observed value")
    rng = x.max() - x.min()
    if rng == 0:
        raise ValueError("nrmse undefined for a constant column; use error_rate or mean absolute error")
    return float(np.linalg.norm(x - x_hat) / (x.size * rng))


def error_rate(x, x_hat, mask=None) -> float:
    x = np.asarray(x).ravel()
    x_hat = np.asarray(x_hat).ravel()
    if mask is not None:
        keep = np.asarray(mask, bool).ravel()
        x, x_hat = x[keep], x_hat[keep]
    if x.size == 0:
        raise ValueError("error_rate needs at least one observed value")
    return float(np.mean(x != x_hat))


def aggregate_error(errors: Sequence[float]) -> float:
    return float(np.mean(errors))


def reconstruction_errors(schema: Schema, truth: DataBatch, recon: Sequence[np.ndarray],
                          preprocessor=None) -> dict[str, float]:
    """Per-modality error; numerical columns are compared on the original scale."""
    true_tab = [v for v in truth.values]
    rec_tab = [np.asarray(r, dtype=np.float64).reshape(v.shape) for r, v in zip(recon, truth.values)]
    if preprocessor is not None:
        t = preprocessor.inverse_transform(np.concatenate(true_tab, axis=1))
        r = preprocessor.inverse_transform(np.concatenate(rec_tab, axis=1))
        true_tab = [t[:, [j]] for j in range(t.shape[1])]
        rec_tab = [r[:, [j]] for j in range(r.shape[1])]
    out = {}
    for m, x, xh, mask in zip(schema, true_tab, rec_tab, truth.masks):
        if m.spec.nominal:
            out[m.name] = error_rate(x, xh, mask)
        else:
            out[m.name] = nrmse(x, xh, mask)
    return out


# ---------------------------------------------------------------------------
# probes


class LogisticProbe:
    """Multinomial logistic regression fitted by full-batch gradient descent.

    Inputs are standardized with training statistics; weights start at zero
    so the fit is deterministic.
    """

    def __init__(self, classes: int, epochs: int = 200, lr: float = 1.0, l2: float = 1e-4):
        self.classes = classes
        self.epochs = epochs
        self.lr = lr
        self.l2 = l2
        self.W = None

    def _prep(self, x):
        x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        return (x - self.mean_) / self.std_

    def fit(self, x, y) -> "LogisticProbe":
        x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        y = np.asarray(y, dtype=np.int64)
        self.mean_ = x.mean(axis=0)
        self.std_ = np.where(x.std(axis=0) > 0, x.std(axis=0), 1.0)
        xs = self._prep(x)
        n, p = xs.shape
        onehot = np.eye(self.classes)[y]
        W = np.zeros((p, self.classes))
        b = np.zeros(self.classes)
        for _ in range(self.epochs):
            logits = xs @ W + b
            logits -= logits.max(axis=1, keepdims=True)
            prob = np.exp(logits)
            prob /= prob.sum(axis=1, keepdims=True)
            diff = (prob - onehot) / n
            W -= self.lr * (xs.T @ diff + self.l2 * W)
            b -= self.lr * diff.sum(axis=0)
        self.W, self.b = W, b
        return self

    def predict(self, x) -> np.ndarray:
        if self.W is None:
            raise RuntimeError("probe is not trained")
        return np.argmax(self._prep(x) @ self.W + self.b, axis=1)

    def score(self, x, y) -> float:
        return float(np.mean(self.predict(x) == np.asarray(y)))

    def state(self) -> dict:
        return {"W": self.W, "b": self.b, "mean": self.mean_, "std": self.std_}

    @classmethod
    def from_state(cls, classes: int, state: dict) -> "LogisticProbe":
        p = cls(classes)
        p.W, p.b, p.mean_, p.std_ = (np.asarray(state[k]) for k in ("W", "b", "mean", "std"))
        return p


def modality_probe_input(schema: Schema, d: int, x: np.ndarray) -> np.ndarray:
    spec = schema[d].spec
    x = np.asarray(x, dtype=np.float64)
    if spec.family == "categorical":
        return np.eye(spec.classes)[np.clip(x.astype(int), 0, spec.classes - 1)].reshape(len(x), -1)
    return x.reshape(len(x), -1)


def train_probes(schema: Schema, batch: DataBatch, classes: int, epochs: int = 200) -> list[LogisticProbe]:
    """One probe per modality, trained on clean data to predict the label."""
    if batch.labels is None:
        raise ValueError("probe training needs labels")
    return [LogisticProbe(classes, epochs).fit(modality_probe_input(schema, d, batch.values[d]), batch.labels)
            for d in range(len(schema))]


# ---------------------------------------------------------------------------
# coherence and latent classification


@dataclass
class CoherenceTable:
    rows: list[dict] = field(default_factory=list)

    def value(self, evidence: str, target: str) -> float:
        for r in self.rows:
            if r["evidence"] == evidence and r["target"] == target:
                return r["accuracy"]
        raise KeyError((evidence, target))

    def summary(self) -> dict[str, float]:
        out = {}
        for kind in ("self", "cross", "reconstruction"):
            vals = [r["accuracy"] for r in self.rows if r["kind"] == kind]
            if vals:
                out[kind] = float(np.mean(vals))
        return out


def coherence(model, batch: DataBatch, probes: Sequence[LogisticProbe], seed: int = 0) -> CoherenceTable:
    """Probe accuracy of conditionally generated modalities.

    Rows cover every expert of the model plus the all-modality evidence set.
    Kinds: ``self`` (evidence is exactly the target), ``cross`` (target not in
    evidence), ``reconstruction`` (evidence is every modality), ``other``.
    """
    if batch.labels is None:
        raise ValueError("coherence needs labels")
    if any(p.W is None for p in probes):
        raise RuntimeError("coherence needs trained probes")
    schema = model.schema
    D = len(schema)
    full = tuple(range(D))
    sets = list(dict.fromkeys([tuple(a) for a in model.experts] + [full]))
    table = CoherenceTable()
    for i, a in enumerate(sets):
        rng = np.random.default_rng([seed, i])
        for d in range(D):
            gen = model.conditional_generate(batch, a, d, rng)
            acc = probes[d].score(modality_probe_input(schema, d, gen), batch.labels)
            if a == full:
                kind = "reconstruction"
            elif a == (d,):
                kind = "self"
            elif d not in a:
                kind = "cross"
            else:
                kind = "other"
            table.rows.append({"evidence": model.label(a), "target": schema[d].name, "kind": kind,
                               "accuracy": acc})
    return table


def latent_classification(model, train: DataBatch, test: DataBatch, classes: int, seed: int = 0,
                          epochs: int = 200) -> dict:
    """Linear probes on latent samples, one per expert.

    Returns ``{"table": {(train_expert, eval_expert): acc}, "self": .., "cross": ..}``.
    """
    if train.labels is None or test.labels is None:
        raise ValueError("latent classification needs labels")
    experts = [tuple(a) for a in model.experts]
    z_train, z_test = {}, {}
    for i, a in enumerate(experts):
        z_train[a] = model.latents(train, a, np.random.default_rng([seed, 0, i]))
        z_test[a] = model.latents(test, a, np.random.default_rng([seed, 1, i]))
    table = {}
    for a in experts:
        probe = LogisticProbe(classes, epochs).fit(z_train[a], train.labels)
        for b in experts:
            table[(model.label(a), model.label(b))] = probe.score(z_test[b], test.labels)
    self_acc = [v for (a, b), v in table.items() if a == b]
    cross_acc = [v for (a, b), v in table.items() if a != b]
    return {"table": table, "self": float(np.mean(self_acc)),
            "cross": float(np.mean(cross_acc)) if cross_acc else float("nan")}


# ---------------------------------------------------------------------------
# statistics


def corrected_ttest(diffs, n_train: int, n_test: int) -> tuple[float, float]:
    """Corrected resampled paired t-test, one-sided for ``mean(diffs) > 0``.

    ``t = mean(d) / sqrt(var(d) * (1/J + n_test/n_train))`` with the sample
    variance over the ``J`` paired runs and ``J - 1`` degrees of freedom.
    Orient ``diffs`` so that positive values favour the method under test.
    """
    d = np.asarray(diffs, dtype=np.float64)
    J = d.size
    if J < 2:
        raise ValueError("corrected_ttest needs at least two paired runs")
    mean = float(d.mean())
    var = float(d.var(ddof=1))
    if var == 0.0:
        if mean == 0.0:
            return 0.0, 0.5
        return (math.inf, 0.0) if mean > 0 else (-math.inf, 1.0)
    t = mean / math.sqrt(var * (1.0 / J + n_test / n_train))
    return t, float(stats.t.sf(t, J - 1))


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    rows: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def add(self, metric: str, value: float, **keys) -> None:
        self.rows.append({"metric": metric, **{k: str(v) for k, v in keys.items()}, "value": float(value)})

    def write(self, out_dir, stem: str = "metrics") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        fields = ["metric"] + sorted({k for r in self.rows for k in r} - {"metric", "value"}) + ["value"]
        csv_path = out / f"{stem}.csv"
        with csv_path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields, restval="")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        json_path = out / f"{stem}.json"
        json_path.write_text(json.dumps(self.summary, indent=2, sort_keys=True, default=float))
        return csv_path, json_path
