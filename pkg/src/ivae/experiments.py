"""Reusable experiment drivers: single runs, resolver sweeps and paired comparisons."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import DataBatch, Schema, TabularDataset, split_indices, synth_hetero, synth_trimodal
from .evaluation import coherence, corrected_ttest, latent_classification, reconstruction_errors, train_probes
from .gradconflict import ResolverError, sweep_grid
from .models import build_model
from .training import TrainConfig, TrainResult, train

log = logging.getLogger(__name__)

VANILLA = "vanilla"


def arm_settings(fpsi: str, blocks: str) -> tuple[str, str]:
    """Map the ``vanilla`` arm name to an identity resolver with no blocks."""
    if fpsi == VANILLA:
        return "identity", ""
    return fpsi, blocks


def select_best(scores: dict[str, Sequence[float]]) -> str:
    """Lowest median score; ties broken by mean, then by standard deviation."""
    if not scores:
        raise ValueError("no scores to select from")

    def key(name):
        s = np.asarray(scores[name], dtype=np.float64)
        s = s[np.isfinite(s)]
        if s.size == 0:
            return (np.inf, np.inf, np.inf)
        return (round(float(np.median(s)), 12), round(float(s.mean()), 12), float(s.std()))

    return min(scores, key=key)


# ---------------------------------------------------------------------------
# tabular


def tabular_metric(ds: TabularDataset) -> Callable:
    """Validation metric: aggregate reconstruction error on the original scale."""

    def metric(model, batch):
        errs = reconstruction_errors(ds.schema, batch, model.reconstruct(batch), ds.preprocessor)
        return float(np.mean(list(errs.values())))

    return metric


@dataclass
class TabularRun:
    fpsi: str
    seed: int
    errors: dict[str, float]
    val_metric: float
    result: TrainResult
    model: object = field(repr=False, default=None)


def run_tabular(ds: TabularDataset, seed: int, model_kind: str = "vae", fpsi: str = "identity",
                blocks: str = "li", epochs: int = 200, lr: float = 1e-3, batch_size: int = 128,
                amsgrad: bool = False, select: str = "best", **model_kw) -> TabularRun:
    arm_fpsi, arm_blocks = arm_settings(fpsi, blocks)
    model = build_model(model_kind, ds.schema, fpsi=arm_fpsi, blocks=arm_blocks, seed=seed, **model_kw)
    cfg = TrainConfig(epochs=epochs, batch_size=batch_size, lr=lr, amsgrad=amsgrad, seed=seed, select=select)
    metric = tabular_metric(ds)
    res = train(model, ds.batch("train"), ds.batch("val"), cfg, metric=metric)
    test = ds.batch("test")
    errs = reconstruction_errors(ds.schema, test, model.reconstruct(test), ds.preprocessor)
    return TabularRun(fpsi, seed, errs, res.best_metric, res, model)


def sweep_tabular(ds_for_seed: Callable[[int], TabularDataset], grid: Sequence[str], seeds: Sequence[int],
                  **run_kw) -> tuple[str, dict[str, list[float]]]:
    """Train every chain in ``grid`` for every seed and pick one by validation score.

    Failed runs are logged and scored ``inf`` so the sweep continues.
    """
    scores: dict[str, list[float]] = {}
    for chain in grid:
        scores[chain] = []
        for s in seeds:
            try:
                scores[chain].append(run_tabular(ds_for_seed(s), s, fpsi=chain, **run_kw).val_metric)
            except (ResolverError, ValueError, FloatingPointError) as exc:
                log.warning("sweep run %s seed %d failed: %s", chain, s, exc)
                scores[chain].append(float("inf"))
    return select_best(scores), scores


def nominal_error(schema: Schema, errors: dict[str, float]) -> float:
    vals = [errors[m.name] for m in schema if m.spec.nominal]
    if not vals:
        raise ValueError("schema has no nominal modality")
    return float(np.mean(vals))


@dataclass
class CollapseReport:
    winner: str
    sweep_scores: dict[str, list[float]]
    vanilla: list[dict[str, float]]
    best: list[dict[str, float]]
    vanilla_nominal: list[float]
    best_nominal: list[float]
    t: float
    p: float
    seconds: float

    @property
    def median_gain(self) -> float:
        return float(np.median(self.vanilla_nominal) - np.median(self.best_nominal))


def collapse_experiment(n: int = 5000, seeds: Sequence[int] = range(5), epochs: int = 200,
                        grid: Sequence[str] | None = None, sweep_seeds: Sequence[int] = (0, 1),
                        sweep_epochs: int = 40, data_seed: int = 0) -> CollapseReport:
    """VAE-ELBO on ``synth_hetero``: vanilla against the swept resolver.

    Each seed re-splits the data and re-initialises the model; the sweep uses a
    shorter schedule on the first ``sweep_seeds`` and validation scores only.
    """
    t0 = time.perf_counter()
    raw, schema = synth_hetero(data_seed, n)
    cache: dict[int, TabularDataset] = {}

    def ds_for(seed):
        if seed not in cache:
            cache[seed] = TabularDataset.build(raw, schema, seed)
        return cache[seed]

    grid = list(grid) if grid is not None else [c for c in sweep_grid() if c != "identity"]
    winner, scores = sweep_tabular(ds_for, grid, sweep_seeds, epochs=sweep_epochs)
    van = [run_tabular(ds_for(s), s, fpsi=VANILLA, epochs=epochs).errors for s in seeds]
    best = [run_tabular(ds_for(s), s, fpsi=winner, epochs=epochs).errors for s in seeds]
    vn = [nominal_error(schema, e) for e in van]
    bn = [nominal_error(schema, e) for e in best]
    sizes = split_indices(n)
    t, p = corrected_ttest(np.subtract(vn, bn), len(sizes["train"]), len(sizes["test"]))
    return CollapseReport(winner, scores, van, best, vn, bn, t, p, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# multimodal


@dataclass
class MultimodalRun:
    fpsi: str
    seed: int
    cross_coherence: float
    self_coherence: float
    cross_latent: float
    self_latent: float
    epoch_seconds: float
    result: TrainResult
    model: object = field(repr=False, default=None)


def trimodal_splits(n: int = 5000, classes: int = 10, seed: int = 0, data_seed: int = 0):
    batch, schema = synth_trimodal(data_seed, n, classes)
    idx = split_indices(n, seed)
    return {k: batch.subset(v) for k, v in idx.items()}, schema


def run_multimodal(splits: dict[str, DataBatch], schema: Schema, seed: int, model_kind: str = "mmvae",
                   fpsi: str = "identity", blocks: str = "li,eei,dei", epochs: int = 50, loss: str = "siwae",
                   K: int = 5, hidden: int = 64, lr: float = 1e-3, batch_size: int = 128, amsgrad: bool = True,
                   probes=None, classes: int | None = None, **model_kw) -> MultimodalRun:
    arm_fpsi, arm_blocks = arm_settings(fpsi, blocks)
    classes = classes or int(splits["train"].labels.max()) + 1
    model = build_model(model_kind, schema, fpsi=arm_fpsi, blocks=arm_blocks, seed=seed, loss=loss, K=K,
                        hidden=hidden, **model_kw)
    cfg = TrainConfig(epochs=epochs, batch_size=batch_size, lr=lr, amsgrad=amsgrad, seed=seed)
    res = train(model, splits["train"], splits["val"], cfg)
    probes = probes or train_probes(schema, splits["train"], classes)
    coh = coherence(model, splits["test"], probes, seed).summary()
    lat = latent_classification(model, splits["train"], splits["test"], classes, seed)
    return MultimodalRun(fpsi, seed, coh["cross"], coh["self"], lat["cross"], lat["self"],
                         float(np.mean(res.epoch_seconds)), res, model)


@dataclass
class CoherenceReport:
    winner: str
    sweep_scores: dict[str, list[float]]
    vanilla: list[MultimodalRun]
    best: list[MultimodalRun]
    seconds: float

    def wins(self, attr: str) -> int:
        return sum(getattr(b, attr) > getattr(v, attr) for v, b in zip(self.vanilla, self.best))

    @property
    def overhead(self) -> float:
        """Relative increase of mean per-epoch time with blocks over vanilla."""
        v = np.mean([r.epoch_seconds for r in self.vanilla])
        b = np.mean([r.epoch_seconds for r in self.best])
        return float(b / v - 1.0)


def coherence_experiment(n: int = 5000, classes: int = 10, seeds: Sequence[int] = range(5), epochs: int = 50,
                         grid: Sequence[str] = ("gradnorm:alpha=0", "imtl_g", "pcgrad"),
                         sweep_seeds: Sequence[int] = (0,), sweep_epochs: int = 10, K: int = 5,
                         hidden: int = 64, data_seed: int = 0) -> CoherenceReport:
    """MMVAE-SIWAE on ``synth_trimodal``: vanilla against blocks with the swept resolver.

    Sweep candidates are scored by validation cross coherence (negated so lower
    is better).  Per-epoch timings come from the same runs.
    """
    t0 = time.perf_counter()
    cache = {}

    def data(seed):
        if seed not in cache:
            splits, schema = trimodal_splits(n, classes, seed, data_seed)
            probes = train_probes(schema, splits["train"], classes)
            cache[seed] = (splits, schema, probes)
        return cache[seed]

    scores: dict[str, list[float]] = {}
    for chain in grid:
        scores[chain] = []
        for s in sweep_seeds:
            splits, schema, probes = data(s)
            val = dict(splits, test=splits["val"])
            try:
                r = run_multimodal(val, schema, s, fpsi=chain, epochs=sweep_epochs, K=K, hidden=hidden,
                                   probes=probes, classes=classes)
                scores[chain].append(-r.cross_coherence)
            except (ResolverError, ValueError) as exc:
                log.warning("sweep run %s seed %d failed: %s", chain, s, exc)
                scores[chain].append(float("inf"))
    winner = select_best(scores)
    van, best = [], []
    for s in seeds:
        splits, schema, probes = data(s)
        kw = dict(epochs=epochs, K=K, hidden=hidden, probes=probes, classes=classes)
        van.append(run_multimodal(splits, schema, s, fpsi=VANILLA, **kw))
        best.append(run_multimodal(splits, schema, s, fpsi=winner, **kw))
    return CoherenceReport(winner, scores, van, best, time.perf_counter() - t0)
