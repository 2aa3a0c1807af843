"""Mini-batch training loop with best-validation checkpointing."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .data import DataBatch
from .gradconflict import ResolverError
from .nn import Adam

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    lr: float = 1e-3
    amsgrad: bool = False
    clip_norm: float | None = None
    seed: int = 0
    select: str = "best"  # "best" validation metric or "last" epoch


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_metric: float = float("inf")
    skipped_steps: int = 0
    steps: int = 0
    epoch_seconds: list[float] = field(default_factory=list)


def validation_loss(model, batch: DataBatch, seed: int = 0) -> float:
    """Mean negative bound on ``batch`` in eval mode with fixed noise."""
    mode = model.training
    model.eval()
    with ad.Tape(seed=seed, training=False):
        obj = model.objective(batch)
    model.train(mode)
    return float(-np.mean(obj.bound))


def train(model, train_batch: DataBatch, val_batch: DataBatch | None = None, cfg: TrainConfig | None = None,
          metric: Callable | None = None) -> TrainResult:
    """Fit ``model`` in place.

    ``metric(model, val_batch)`` returns a lower-is-better score; it defaults
    to the validation loss.  Steps whose loss or gradients are non-finite, or
    whose resolver fails, are skipped and counted.  With ``select="best"`` the
    parameters of the best validation epoch are restored at the end.
    """
    cfg = cfg or TrainConfig()
    metric = metric or (lambda m, b: validation_loss(m, b, cfg.seed))
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr, amsgrad=cfg.amsgrad, clip_norm=cfg.clip_norm)
    rng = np.random.default_rng(cfg.seed)
    res = TrainResult()
    best_state = None
    for epoch in range(cfg.epochs):
        model.train()
        t0 = time.perf_counter()
        losses = []
        for batch in train_batch.batches(cfg.batch_size, rng):
            res.steps += 1
            try:
                with ad.Tape(seed=int(rng.integers(2 ** 63))) as tape:
                    obj = model.objective(batch)
                    grads = tape.backward(obj.loss, params.values())
            except (ad.NonFiniteLossError, ResolverError) as exc:
                res.skipped_steps += 1
                log.debug("epoch %d: skipped step (%s)", epoch, exc)
                continue
            if not all(np.isfinite(g).all() for g in grads.values()):
                res.skipped_steps += 1
                continue
            opt.step(grads)
            losses.append(float(obj.loss.data))
        res.epoch_seconds.append(time.perf_counter() - t0)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else float("nan"),
               "skipped": res.skipped_steps, "seconds": res.epoch_seconds[-1]}
        if val_batch is not None:
            score = float(metric(model, val_batch))
            row["val_metric"] = score
            if cfg.select == "best" and score < res.best_metric:
                res.best_metric, res.best_epoch = score, epoch
                best_state = model.state_dict()
        res.history.append(row)
    if best_state is not None:
        model.load_state_dict(best_state)
    elif res.history:
        res.best_epoch = res.history[-1]["epoch"]
        res.best_metric = res.history[-1].get("val_metric", float("nan"))
    model.eval()
    return res
