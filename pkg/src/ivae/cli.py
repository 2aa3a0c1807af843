"""Command-line entry points: ``ivae train|eval|sweep|generate``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import checkpoint as ckpt
from . import likelihoods as lk
from .data import (DataBatch, Schema, TabularDataset, default_components, fit_gmm, load_csv, sample_gmm,
                   save_splits, split_indices, synth_hetero, synth_trimodal)
from .evaluation import (LogisticProbe, MetricReport, coherence, latent_classification, reconstruction_errors,
                         train_probes)
from .experiments import arm_settings, select_best, tabular_metric
from .gradconflict import ResolverError, sweep_grid
from .models import MODEL_KINDS, build_model
from .plots import pair_plot, parallel_coordinates, read_metric_csv
from .training import TrainConfig, train

log = logging.getLogger("ivae")

MIXTURE_KINDS = ("mvae", "mmvae", "mopoe")
LOSS_CHOICES = ("elbo", "iwae", "dreg", "loose", "siwae")
CHECKPOINT = "model.ivae"
PROBES = "probes.ivae"


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("IVAE_THREADS", "1")))
    except ValueError:
        raise SystemExit("IVAE_THREADS must be an integer")


# ---------------------------------------------------------------------------
# arguments


def parse_seeds(text: str) -> list[int]:
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise argparse.ArgumentTypeError("seed list must be non-empty")
    return seeds


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="CSV path, synth:hetero or synth:trimodal")
    p.add_argument("--schema", default=None, help="JSON sidecar for a CSV dataset")
    p.add_argument("--n", type=int, default=5000, help="rows for synthetic data")
    p.add_argument("--classes", type=int, default=10, help="classes for synth:trimodal")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--out", required=True, type=Path)


def _add_model(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", choices=MODEL_KINDS, default="vae")
    p.add_argument("--loss", choices=LOSS_CHOICES, default=None)
    p.add_argument("--fpsi", default="identity", help="resolver chain, e.g. gradnorm:alpha=0+pcgrad")
    p.add_argument("--blocks", default=None, help="subset of li,eei,dei; empty string disables blocks")
    p.add_argument("--beta", default=None, help="dim or one")
    p.add_argument("--k", type=int, default=None, help="importance samples")
    p.add_argument("--latent-dim", type=int, default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--seeds", type=parse_seeds, default=[0])
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    amsgrad = p.add_mutually_exclusive_group()
    amsgrad.add_argument("--amsgrad", dest="amsgrad", action="store_true", default=None)
    amsgrad.add_argument("--no-amsgrad", dest="amsgrad", action="store_false")
    p.add_argument("--clip-norm", type=float, default=None)
    p.add_argument("--select", choices=("best", "last"), default="best")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ivae", description="Impartial training of heterogeneous VAEs.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one run per seed")
    _add_common(p)
    _add_model(p)
    p.add_argument("--resume", type=Path, default=None, help="warm-start from a compatible checkpoint")

    p = sub.add_parser("eval", help="write metric CSV/JSON and SVG plots for a trained run")
    p.add_argument("--run", required=True, type=Path, help="run directory written by train")
    p.add_argument("--data", default=None, help="override the dataset recorded in the run")
    p.add_argument("--schema", default=None)
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("sweep", help="cross-validate resolver chains")
    _add_common(p)
    _add_model(p)
    p.add_argument("--grid", default=None, help="comma-separated chains; default is the 12-combination grid")

    p = sub.add_parser("generate", help="sample new rows from a trained run")
    p.add_argument("--run", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="output CSV (one file per modality for mixtures)")
    p.add_argument("--num", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--evidence", default=None, help="mixture models: condition on these modalities of the test split")
    return parser


# ---------------------------------------------------------------------------
# run configuration


def model_defaults(kind: str) -> dict:
    if kind in MIXTURE_KINDS:
        return {"loss": "siwae", "blocks": "li,eei,dei", "beta": "one", "k": 5, "epochs": 50, "amsgrad": True,
                "hidden": 64, "latent_dim": 10}
    if kind == "hivae":
        return {"loss": "elbo", "blocks": "li", "beta": "dim", "k": 1, "epochs": 200, "amsgrad": False}
    return {"loss": "elbo", "blocks": "li", "beta": "dim", "k": 1, "epochs": 200, "amsgrad": False, "hidden": 50}


def resolve_config(args) -> dict:
    cfg = model_defaults(args.model)
    for key in ("loss", "blocks", "beta", "epochs", "amsgrad", "hidden", "latent_dim"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if args.k is not None:
        cfg["k"] = args.k
    if cfg["loss"] == "dreg" and cfg["k"] < 2:
        cfg["k"] = 2
    data = args.data
    if not data.startswith("synth:"):
        data = str(Path(data).resolve())
    cfg.update(model=args.model, fpsi=args.fpsi, seeds=list(args.seeds), batch_size=args.batch_size, lr=args.lr,
               clip_norm=args.clip_norm, select=args.select, data=data,
               schema=str(Path(args.schema).resolve()) if args.schema else None,
               n=args.n, classes=args.classes, data_seed=args.data_seed)
    fpsi, blocks = arm_settings(cfg["fpsi"], cfg["blocks"])
    cfg["fpsi"], cfg["blocks"] = fpsi, blocks
    return cfg


def model_kwargs(cfg: dict, seed: int) -> dict:
    kw = dict(loss=cfg["loss"], fpsi=cfg["fpsi"], blocks=cfg["blocks"], beta=cfg["beta"], K=cfg["k"], seed=seed)
    if cfg["model"] == "hivae":
        if cfg.get("latent_dim"):
            kw["d_z"] = cfg["latent_dim"]
    elif cfg.get("latent_dim"):
        kw["latent_dim"] = cfg["latent_dim"]
    if cfg.get("hidden"):
        kw["hidden"] = cfg["hidden"]
    return kw


# ---------------------------------------------------------------------------
# data


class RunData:
    """Splits, schema and (for tabular data) the fitted preprocessor of one seed."""

    def __init__(self, cfg: dict, seed: int):
        data = cfg["data"]
        self.labels_available = False
        self.preprocessor = None
        if data == "synth:trimodal":
            batch, self.schema = synth_trimodal(cfg["data_seed"], cfg["n"], cfg["classes"])
            self.splits = split_indices(batch.n, seed)
            self.batches = {k: DataBatch(*_sub(batch, v), split=k) for k, v in self.splits.items()}
            self.labels_available = True
            return
        if data == "synth:hetero":
            raw, self.schema = synth_hetero(cfg["data_seed"], cfg["n"])
        else:
            raw, self.schema = load_csv(data, cfg.get("schema"))
        if any(m.dim != 1 for m in self.schema):
            raise ValueError("tabular data must have one column per modality")
        ds = TabularDataset.build(raw, self.schema, seed)
        self.dataset = ds
        self.splits = ds.splits
        self.preprocessor = ds.preprocessor
        self.batches = {k: ds.batch(k) for k in ds.splits}

    @property
    def tabular(self) -> bool:
        return self.preprocessor is not None


def _sub(batch: DataBatch, idx):
    b = batch.subset(idx)
    return b.values, b.masks, b.labels


def check_model_data(kind: str, schema: Schema) -> None:
    if kind in MIXTURE_KINDS and len(schema) < 2:
        raise SystemExit(f"{kind} needs at least two modalities")
    if kind not in MIXTURE_KINDS and any(m.dim != 1 for m in schema):
        raise SystemExit(f"{kind} expects tabular data with one column per modality")


# ---------------------------------------------------------------------------
# train


def train_one(cfg: dict, seed: int, out: Path, resume: Path | None = None) -> dict:
    data = RunData(cfg, seed)
    check_model_data(cfg["model"], data.schema)
    model = build_model(cfg["model"], data.schema, **model_kwargs(cfg, seed))
    if resume is not None:
        arrays, meta = ckpt.load(resume)
        ckpt.check_compatible(meta, schema_hash=data.schema.hash(), model=cfg["model"])
        state = model.state_dict()
        bad = [k for k, v in state.items() if k not in arrays or arrays[k].shape != v.shape]
        if bad:
            raise ckpt.CheckpointError(f"checkpoint does not fit this model: {bad[:3]}")
        model.load_state_dict(arrays)
    tcfg = TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"], amsgrad=cfg["amsgrad"],
                       clip_norm=cfg["clip_norm"], seed=seed, select=cfg["select"])
    metric = tabular_metric(data.dataset) if data.tabular else None
    res = train(model, data.batches["train"], data.batches["val"], tcfg, metric=metric)
    run_dir = out / f"seed_{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    save_splits(data.splits, run_dir)
    _write_csv(run_dir / "history.csv", [{k: v for k, v in r.items() if k != "seconds"} for r in res.history])
    _write_csv(run_dir / "timing.csv", [{"epoch": r["epoch"], "seconds": r["seconds"]} for r in res.history])
    meta = {"version": version_string(), "seed": seed, "model": cfg["model"], "config": cfg,
            "model_config": _json_safe(model.config()), "schema": data.schema.to_dict(),
            "schema_hash": data.schema.hash(), "best_epoch": res.best_epoch, "best_metric": res.best_metric,
            "skipped_steps": res.skipped_steps, "steps": res.steps}
    if data.tabular:
        meta["preprocessor"] = _json_safe(data.preprocessor.stats_)
    ckpt.save(run_dir / CHECKPOINT, model.state_dict(), meta)
    inv = model.inventory()
    (run_dir / "inventory.json").write_text(json.dumps(inv, indent=2))
    n_enabled = sum(1 for b in inv if b["enabled"])
    summary = {"seed": seed, "best_epoch": res.best_epoch, "best_metric": res.best_metric,
               "skipped_steps": res.skipped_steps, "blocks": n_enabled, "declared_blocks": len(inv)}
    (run_dir / "run.json").write_text(json.dumps(summary, indent=2, default=float))
    (run_dir / "config.json").write_text(json.dumps(dict(cfg, seeds=[seed], version=meta["version"]), indent=2))
    return summary


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = args.out.resolve()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg | {"version": version_string()}, indent=2))
    for seed in cfg["seeds"]:
        s = train_one(cfg, seed, out, args.resume)
        print(f"seed {seed}: blocks {s['blocks']} (declared {s['declared_blocks']}), best epoch {s['best_epoch']}, "
              f"val metric {s['best_metric']:.6g}, skipped steps {s['skipped_steps']}")
    return 0


# ---------------------------------------------------------------------------
# eval


def _load_run(run_dir: Path):
    path = run_dir / CHECKPOINT
    if not path.exists():
        raise SystemExit(f"{path} not found; pass a seed directory written by train")
    arrays, meta = ckpt.load(path)
    return arrays, meta


def _restore(meta: dict, arrays: dict, data_override=None, schema_override=None):
    cfg = dict(meta["config"])
    if data_override is not None:
        cfg["data"] = data_override if data_override.startswith("synth:") else str(Path(data_override).resolve())
        cfg["schema"] = schema_override
    data = RunData(cfg, meta["seed"])
    try:
        ckpt.check_compatible(meta, schema_hash=data.schema.hash())
    except ckpt.CheckpointError as exc:
        raise SystemExit(f"dataset does not match the checkpoint: {exc}")
    model = build_model(cfg["model"], data.schema, **model_kwargs(cfg, meta["seed"]))
    model.load_state_dict(arrays)
    model.eval()
    return cfg, data, model


def load_or_train_probes(run_dir: Path, schema: Schema, train_batch: DataBatch, classes: int):
    """Probe weights are cached next to the checkpoint after their first training."""
    path = run_dir / PROBES
    if path.exists():
        arrays, meta = ckpt.load(path)
        ckpt.check_compatible(meta, schema_hash=schema.hash())
        return [LogisticProbe.from_state(classes, {k: arrays[f"{d}.{k}"] for k in ("W", "b", "mean", "std")})
                for d in range(len(schema))]
    probes = train_probes(schema, train_batch, classes)
    arrays = {f"{d}.{k}": np.asarray(v) for d, p in enumerate(probes) for k, v in p.state().items()}
    ckpt.save(path, arrays, {"schema_hash": schema.hash(), "classes": classes})
    return probes


def cmd_eval(args) -> int:
    run_dir = args.run.resolve()
    arrays, meta = _load_run(run_dir)
    cfg, data, model = _restore(meta, arrays, args.data, args.schema)
    out = (args.out or run_dir / "eval").resolve()
    test = data.batches["test"]
    report = MetricReport()
    report.summary.update(seed=meta["seed"], version=meta["version"], model=cfg["model"], fpsi=cfg["fpsi"],
                          blocks=cfg["blocks"], best_epoch=meta["best_epoch"])
    if data.tabular:
        errs = reconstruction_errors(data.schema, test, model.reconstruct(test), data.preprocessor)
        for name, v in errs.items():
            report.add("error", v, modality=name)
        report.summary["errors"] = errs
        report.summary["aggregate_error"] = float(np.mean(list(errs.values())))
        report.add("aggregate_error", report.summary["aggregate_error"])
        csv_path, _ = report.write(out)
        z = model.encode(test)
        pair_plot(z, out / "latent_pairs.svg")
        parallel_coordinates([dict(r, target=r["modality"], evidence="error") for r in read_metric_csv(csv_path)
                              if r["metric"] == "error"], out / "errors_parallel.svg")
    else:
        if not data.labels_available:
            raise SystemExit("coherence evaluation needs labelled data")
        classes = cfg["classes"]
        probes = load_or_train_probes(run_dir, data.schema, data.batches["train"], classes)
        table = coherence(model, test, probes, meta["seed"])
        for r in table.rows:
            report.add("coherence", r["accuracy"], evidence=r["evidence"], target=r["target"], kind=r["kind"])
        lat = latent_classification(model, data.batches["train"], test, classes, meta["seed"])
        for (a, b), v in lat["table"].items():
            report.add("latent_accuracy", v, train_expert=a, eval_expert=b)
        report.summary["coherence"] = table.summary()
        report.summary["latent"] = {"self": lat["self"], "cross": lat["cross"]}
        csv_path, _ = report.write(out)
        rows = read_metric_csv(csv_path)
        parallel_coordinates(rows, out / "coherence_parallel.svg", metric="coherence")
        full = tuple(range(len(data.schema)))
        z = model.latents(test, full)
        pair_plot(z, out / "latent_pairs.svg", labels=test.labels)
    print(json.dumps(report.summary, indent=2, default=float))
    return 0


# ---------------------------------------------------------------------------
# sweep


def _sweep_job(cfg: dict, chain: str, seed: int) -> dict:
    cfg = dict(cfg)
    cfg["fpsi"], cfg["blocks"] = arm_settings(chain, cfg["blocks"] or model_defaults(cfg["model"])["blocks"])
    try:
        data = RunData(cfg, seed)
        model = build_model(cfg["model"], data.schema, **model_kwargs(cfg, seed))
        tcfg = TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                           amsgrad=cfg["amsgrad"], clip_norm=cfg["clip_norm"], seed=seed, select=cfg["select"])
        metric = tabular_metric(data.dataset) if data.tabular else None
        res = train(model, data.batches["train"], data.batches["val"], tcfg, metric=metric)
        return {"chain": chain, "seed": seed, "val_metric": res.best_metric, "status": "ok"}
    except (ResolverError, ValueError, FloatingPointError) as exc:
        return {"chain": chain, "seed": seed, "val_metric": float("inf"), "status": f"failed: {exc}"}


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    grid = [g for g in args.grid.split(",") if g] if args.grid else sweep_grid()
    out = args.out.resolve()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg | {"grid": grid, "version": version_string()}, indent=2))
    jobs = [(chain, s) for chain in grid for s in cfg["seeds"]]
    workers = worker_count()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_job, [cfg] * len(jobs), *zip(*jobs)))
    else:
        rows = [_sweep_job(cfg, c, s) for c, s in jobs]
    _write_csv(out / "sweep.csv", rows)
    scores = {c: [r["val_metric"] for r in rows if r["chain"] == c] for c in grid}
    winner = select_best(scores)
    ok = {c: [x for x in v if np.isfinite(x)] for c, v in scores.items()}
    stat = lambda f: {c: (float(f(v)) if v else None) for c, v in ok.items()}  # noqa: E731
    summary = {"dataset": cfg["data"], "model": cfg["model"], "chosen": winner, "median": stat(np.median),
               "mean": stat(np.mean), "std": stat(np.std), "failed": sum(r["status"] != "ok" for r in rows)}
    (out / "sweep.json").write_text(json.dumps(summary, indent=2, default=float))
    _write_csv(out / "chosen.csv", [{"dataset": cfg["data"], "model": cfg["model"], "chosen": winner}])
    print(f"chosen: {winner}")
    return 0


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    run_dir = args.run.resolve()
    arrays, meta = _load_run(run_dir)
    cfg, data, model = _restore(meta, arrays)
    rng = np.random.default_rng(args.seed)
    schema = data.schema
    out = args.out.resolve()
    out.parent.mkdir(parents=True, exist_ok=True)
    if cfg["model"] in MIXTURE_KINDS:
        if args.evidence:
            names = schema.names
            evidence = tuple(names.index(n) for n in args.evidence.split(","))
            batch = data.batches["test"].subset(np.arange(min(args.num, data.batches["test"].n)))
            z = model.latents(batch, evidence, rng)
        else:
            z = rng.standard_normal((args.num, model.latent_dim))
        for d, m in enumerate(schema):
            x = lk.sample(m.spec, model.decode(z, d), rng)
            np.savetxt(out.with_name(f"{out.stem}_{m.name}{out.suffix or '.csv'}"),
                       np.asarray(x).reshape(len(z), -1), delimiter=",")
        print(f"wrote {len(schema)} files next to {out}")
        return 0
    train_b = data.batches["train"]
    z_train = model.encode(train_b)
    if cfg["model"] == "hivae":
        # mixture prior: uniform s, then z | s from the learned prior means
        s = np.eye(model.d_s)[rng.integers(0, model.d_s, args.num)]
        z = model.prior_mu(s).data + rng.standard_normal((args.num, model.d_z))
        etas = model.decode(z, s)
    else:
        gmm = fit_gmm(z_train, max(1, default_components(len(z_train))), rng)
        etas = model.decode(sample_gmm(gmm, args.num, rng))
    cols = [np.asarray(lk.sample(m.spec, e, rng)).reshape(args.num, -1) for m, e in zip(schema, etas)]
    table = data.preprocessor.inverse_transform(np.concatenate(cols, axis=1))
    header = ",".join(schema.names)
    np.savetxt(out, table, delimiter=",", header=header, comments="")
    print(f"wrote {args.num} rows to {out}")
    return 0


# ---------------------------------------------------------------------------
# helpers


def _json_safe(obj):
    return json.loads(json.dumps(obj, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o)))


def _write_csv(path: Path, rows: list[dict]) -> None:
    fields = list(dict.fromkeys(k for r in rows for k in r))
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "generate": cmd_generate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
