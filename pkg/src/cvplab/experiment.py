"""Run directories: train, analyze and sweep on top of an :class:`ExperimentConfig`."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import analysis, plotting
from .config import ConfigError, ExperimentConfig, from_dict
from .datagen import DataError, DomainDataset
from .model import ModelParams, init_model
from .trainer import (
    NumericFailure,
    TrainState,
    load_state,
    read_metrics,
    save_state,
    train,
    write_metrics,
)

log = logging.getLogger(__name__)

CHECKPOINT = "checkpoint.npz"
METRICS = "metrics.csv"
RESOLVED = "config.yaml"


@dataclass
class TrainResult:
    state: TrainState
    out_dir: Path

    @property
    def final(self):
        return self.state.history[-1] if self.state.history else None


def load_data(cfg: ExperimentConfig, base_dir: Path | None = None) -> tuple[DomainDataset, DomainDataset]:
    return cfg.dataset.load(cfg.seed, base_dir)


def run_train(cfg: ExperimentConfig, out_dir: str | Path | None = None, resume: str | Path | None = None,
              base_dir: Path | None = None, data: tuple[DomainDataset, DomainDataset] | None = None,
              write: bool = True) -> TrainResult:
    """Pretrain and adapt; write checkpoint, metrics log and the resolved config."""
    cfg = cfg.resolved()
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    source, target = data if data is not None else load_data(cfg, base_dir)
    if source.dim != cfg.model.input_dim:
        raise DataError(f"dataset has {source.dim} features, model expects {cfg.model.input_dim}")
    if resume is not None:
        state, saved = load_state(resume)
        mine = dataclasses.replace(cfg.train, checkpoint_every=0)
        if dataclasses.replace(saved, checkpoint_every=0) != mine:
            raise ConfigError(f"{resume}: checkpoint was trained with a different train config")
        if state.params.config != cfg.model:
            raise ConfigError(f"{resume}: checkpoint model config differs from the config")
    else:
        state = TrainState.fresh(init_model(cfg.model), cfg.train)
    if write:
        cfg.dump(out / RESOLVED)

    def on_cycle(st: TrainState) -> None:
        rec = st.history[-1]
        log.info("cycle %d  total %.4f  tgt_acc %.3f", rec.cycle, rec.total, rec.tgt_acc)
        every = cfg.train.checkpoint_every
        if write and every and st.cycle % every == 0:
            save_state(out / "checkpoints" / f"cycle_{st.cycle:04d}.npz", st, cfg.train)

    train(state, source, target, cfg.train, on_cycle)
    if write:
        save_state(out / CHECKPOINT, state, cfg.train)
        write_metrics(out / METRICS, state.history)
    return TrainResult(state, out)


def run_analyze(cfg: ExperimentConfig, params: ModelParams, out_dir: str | Path, history=None,
                base_dir: Path | None = None, dataset: DomainDataset | None = None) -> dict:
    """Oscillation suite, uncertainty correlations and sigma trajectory on the target set."""
    cfg = cfg.resolved()
    out = Path(out_dir)
    if dataset is None:
        _, dataset = load_data(cfg, base_dir)
    mc = params.config
    if dataset.dim != mc.input_dim:
        raise DataError(f"checkpoint expects {mc.input_dim} input features, dataset has {dataset.dim}")
    if dataset.n_classes != mc.n_classes:
        raise DataError(f"checkpoint has {mc.n_classes} classes, dataset has {dataset.n_classes}")
    a = cfg.analysis
    report: dict = {"domain": dataset.domain, "n_instances": len(dataset)}
    if a.oscillation:
        if dataset.has_labels:
            value = analysis.oscillation_suite(params, dataset, a.per_class, a.K, cfg.seed)
            report["oscillation"] = {"status": "ok", "value": value, "per_class": a.per_class, "K": a.K,
                                     "pairs": analysis.n_pairs(dataset.n_classes, a.per_class)}
        else:
            report["oscillation"] = {"status": "labels unavailable", "value": None}
    if a.correlation:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x3CD]))
        unc = analysis.correlate(params, dataset, a.mcd_T, a.mcd_rate, rng)
        report["uncertainty"] = unc.to_json()
        unc.write_csv(out / "uncertainty.csv")
        if a.figures:
            plotting.plot_correlations(unc, out / "correlations.svg")
            plotting.plot_correlation_scatter(unc, out / "correlation_scatter.svg")
    if history:
        traj = analysis.sigma_trajectory(history)
        report["sigma_trajectory"] = traj.to_json()
        if a.figures:
            plotting.plot_sigma_trajectory(traj, out / "sigma_trajectory.svg")
    analysis.write_json(out / "analysis.json", report)
    return report


# -- sweeps -----------------------------------------------------------------------

SWEEP_AXES = ("alpha", "M")
SUMMARY_COLUMNS = ("axis", "value", "runs", "failed", "tgt_acc_mean", "tgt_acc_std", "src_acc_mean", "errors")


def _sweep_one(args) -> dict:
    cfg, axis, value, seed, out = args
    raw = cfg.to_dict()
    raw["train"][axis] = value
    raw["seed"] = seed
    try:
        res = run_train(from_dict(raw, env={}), out)
    except (NumericFailure, DataError, ConfigError, ValueError) as e:
        return {"value": value, "seed": seed, "error": f"{type(e).__name__}: {e}"}
    rec = res.final
    return {"value": value, "seed": seed, "tgt_acc": rec.tgt_acc, "src_acc": rec.src_acc}


def _fmt(x: float) -> str:
    return "" if x is None or math.isnan(x) else repr(float(x))


def run_sweep(cfg: ExperimentConfig, axis: str, values: Sequence[float], out_dir: str | Path,
              seeds: int = 1, jobs: int = 1) -> list[dict]:
    """Independent runs per value (and seed); a failing run is recorded, not raised."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}")
    if len(values) < 2:
        raise ConfigError("a sweep needs at least two values")
    if axis == "M":
        values = [int(v) for v in values]
    out = Path(out_dir)
    cfg.dump(out / RESOLVED)
    tasks = [(cfg, axis, v, cfg.seed + s, out / f"{axis}={v}" / f"seed={cfg.seed + s}")
             for v in values for s in range(seeds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_sweep_one, tasks))
    else:
        results = [_sweep_one(t) for t in tasks]
    rows = []
    for v in values:
        mine = [r for r in results if r["value"] == v]
        ok = [r for r in mine if "error" not in r]
        accs = np.array([r["tgt_acc"] for r in ok])
        rows.append({
            "axis": axis, "value": v, "runs": len(mine), "failed": len(mine) - len(ok),
            "tgt_acc_mean": float(accs.mean()) if len(ok) else None,
            "tgt_acc_std": float(accs.std()) if len(ok) else None,
            "src_acc_mean": float(np.mean([r["src_acc"] for r in ok])) if ok else None,
            "errors": "; ".join(r["error"] for r in mine if "error" in r),
        })
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in rows:
            w.writerow([r["axis"], r["value"], r["runs"], r["failed"], _fmt(r["tgt_acc_mean"]),
                        _fmt(r["tgt_acc_std"]), _fmt(r["src_acc_mean"]), r["errors"]])
    plotting.plot_sweep(axis, values, [r["tgt_acc_mean"] for r in rows], out / "sweep.svg")
    return rows


def history_for(checkpoint: str | Path, metrics: str | Path | None = None):
    if metrics is not None:
        return read_metrics(metrics)
    state, _ = load_state(checkpoint)
    return state.history
