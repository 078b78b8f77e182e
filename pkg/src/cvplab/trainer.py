"""Two-phase training: source-only pretraining, then pseudo-label adaptation cycles."""

from __future__ import annotations

import csv
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffcore as dc
from .datagen import DataError, DomainDataset, mixed_batch, source_batch
from .losses import kappa, total_loss
from .model import ModelParams, forward_cvp, load_checkpoint, predict, save_checkpoint
from .sampler import NoiseSource

# stream tags for keyed random generators
_BATCH_STREAM = 1
_NOISE_STREAM = 2

PRETRAIN = "pretrain"
ADAPT = "adapt"


class Ablation(str, Enum):
    BASIC = "basic"                  # l_ce_mu only
    NO_SAMPLES_CE = "no-samples-ce"  # l_ce_mu + l_ant
    FULL = "full"                    # l_ce_mu + alpha l_ce_phi + l_ant
    NO_ANT = "no-ant"                # l_ce_mu + alpha l_ce_phi; sigma collapses


class NumericFailure(RuntimeError):
    def __init__(self, step: int, term: str):
        self.step, self.term = step, term
        super().__init__(f"non-finite value at step {step} in {term}")


@dataclass
class TrainConfig:
    alpha: float = 0.5
    M: int = 64
    batch_size: int = 32
    pretrain_cycles: int = 50
    adapt_cycles: int = 60
    cycle_steps: int = 50
    base_lr: float = 5e-4
    momentum: float = 0.95
    weight_decay: float = 0.0
    lr_gamma: float = 10.0
    lr_beta: float = 0.75
    seed: int = 0
    checkpoint_every: int = 0
    ablation: str = "full"

    def __post_init__(self):
        self.ablation = Ablation(self.ablation).value
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch_size must be an even number >= 2")
        if self.cycle_steps < 1 or self.pretrain_cycles < 0 or self.adapt_cycles < 0:
            raise ValueError("cycle counts must be non-negative and cycle_steps >= 1")
        if self.M < 1 and self.ablation != Ablation.BASIC.value:
            raise ValueError("M must be >= 1 unless ablation is basic")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")

    @property
    def total_steps(self) -> int:
        return (self.pretrain_cycles + self.adapt_cycles) * self.cycle_steps

    def loss_terms(self) -> tuple[int, float, bool]:
        """``(samples drawn, effective alpha, antagonistic on)`` for the ablation."""
        ab = Ablation(self.ablation)
        if ab is Ablation.BASIC:
            return 0, 0.0, False
        if ab is Ablation.NO_SAMPLES_CE:
            return self.M, 0.0, True
        if ab is Ablation.NO_ANT:
            return self.M, self.alpha, False
        return self.M, self.alpha, True


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Inverse decay ``base_lr * (1 + gamma p) ** -beta`` with ``p = step / total_steps``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    p = step / cfg.total_steps if cfg.total_steps else 0.0
    return cfg.base_lr * (1.0 + cfg.lr_gamma * p) ** (-cfg.lr_beta)


METRIC_COLUMNS = ("cycle", "step", "l_ce_mu", "l_ce_phi", "l_ant", "total",
                  "sigma_src_median", "sigma_tgt_median", "src_acc", "tgt_acc", "lr")


@dataclass
class MetricsRecord:
    cycle: int
    step: int
    l_ce_mu: float
    l_ce_phi: float
    l_ant: float
    total: float
    sigma_src_median: float
    sigma_tgt_median: float
    src_acc: float
    tgt_acc: float
    lr: float

    def row(self) -> list[str]:
        out = []
        for name in METRIC_COLUMNS:
            v = getattr(self, name)
            if isinstance(v, int):
                out.append(str(v))
            else:
                out.append("" if math.isnan(v) else repr(float(v)))
        return out

    @classmethod
    def from_row(cls, row: dict[str, str]) -> "MetricsRecord":
        kw = {}
        for f in fields(cls):
            raw = row[f.name]
            kw[f.name] = int(raw) if f.name in ("cycle", "step") else (float(raw) if raw != "" else math.nan)
        return cls(**kw)


def write_metrics(path: str | Path, history: list[MetricsRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for rec in history:
            w.writerow(rec.row())
    return path


def read_metrics(path: str | Path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_COLUMNS:
            raise DataError(f"{path}: unexpected metrics header {reader.fieldnames}")
        try:
            return [MetricsRecord.from_row(r) for r in reader]
        except (KeyError, ValueError, TypeError) as e:
            raise DataError(f"{path}: malformed metrics row ({e})") from None


@dataclass
class TrainState:
    params: ModelParams
    opt: dc.OptimizerState
    cycle: int = 0
    step: int = 0
    pseudo_labels: np.ndarray | None = None
    history: list[MetricsRecord] = field(default_factory=list)

    @classmethod
    def fresh(cls, params: ModelParams, cfg: TrainConfig) -> "TrainState":
        return cls(params, dc.OptimizerState.for_params(params.arrays, cfg.momentum, cfg.base_lr))

    def phase(self, cfg: TrainConfig) -> str:
        return PRETRAIN if self.cycle < cfg.pretrain_cycles else ADAPT


def accuracy(params: ModelParams, X: np.ndarray, y: np.ndarray | None) -> float:
    if y is None or len(y) == 0:
        return math.nan
    return float(np.mean(predict(params, X) == y))


def pseudo_label(state: TrainState, target: DomainDataset) -> np.ndarray:
    """argmax of the current classifier on every target row (no sampling)."""
    return predict(state.params, target.features)


@contextmanager
def _guard(step: int, where: str = ""):
    """Report non-finite values as NumericFailure; numpy overflow warnings are silenced."""
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            yield
    except dc.NonFiniteError as e:
        raise NumericFailure(step, f"{e.op}{where}") from e


def train_step(state: TrainState, features: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
               kappa_value: float) -> tuple[dict[str, float], np.ndarray]:
    M, alpha, ant = cfg.loss_terms()
    noise = NoiseSource.keyed(cfg.seed, _NOISE_STREAM, state.step)
    with _guard(state.step):
        leaves = state.params.leaves()
        fwd = forward_cvp(leaves, features, M, noise, state.params.config.sigma_floor)
        bundle = total_loss(fwd, labels, alpha, kappa_value, antagonistic=ant)
        grads = dc.backward(bundle.loss)
    dc.sgd_nesterov_step(state.params.arrays, grads, state.opt, lr_at(state.step, cfg), cfg.weight_decay)
    state.step += 1
    return bundle.means(), fwd.sigma.data


def _median_or_nan(values: list[float]) -> float:
    return float(np.median(values)) if values else math.nan


def run_cycle(state: TrainState, source: DomainDataset, target: DomainDataset | None,
              cfg: TrainConfig) -> MetricsRecord:
    """One cycle of ``cycle_steps`` updates; adaptation cycles relabel the target first."""
    phase = state.phase(cfg)
    k = kappa(source.n_classes)
    if phase == ADAPT:
        if target is None:
            raise DataError("adaptation needs a target set")
        with _guard(state.step, " (pseudo-labelling)"):
            state.pseudo_labels = pseudo_label(state, target)
    start_step, lr0 = state.step, lr_at(state.step, cfg)
    sums = {"l_ce_mu": 0.0, "l_ce_phi": 0.0, "l_ant": 0.0, "total": 0.0}
    src_meds, tgt_meds = [], []
    for _ in range(cfg.cycle_steps):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _BATCH_STREAM, state.step]))
        if phase == PRETRAIN:
            batch = source_batch(source, cfg.batch_size, rng)
        else:
            batch = mixed_batch(source, target, state.pseudo_labels, cfg.batch_size, rng)
        means, sigma = train_step(state, batch.features, batch.labels, cfg, k)
        for key in sums:
            sums[key] += means[key]
        src_meds.append(float(np.median(sigma[~batch.is_target])))
        if batch.is_target.any():
            tgt_meds.append(float(np.median(sigma[batch.is_target])))
    n = cfg.cycle_steps
    with _guard(state.step - 1, " (evaluation)"):
        src_acc = accuracy(state.params, source.features, source.training_labels())
        tgt_acc = math.nan if target is None else accuracy(state.params, target.features, target.eval_labels())
    rec = MetricsRecord(
        cycle=state.cycle, step=start_step,
        l_ce_mu=sums["l_ce_mu"] / n, l_ce_phi=sums["l_ce_phi"] / n,
        l_ant=sums["l_ant"] / n, total=sums["total"] / n,
        sigma_src_median=_median_or_nan(src_meds), sigma_tgt_median=_median_or_nan(tgt_meds),
        src_acc=src_acc, tgt_acc=tgt_acc,
        lr=lr0,
    )
    state.history.append(rec)
    state.cycle += 1
    return rec


def _run_until(state: TrainState, end: int, source: DomainDataset, target: DomainDataset | None,
               cfg: TrainConfig, on_cycle: Callable[[TrainState], None] | None) -> TrainState:
    if len(source) == 0:
        raise DataError("empty source set")
    while state.cycle < end:
        run_cycle(state, source, target, cfg)
        if on_cycle:
            on_cycle(state)
    return state


def pretrain(state: TrainState, source: DomainDataset, cfg: TrainConfig,
             target: DomainDataset | None = None,
             on_cycle: Callable[[TrainState], None] | None = None) -> TrainState:
    """Source-only cycles until ``pretrain_cycles`` are done.  ``target`` is only evaluated."""
    return _run_until(state, cfg.pretrain_cycles, source, target, cfg, on_cycle)


def adapt(state: TrainState, source: DomainDataset, target: DomainDataset, cfg: TrainConfig,
          on_cycle: Callable[[TrainState], None] | None = None) -> TrainState:
    return _run_until(state, cfg.pretrain_cycles + cfg.adapt_cycles, source, target, cfg, on_cycle)


def train(state: TrainState, source: DomainDataset, target: DomainDataset, cfg: TrainConfig,
          on_cycle: Callable[[TrainState], None] | None = None) -> TrainState:
    """Pretrain then adapt, resuming from ``state.cycle``."""
    pretrain(state, source, cfg, target, on_cycle)
    return adapt(state, source, target, cfg, on_cycle)


# -- checkpoints ------------------------------------------------------------

def save_state(path: str | Path, state: TrainState, cfg: TrainConfig) -> Path:
    meta = {
        "cycle": state.cycle,
        "step": state.step,
        "optimizer": {"momentum": state.opt.momentum, "base_lr": state.opt.base_lr, "step": state.opt.step},
        "train_config": asdict(cfg),
        "history": [asdict(r) for r in state.history],
    }
    return save_checkpoint(path, state.params, state.opt.velocity, meta)


def load_state(path: str | Path) -> tuple[TrainState, TrainConfig]:
    ck = load_checkpoint(path)
    meta = ck.meta
    cfg = TrainConfig(**meta["train_config"])
    o = meta["optimizer"]
    velocity = {k: ck.velocity.get(k, np.zeros_like(v)) for k, v in ck.params.arrays.items()}
    opt = dc.OptimizerState(o["momentum"], o["base_lr"], o["step"], velocity)
    history = [MetricsRecord(**r) for r in meta["history"]]
    return TrainState(ck.params, opt, meta["cycle"], meta["step"], None, history), cfg
