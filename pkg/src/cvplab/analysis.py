"""Boundary smoothness, uncertainty-measure correlation and sigma trajectories."""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datagen import DataError, DomainDataset
from .model import ModelParams, classify, extract_features, predict_sigma
from .trainer import MetricsRecord, read_metrics

MEASURES = ("L", "L_GT", "L_diff", "MCD_mu", "-MCD_sigma")


def _features(params: ModelParams, X: np.ndarray) -> np.ndarray:
    return extract_features(params.arrays, X, params.config.n_extractor_layers).data


def _classes(params: ModelParams, feats: np.ndarray) -> np.ndarray:
    return classify(params.arrays, feats).data.argmax(axis=-1)


# -- oscillation of classification -------------------------------------------

@dataclass
class InterpolationPath:
    start: np.ndarray
    end: np.ndarray
    K: int

    def points(self) -> np.ndarray:
        """K subfeatures, both endpoints included exactly."""
        if self.K < 2:
            raise ValueError("interpolation needs K >= 2")
        if self.start.shape != self.end.shape:
            raise ValueError("endpoint shapes differ")
        t = (np.arange(self.K) / (self.K - 1))[:, None]
        return (1.0 - t) * self.start + t * self.end


def count_changes(classes: np.ndarray) -> int:
    return int(np.count_nonzero(classes[..., 1:] != classes[..., :-1]))


def _ordered(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # canonical direction so that swapping endpoints evaluates the identical path
    return (a, b) if a.tobytes() <= b.tobytes() else (b, a)


def oscillation(params: ModelParams, mu_i, mu_j, K: int = 1000) -> float:
    """Argmax changes between consecutive subfeatures, divided by K."""
    mu_i, mu_j = np.asarray(mu_i, float), np.asarray(mu_j, float)
    D = params.config.feature_dim
    if mu_i.shape != (D,) or mu_j.shape != (D,):
        raise ValueError(f"features must have shape ({D},)")
    a, b = _ordered(mu_i, mu_j)
    path = InterpolationPath(a, b, K).points()
    return count_changes(_classes(params, path)) / K


def select_per_class(labels: np.ndarray, n_classes: int, per_class: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x05C1]))
    picks = []
    for c in range(n_classes):
        pool = np.flatnonzero(labels == c)
        if len(pool) < per_class:
            raise DataError(f"class {c} has {len(pool)} instances, need {per_class}")
        picks.append(np.sort(rng.choice(pool, per_class, replace=False)))
    return np.concatenate(picks) if picks else np.zeros(0, int)


def oscillation_suite(params: ModelParams, dataset: DomainDataset, per_class: int = 5, K: int = 1000,
                      seed: int = 0, chunk_rows: int = 200_000) -> float:
    """Sum of :func:`oscillation` over unordered distinct pairs of sampled instances."""
    labels = dataset.eval_labels()
    if labels is None:
        raise DataError("oscillation suite needs evaluation labels")
    idx = select_per_class(labels, dataset.n_classes, per_class, seed)
    mu = _features(params, dataset.features[idx])
    pairs = list(itertools.combinations(range(len(idx)), 2))
    if not pairs:
        return 0.0
    t = (np.arange(K) / (K - 1))[None, :, None]
    per_chunk = max(1, chunk_rows // K)
    changes = 0
    for s in range(0, len(pairs), per_chunk):
        block = pairs[s:s + per_chunk]
        ends = [_ordered(mu[i], mu[j]) for i, j in block]
        a = np.stack([e[0] for e in ends])[:, None, :]
        b = np.stack([e[1] for e in ends])[:, None, :]
        paths = (1.0 - t) * a + t * b
        cls = _classes(params, paths.reshape(-1, mu.shape[1])).reshape(len(block), K)
        changes += count_changes(cls)
    return changes / K


def n_pairs(n_classes: int, per_class: int) -> int:
    return math.comb(n_classes * per_class, 2)


# -- Monte-Carlo dropout ----------------------------------------------------

def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def mcd_predict(params: ModelParams, x, T: int = 20, dropout_rate: float = 0.5,
                rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Averaged-softmax confidence and its spread under T dropout masks.

    Masks act on the classifier hidden layer (inverted dropout).  Returns
    ``(MCD_mu, MCD_sigma)`` per row of ``x`` (scalars for a single row).
    """
    if T < 2:
        raise ValueError("mcd_predict needs T >= 2")
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError(f"dropout_rate must be in [0, 1), got {dropout_rate}")
    x = np.asarray(x, float)
    single = x.ndim == 1
    X = x[None] if single else x
    rng = rng if rng is not None else np.random.default_rng(0)
    mu = _features(params, X)
    if dropout_rate == 0.0:
        # every pass is the deterministic classifier
        probs = _softmax(classify(params.arrays, mu).data)
        mcd_mu, mcd_sigma = probs.max(axis=1), np.zeros(len(X))
        return (mcd_mu[0], mcd_sigma[0]) if single else (mcd_mu, mcd_sigma)
    H = params.config.classifier_hidden
    keep = 1.0 - dropout_rate
    masks = (rng.random((T, len(X), H)) < keep) / keep
    logits = classify(params.arrays, np.broadcast_to(mu, (T, *mu.shape)), dropout_mask=masks).data
    probs = _softmax(logits)
    avg = probs.mean(axis=0)
    top = avg.argmax(axis=1)
    rows = np.arange(len(X))
    mcd_mu = avg[rows, top]
    mcd_sigma = probs[:, rows, top].std(axis=0)
    if single:
        return mcd_mu[0], mcd_sigma[0]
    return mcd_mu, mcd_sigma


# -- correlation --------------------------------------------------------------

class UndefinedCorrelation(ValueError):
    pass


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Centred two-pass Pearson coefficient, clipped to [-1, 1]."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("pearson needs two equal-length series of at least 2 values")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelation("zero variance")
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


@dataclass
class Correlation:
    r: float | None
    status: str = "ok"

    def to_json(self) -> dict:
        return {"r": self.r, "status": self.status}


def correlation_of(x, y) -> Correlation:
    try:
        return Correlation(pearson(x, y))
    except UndefinedCorrelation as e:
        return Correlation(None, f"undefined: {e}")


@dataclass
class UncertaintyReport:
    sigma: np.ndarray
    L: np.ndarray
    L_GT: np.ndarray | None
    L_diff: np.ndarray
    MCD_mu: np.ndarray
    MCD_sigma: np.ndarray
    correlations: dict[str, Correlation] = field(default_factory=dict)

    def series(self) -> dict[str, np.ndarray | None]:
        return {"L": self.L, "L_GT": self.L_GT, "L_diff": self.L_diff,
                "MCD_mu": self.MCD_mu, "-MCD_sigma": -self.MCD_sigma}

    def to_json(self) -> dict:
        return {
            "n_instances": int(len(self.sigma)),
            "sigma_median": float(np.median(self.sigma)),
            "correlations": {k: v.to_json() for k, v in self.correlations.items()},
        }

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        cols = ["sigma", "L", "L_GT", "L_diff", "MCD_mu", "MCD_sigma"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", *cols])
            for i in range(len(self.sigma)):
                vals = [self.sigma[i], self.L[i], None if self.L_GT is None else self.L_GT[i],
                        self.L_diff[i], self.MCD_mu[i], self.MCD_sigma[i]]
                w.writerow([i, *("" if v is None else repr(float(v)) for v in vals)])
        return path


def correlate(params: ModelParams, dataset: DomainDataset, T: int = 20, dropout_rate: float = 0.5,
              rng: np.random.Generator | None = None) -> UncertaintyReport:
    """sigma against max logit, ground-truth logit, top-two gap and MCD confidence/spread.

    Logits are taken as raw signed values.  The MCD spread is negated before
    correlating so that every measure grows with certainty.
    """
    X = dataset.features
    mu = _features(params, X)
    sigma = predict_sigma(params.arrays, mu, params.config.sigma_floor).data
    logits = classify(params.arrays, mu).data
    top2 = np.sort(logits, axis=1)[:, -2:]
    L, L_diff = top2[:, 1], top2[:, 1] - top2[:, 0]
    labels = dataset.eval_labels()
    L_GT = None if labels is None else logits[np.arange(len(X)), labels]
    mcd_mu, mcd_sigma = mcd_predict(params, X, T, dropout_rate, rng)
    rep = UncertaintyReport(sigma, L, L_GT, L_diff, mcd_mu, mcd_sigma)
    for name, values in rep.series().items():
        rep.correlations[name] = (Correlation(None, "labels unavailable") if values is None
                                  else correlation_of(sigma, values))
    return rep


# -- sigma trajectory -------------------------------------------------------------

@dataclass
class SigmaTrajectory:
    cycles: np.ndarray
    sigma_src: np.ndarray
    sigma_tgt: np.ndarray
    adapt_start: int | None  # row index of the first adaptation cycle
    pre_level: float
    drop_detected: bool
    drop_cycle: int | None
    recovery_detected: bool
    target_min_cycle: int | None
    target_min_fraction: float | None  # position of the minimum within the adaptation phase
    final_gap: float | None

    def to_json(self) -> dict:
        return {
            "adapt_start_cycle": None if self.adapt_start is None else int(self.cycles[self.adapt_start]),
            "pre_level": self.pre_level,
            "drop_detected": self.drop_detected,
            "drop_cycle": self.drop_cycle,
            "recovery_detected": self.recovery_detected,
            "target_min_cycle": self.target_min_cycle,
            "target_min_fraction": self.target_min_fraction,
            "final_source_minus_target": self.final_gap,
        }


def sigma_trajectory(history: Sequence[MetricsRecord] | str | Path, tol: float = 0.05) -> SigmaTrajectory:
    """Summarise per-cycle batch-median sigma.

    Pretraining rows have no target sigma, so the adaptation phase starts
    at the first row that has one.  A drop is flagged at the first
    adaptation cycle whose target (or source) sigma falls more than ``tol``
    (relative) below the last pretraining source sigma.
    """
    if isinstance(history, (str, Path)):
        history = read_metrics(history)
    if not history:
        raise DataError("empty metrics log")
    cycles = np.array([r.cycle for r in history])
    src = np.array([r.sigma_src_median for r in history], float)
    tgt = np.array([r.sigma_tgt_median for r in history], float)
    if np.isnan(src).any():
        raise DataError("metrics log lacks source sigma values")
    has_tgt = np.flatnonzero(~np.isnan(tgt))
    adapt_start = int(has_tgt[0]) if len(has_tgt) else None
    if adapt_start is not None and np.isnan(tgt[adapt_start:]).any():
        raise DataError("target sigma missing inside the adaptation phase")
    pre_level = float(src[adapt_start - 1]) if adapt_start else float(src[0])

    drop_cycle = None
    min_cycle = min_frac = gap = None
    recovery = False
    if adapt_start is not None:
        a_src, a_tgt = src[adapt_start:], tgt[adapt_start:]
        low = np.minimum(a_src, a_tgt) < (1.0 - tol) * pre_level
        if low.any():
            drop_cycle = int(cycles[adapt_start + int(np.argmax(low))])
        k = int(np.argmin(a_tgt))
        min_cycle = int(cycles[adapt_start + k])
        min_frac = k / len(a_tgt)
        recovery = bool(a_tgt[-1] > (1.0 + tol) * a_tgt[k])
        gap = float(a_src[-1] - a_tgt[-1])
    return SigmaTrajectory(cycles, src, tgt, adapt_start, pre_level, drop_cycle is not None, drop_cycle,
                           recovery, min_cycle, min_frac, gap)


def write_json(path: str | Path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n")
    return path
