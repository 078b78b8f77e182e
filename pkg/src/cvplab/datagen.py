"""Synthetic source/target pairs, CSV interchange and mixed-domain batches."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

SOURCE = "source"
TARGET = "target"
DOMAINS = (SOURCE, TARGET)
BASES = ("two-moons", "blobs", "rings")


class DataError(ValueError):
    """Malformed dataset input."""


class LabelAccessError(PermissionError):
    """A training path asked for held-back target labels."""


@dataclass(frozen=True)
class Instance:
    features: np.ndarray
    label: int | None
    domain: str
    id: int


@dataclass
class DomainDataset:
    """Feature matrix plus labels, which are hidden from training when ``domain`` is target.

    Training code calls :meth:`training_labels`; evaluation code calls
    :meth:`eval_labels`.
    """

    features: np.ndarray
    _labels: np.ndarray | None
    domain: str
    n_classes: int
    ids: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {self.features.shape}")
        if self.domain not in DOMAINS:
            raise DataError(f"unknown domain {self.domain!r}")
        n = self.features.shape[0]
        if self.ids is None:
            self.ids = np.arange(n)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.shape != (n,) or len(np.unique(self.ids)) != n:
            raise DataError("ids must be unique, one per instance")
        if self._labels is not None:
            self._labels = np.asarray(self._labels, dtype=np.int64)
            if self._labels.shape != (n,):
                raise DataError("one label per instance required")
            if n and (self._labels.min() < 0 or self._labels.max() >= self.n_classes):
                raise DataError(f"labels must lie in [0, {self.n_classes})")
        elif self.domain == SOURCE:
            raise DataError("source instances must carry labels")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def has_labels(self) -> bool:
        return self._labels is not None

    def training_labels(self) -> np.ndarray:
        if self.domain != SOURCE:
            raise LabelAccessError("target ground truth is for evaluation only")
        return self._labels

    def eval_labels(self) -> np.ndarray | None:
        return self._labels

    def instances(self) -> Iterator[Instance]:
        for i in range(len(self)):
            label = None if self._labels is None else int(self._labels[i])
            yield Instance(self.features[i], label, self.domain, int(self.ids[i]))

    def with_labels(self, labels: np.ndarray | None) -> "DomainDataset":
        return DomainDataset(self.features, labels, self.domain, self.n_classes, self.ids, dict(self.provenance))


@dataclass
class ShiftSpec:
    """Base distribution plus the transform that turns source into target.

    The transform is ``target = R(rotation) @ (x * scale) + translation``
    around the origin; base generators are centred there.
    """

    base: str = "two-moons"
    n_classes: int = 2
    samples_per_class: int = 500
    noise: float = 0.1
    rotation_deg: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)
    scale: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        self.translation = tuple(float(t) for t in self.translation)
        self.scale = tuple(float(s) for s in self.scale)
        if self.base not in BASES:
            raise DataError(f"unknown base distribution {self.base!r}; choose from {BASES}")
        if len(self.translation) != 2 or len(self.scale) != 2:
            raise DataError("translation and scale need two components")
        if any(s == 0 for s in self.scale):
            raise DataError("scale components must be non-zero")
        if self.samples_per_class < 1:
            raise DataError("samples_per_class must be >= 1")
        if self.noise < 0:
            raise DataError("noise must be >= 0")
        if self.base == "two-moons" and self.n_classes != 2:
            raise DataError("two-moons has exactly 2 classes")
        if self.n_classes < 2:
            raise DataError("need at least 2 classes")

    @property
    def is_identity(self) -> bool:
        return self.rotation_deg == 0 and self.translation == (0.0, 0.0) and self.scale == (1.0, 1.0)

    def transform(self, X: np.ndarray) -> np.ndarray:
        a = math.radians(self.rotation_deg)
        R = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        return (X * np.asarray(self.scale)) @ R.T + np.asarray(self.translation)


def _two_moons(n: int, noise: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    t0 = rng.uniform(0.0, math.pi, n)
    t1 = rng.uniform(0.0, math.pi, n)
    upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    lower = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    X = np.concatenate([upper, lower]) - np.array([0.5, 0.25])
    X += noise * rng.standard_normal(X.shape)
    return X, np.repeat([0, 1], n)


def _blobs(k: int, n: int, noise: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    # class centres on a ring of radius 2, noise is the per-blob std
    angles = 2 * math.pi * np.arange(k) / k
    centres = 2.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    y = np.repeat(np.arange(k), n)
    X = centres[y] + noise * rng.standard_normal((k * n, 2))
    return X, y


def _rings(k: int, n: int, noise: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    y = np.repeat(np.arange(k), n)
    radius = (y + 1).astype(float)
    theta = rng.uniform(0.0, 2 * math.pi, k * n)
    X = radius[:, None] * np.stack([np.cos(theta), np.sin(theta)], axis=1)
    X += noise * rng.standard_normal(X.shape)
    return X, y


def _sample_base(spec: ShiftSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if spec.base == "two-moons":
        return _two_moons(spec.samples_per_class, spec.noise, rng)
    if spec.base == "blobs":
        return _blobs(spec.n_classes, spec.samples_per_class, spec.noise, rng)
    return _rings(spec.n_classes, spec.samples_per_class, spec.noise, rng)


def generate(spec: ShiftSpec, seed: int) -> tuple[DomainDataset, DomainDataset]:
    """Balanced source set from the base distribution, target from its transform."""
    ss = np.random.SeedSequence([int(seed), 0xDA7A])
    rng_src, rng_tgt, rng_perm = (np.random.default_rng(s) for s in ss.spawn(3))
    Xs, ys = _sample_base(spec, rng_src)
    Xt, yt = _sample_base(spec, rng_tgt)
    Xt = spec.transform(Xt)
    ps, pt = rng_perm.permutation(len(ys)), rng_perm.permutation(len(yt))
    prov = {"spec": asdict(spec), "seed": int(seed)}
    source = DomainDataset(Xs[ps], ys[ps], SOURCE, spec.n_classes, provenance=prov)
    target = DomainDataset(Xt[pt], yt[pt], TARGET, spec.n_classes, provenance=prov)
    return source, target


# -- CSV --------------------------------------------------------------------

@dataclass
class CsvSchema:
    dim: int
    n_classes: int
    domain: str
    has_label: bool | None = None  # None: infer from header


def save_csv(path: str | Path, ds: DomainDataset, include_labels: bool = True) -> Path:
    """Header ``f0..f{d-1}[,label],domain``; floats written with ``repr`` so they round-trip."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    labels = ds.eval_labels() if include_labels else None
    header = [f"f{j}" for j in range(ds.dim)] + (["label"] if labels is not None else []) + ["domain"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(ds)):
            row = [repr(float(v)) for v in ds.features[i]]
            if labels is not None:
                row.append(str(int(labels[i])))
            row.append(ds.domain)
            w.writerow(row)
    return path


def load_csv(path: str | Path, schema: CsvSchema) -> DomainDataset:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    feat_cols = [f"f{j}" for j in range(schema.dim)]
    if header[: schema.dim] != feat_cols:
        raise DataError(f"{path}:1: expected feature columns {','.join(feat_cols)}")
    rest = header[schema.dim:]
    if not set(rest) <= {"label", "domain"} or len(set(rest)) != len(rest):
        raise DataError(f"{path}:1: unexpected columns {rest}")
    label_col = header.index("label") if "label" in header else None
    domain_col = header.index("domain") if "domain" in header else None
    if schema.has_label and label_col is None:
        raise DataError(f"{path}:1: label column required")
    if schema.has_label is False:
        label_col = None

    feats, labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            feats.append([float(v) for v in row[: schema.dim]])
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric feature value") from None
        if not all(math.isfinite(v) for v in feats[-1]):
            raise DataError(f"{path}:{lineno}: non-finite feature value")
        if domain_col is not None and row[domain_col].strip() != schema.domain:
            raise DataError(f"{path}:{lineno}: domain {row[domain_col]!r}, expected {schema.domain!r}")
        if label_col is not None:
            try:
                lab = int(row[label_col])
            except ValueError:
                raise DataError(f"{path}:{lineno}: label must be an integer") from None
            if not 0 <= lab < schema.n_classes:
                raise DataError(f"{path}:{lineno}: label {lab} outside [0, {schema.n_classes})")
            labels.append(lab)
    X = np.array(feats, dtype=np.float64).reshape(-1, schema.dim)
    y = np.array(labels, dtype=np.int64) if label_col is not None else None
    return DomainDataset(X, y, schema.domain, schema.n_classes, provenance={"csv": str(path)})


# -- batches ----------------------------------------------------------------

@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray
    is_target: np.ndarray
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def source_batch(source: DomainDataset, B: int, rng: np.random.Generator) -> Batch:
    if len(source) == 0:
        raise DataError("empty source set")
    idx = rng.choice(len(source), size=min(B, len(source)), replace=False)
    return Batch(source.features[idx], source.training_labels()[idx], np.zeros(len(idx), bool), source.ids[idx])


def pseudo_label_array(target: DomainDataset, pseudo_labels: Mapping[int, int] | np.ndarray) -> np.ndarray:
    """Align a pseudo-label map (id -> class) with the target's row order."""
    if isinstance(pseudo_labels, np.ndarray):
        arr = np.asarray(pseudo_labels, dtype=np.int64)
        if arr.shape != (len(target),):
            raise DataError("pseudo-label array must have one entry per target instance")
    else:
        try:
            arr = np.array([pseudo_labels[int(i)] for i in target.ids], dtype=np.int64)
        except KeyError as e:
            raise DataError(f"missing pseudo-label for target id {e.args[0]}") from None
    if len(arr) and (arr.min() < 0 or arr.max() >= target.n_classes):
        raise DataError("pseudo-label outside the class range")
    return arr


def mixed_batch(source: DomainDataset, target: DomainDataset, pseudo_labels, B: int,
                rng: np.random.Generator) -> Batch:
    """B/2 labelled source rows followed by B/2 pseudo-labelled target rows."""
    if B % 2:
        raise DataError(f"mixed batch size must be even, got {B}")
    half = B // 2
    if len(source) < half or len(target) < half:
        raise DataError("domain smaller than half a batch")
    pl = pseudo_label_array(target, pseudo_labels)
    si = rng.choice(len(source), size=half, replace=False)
    ti = rng.choice(len(target), size=half, replace=False)
    return Batch(
        np.concatenate([source.features[si], target.features[ti]]),
        np.concatenate([source.training_labels()[si], pl[ti]]),
        np.repeat([False, True], half),
        np.concatenate([source.ids[si], target.ids[ti]]),
    )
