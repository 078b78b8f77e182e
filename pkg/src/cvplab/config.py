"""Experiment configuration files (YAML key-value trees).

Example::

    seed: 0
    output_dir: runs/moons
    ablation: full
    dataset:
      generator: {base: two-moons, rotation_deg: 30, noise: 0.1, samples_per_class: 500}
    model: {feature_dim: 16}
    train: {pretrain_cycles: 10, adapt_cycles: 30, base_lr: 0.01}
    analysis: {per_class: 5, K: 1000, mcd_T: 20, mcd_rate: 0.5}

A dataset may instead name CSV files::

    dataset:
      csv: {source: src.csv, target: tgt.csv, dim: 2, n_classes: 2}

``CVP_SEED`` and ``CVP_OUT`` in the environment override ``seed`` and
``output_dir``; nothing else is read from the environment.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .datagen import CsvSchema, DataError, DomainDataset, ShiftSpec, generate, load_csv
from .model import ModelConfig
from .trainer import Ablation, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class CsvSource:
    source: str
    target: str
    dim: int
    n_classes: int


@dataclass
class DatasetConfig:
    generator: ShiftSpec | None = None
    csv: CsvSource | None = None

    def __post_init__(self):
        if (self.generator is None) == (self.csv is None):
            raise ConfigError("dataset needs exactly one of 'generator' or 'csv'")

    @property
    def n_classes(self) -> int:
        return self.generator.n_classes if self.generator else self.csv.n_classes

    @property
    def dim(self) -> int:
        return 2 if self.generator else self.csv.dim

    def load(self, seed: int, base_dir: Path | None = None) -> tuple[DomainDataset, DomainDataset]:
        if self.generator is not None:
            return generate(self.generator, seed)
        base = base_dir or Path.cwd()
        c = self.csv
        src = load_csv(base / c.source, CsvSchema(c.dim, c.n_classes, "source"))
        tgt = load_csv(base / c.target, CsvSchema(c.dim, c.n_classes, "target"))
        return src, tgt


@dataclass
class AnalysisConfig:
    oscillation: bool = True
    per_class: int = 5
    K: int = 1000
    correlation: bool = True
    mcd_T: int = 20
    mcd_rate: float = 0.5
    figures: bool = True


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    ablation: str = "full"
    output_dir: str = "runs/default"
    seed: int = 0

    def resolved(self) -> "ExperimentConfig":
        """Propagate the global seed, ablation and dataset shape into sub-configs."""
        model = ModelConfig(**{**asdict(self.model), "seed": self.seed,
                               "n_classes": self.dataset.n_classes, "input_dim": self.dataset.dim})
        train = TrainConfig(**{**asdict(self.train), "seed": self.seed, "ablation": self.ablation})
        return ExperimentConfig(self.dataset, model, train, self.analysis, Ablation(self.ablation).value,
                                self.output_dir, self.seed)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["dataset"] = {k: v for k, v in d["dataset"].items() if v is not None}
        g = d["dataset"].get("generator")
        if g:
            g["translation"], g["scale"] = list(g["translation"]), list(g["scale"])
        d["model"]["extractor_hidden"] = list(d["model"]["extractor_hidden"])
        return d

    def dump(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))
        return path


def _build(cls, raw: Any, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def from_dict(raw: dict[str, Any], env: dict[str, str] | None = None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    raw = dict(raw)
    env = os.environ if env is None else env
    if "CVP_SEED" in env:
        raw["seed"] = env["CVP_SEED"]
    if "CVP_OUT" in env:
        raw["output_dir"] = env["CVP_OUT"]
    unknown = set(raw) - {f.name for f in fields(ExperimentConfig)}
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    ds_raw = raw.get("dataset")
    if not isinstance(ds_raw, dict):
        raise ConfigError("config needs a 'dataset' mapping")
    unknown = set(ds_raw) - {"generator", "csv"}
    if unknown:
        raise ConfigError(f"dataset: unknown keys {sorted(unknown)}")
    try:
        gen = _build(ShiftSpec, ds_raw["generator"], "dataset.generator") if "generator" in ds_raw else None
    except DataError as e:
        raise ConfigError(f"dataset.generator: {e}") from None
    csv_ = _build(CsvSource, ds_raw["csv"], "dataset.csv") if "csv" in ds_raw else None
    dataset = DatasetConfig(gen, csv_)
    try:
        seed = int(raw.get("seed", 0))
    except (TypeError, ValueError):
        raise ConfigError("seed must be an integer") from None
    ablation = raw.get("ablation", "full")
    try:
        Ablation(ablation)
    except ValueError:
        raise ConfigError(f"unknown ablation {ablation!r}") from None
    return ExperimentConfig(
        dataset=dataset,
        model=_build(ModelConfig, raw.get("model"), "model"),
        train=_build(TrainConfig, raw.get("train"), "train"),
        analysis=_build(AnalysisConfig, raw.get("analysis"), "analysis"),
        ablation=ablation,
        output_dir=str(raw.get("output_dir", "runs/default")),
        seed=seed,
    )


def load_config(path: str | Path, env: dict[str, str] | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: no such config file")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from None
    return from_dict(raw or {}, env)
