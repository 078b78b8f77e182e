"""Feature extractor, uncertainty head and classifier, plus checkpoints.

Parameters live in a flat ``dict[str, ndarray]``.  The forward functions
accept either that dict (plain evaluation, no graph) or a dict of
:func:`~cvplab.diffcore.parameter` leaves from :meth:`ModelParams.leaves`
(training, gradients recorded).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import diffcore as dc
from .sampler import NoiseSource, draw

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    input_dim: int = 2
    feature_dim: int = 16
    extractor_hidden: tuple[int, ...] = (64, 64)
    classifier_hidden: int = 32
    n_classes: int = 2
    sigma_floor: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        self.extractor_hidden = tuple(int(h) for h in self.extractor_hidden)
        sizes = (self.input_dim, self.feature_dim, self.classifier_hidden, *self.extractor_hidden)
        if any(int(s) < 1 for s in sizes):
            raise ValueError(f"all layer sizes must be >= 1, got {sizes}")
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.sigma_floor <= 0:
            raise ValueError("sigma_floor must be positive")

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        widths = [self.input_dim, *self.extractor_hidden, self.feature_dim]
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            shapes[f"cnn.{i}.W"] = (b, a)
            shapes[f"cnn.{i}.b"] = (b,)
        D = self.feature_dim
        shapes.update({
            "sigma.0.W": (D, D), "sigma.0.b": (D,),
            "sigma.1.W": (1, D), "sigma.1.b": (1,),
            "cl.0.W": (self.classifier_hidden, D), "cl.0.b": (self.classifier_hidden,),
            "cl.1.W": (self.n_classes, self.classifier_hidden), "cl.1.b": (self.n_classes,),
        })
        return shapes

    @property
    def n_extractor_layers(self) -> int:
        return len(self.extractor_hidden) + 1


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def leaves(self) -> dict[str, dc.Tensor]:
        return {k: dc.parameter(v, k) for k, v in self.arrays.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.arrays.values())


# output heads get a small gain so fresh logits sit near uniform
_HEAD_GAIN = 0.1


def init_model(cfg: ModelConfig) -> ModelParams:
    """He-uniform weights on ReLU-fed layers, zero biases."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x1A17]))
    heads = {"sigma.1.W", "cl.1.W"}
    arrays = {}
    for name, shape in cfg.layer_shapes().items():
        if name.endswith(".b"):
            arrays[name] = np.zeros(shape)
            continue
        fan_in = shape[1]
        if name in heads:
            limit = _HEAD_GAIN * np.sqrt(3.0 / fan_in)
        else:
            limit = np.sqrt(6.0 / fan_in)
        arrays[name] = rng.uniform(-limit, limit, size=shape)
    return ModelParams(cfg, arrays)


def extract_features(p: Mapping[str, Any], x, n_layers: int | None = None) -> dc.Tensor:
    """Multilayer perceptron; ReLU between layers, linear output."""
    if n_layers is None:
        n_layers = sum(1 for k in p if k.startswith("cnn.") and k.endswith(".W"))
    h = x
    for i in range(n_layers):
        h = dc.affine(h, p[f"cnn.{i}.W"], p[f"cnn.{i}.b"])
        if i < n_layers - 1:
            h = dc.relu(h)
    return h


def predict_sigma(p: Mapping[str, Any], mu, sigma_floor: float = 1e-6) -> dc.Tensor:
    h = dc.relu(dc.affine(mu, p["sigma.0.W"], p["sigma.0.b"]))
    raw = dc.affine(h, p["sigma.1.W"], p["sigma.1.b"])
    raw = dc.reshape(raw, raw.shape[:-1])
    return dc.clamp_min(dc.softplus(raw), sigma_floor)


def classify(p: Mapping[str, Any], feature, dropout_mask: np.ndarray | None = None) -> dc.Tensor:
    """Raw logits.  ``dropout_mask`` (already scaled) multiplies the hidden layer."""
    h = dc.relu(dc.affine(feature, p["cl.0.W"], p["cl.0.b"]))
    if dropout_mask is not None:
        h = _masked(h, dropout_mask)
    return dc.affine(h, p["cl.1.W"], p["cl.1.b"])


def _masked(h: dc.Tensor, mask: np.ndarray) -> dc.Tensor:
    def fn(g):
        h._accumulate(g * mask)

    return dc._node(h.data * mask, "dropout", (h,), fn)


@dataclass
class CvpForward:
    mu: dc.Tensor
    sigma: dc.Tensor
    samples: dc.Tensor | None
    logits_mu: dc.Tensor
    logits_phi: dc.Tensor | None

    @property
    def n_samples(self) -> int:
        return 0 if self.samples is None else self.samples.shape[-2]


def forward_cvp(p: Mapping[str, Any], x, M: int, noise: NoiseSource | None = None,
                sigma_floor: float = 1e-6, eps: np.ndarray | None = None) -> CvpForward:
    """mu -> sigma -> M reparameterized samples -> logits for mu and every sample.

    Batched over rows of ``x``; ``M = 0`` skips sampling.
    """
    if M < 0:
        raise ValueError(f"M must be >= 0, got {M}")
    mu = extract_features(p, x)
    sigma = predict_sigma(p, mu, sigma_floor)
    logits_mu = classify(p, mu)
    if M == 0:
        return CvpForward(mu, sigma, None, logits_mu, None)
    phi = draw(mu, sigma, M, noise, eps=eps)
    return CvpForward(mu, sigma, phi, logits_mu, classify(p, phi))


def logits_of(params: ModelParams, X: np.ndarray) -> np.ndarray:
    return classify(params.arrays, extract_features(params.arrays, X, params.config.n_extractor_layers)).data


def predict(params: ModelParams, X: np.ndarray) -> np.ndarray:
    return logits_of(params, X).argmax(axis=-1)


def sigma_of(params: ModelParams, X: np.ndarray) -> np.ndarray:
    mu = extract_features(params.arrays, X, params.config.n_extractor_layers)
    return predict_sigma(params.arrays, mu, params.config.sigma_floor).data


# -- checkpoints ------------------------------------------------------------

def _config_to_json(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["extractor_hidden"] = list(cfg.extractor_hidden)
    return d


def save_checkpoint(path: str | Path, params: ModelParams, velocity: Mapping[str, np.ndarray] | None = None,
                    meta: Mapping[str, Any] | None = None) -> Path:
    """Write an ``.npz`` container.  Arrays are stored raw, so float64 round-trips exactly."""
    path = Path(path)
    header = {
        "version": CHECKPOINT_VERSION,
        "model_config": _config_to_json(params.config),
        "meta": dict(meta or {}),
    }
    payload = {"__header__": np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)}
    for k, v in params.arrays.items():
        payload[f"param/{k}"] = v
    for k, v in (velocity or {}).items():
        payload[f"velocity/{k}"] = v
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


@dataclass
class Checkpoint:
    params: ModelParams
    velocity: dict[str, np.ndarray]
    meta: dict[str, Any]


def load_checkpoint(path: str | Path) -> Checkpoint:
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')!r}")
        cfg = ModelConfig(**header["model_config"])
        arrays = {k[6:]: z[k].copy() for k in z.files if k.startswith("param/")}
        velocity = {k[9:]: z[k].copy() for k in z.files if k.startswith("velocity/")}
    expected = cfg.layer_shapes()
    for name, shape in expected.items():
        if name not in arrays or arrays[name].shape != shape:
            raise ValueError(f"checkpoint parameter {name} missing or misshapen")
    arrays = {k: arrays[k] for k in expected}
    return Checkpoint(ModelParams(cfg, arrays), velocity, header["meta"])
