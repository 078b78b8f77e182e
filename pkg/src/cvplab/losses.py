"""CVP objective terms.

Per instance ``i``::

    l_ce_mu  = CE(f_cl(mu_i), y_i)
    l_ce_phi = mean_m CE(f_cl(phi_im), y_i)
    psi      = max(0, kappa - l_ce_phi)          (constant target)
    l_ant    = smooth_l1(sigma_i, psi)
    total    = l_ce_mu + alpha * l_ce_phi + l_ant

Batch values are means of the per-instance terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .model import CvpForward


def kappa(n_classes: int) -> float:
    """Expected cross-entropy of a uniform guesser over ``n_classes``."""
    if n_classes < 1:
        raise ValueError(f"kappa needs at least one class, got {n_classes}")
    return math.log(n_classes)


def samples_loss(label, logits_phi) -> dc.Tensor:
    """Mean sample cross-entropy.

    ``logits_phi`` is ``(M, C)`` with an integer label, or ``(N, M, C)`` with
    ``N`` labels; returns a scalar or ``(N,)``.
    """
    logits_phi = dc._wrap(logits_phi)
    shape = logits_phi.shape
    if len(shape) == 2:
        M, C = shape
        ce = dc.softmax_cross_entropy(logits_phi, np.full(M, int(label)))
        return dc.mean(ce)
    N, M, C = shape
    labels = np.asarray(label)
    if M < 1:
        raise ValueError("samples_loss needs at least one sample")
    flat = dc.reshape(logits_phi, (N * M, C))
    ce = dc.softmax_cross_entropy(flat, np.repeat(labels, M))
    return dc.mean(dc.reshape(ce, (N, M)), axis=1)


def psi_from_loss(l_ce_phi, kappa_value: float) -> np.ndarray:
    data = l_ce_phi.data if isinstance(l_ce_phi, dc.Tensor) else np.asarray(l_ce_phi, dtype=float)
    return np.maximum(0.0, kappa_value - data)


def psi(label, logits_phi, kappa_value: float) -> np.ndarray:
    """Regression target for sigma; detached from the graph."""
    return psi_from_loss(samples_loss(label, logits_phi), kappa_value)


def antagonistic_loss(sigma, psi_value) -> dc.Tensor:
    return dc.smooth_l1(sigma, dc.constant(psi_value))


@dataclass
class LossBundle:
    """Per-instance terms (tensors of shape ``(N,)``) and their batch means."""

    l_ce_mu: dc.Tensor
    l_ce_phi: dc.Tensor
    psi: np.ndarray
    l_ant: dc.Tensor
    total: dc.Tensor
    alpha: float
    loss: dc.Tensor  # batch mean of total; call backward on this

    def means(self) -> dict[str, float]:
        return {
            "l_ce_mu": float(self.l_ce_mu.data.mean()),
            "l_ce_phi": float(self.l_ce_phi.data.mean()),
            "psi": float(self.psi.mean()),
            "l_ant": float(self.l_ant.data.mean()),
            "total": float(self.loss.data),
        }


def total_loss(forward: CvpForward, labels, alpha: float, kappa_value: float,
               antagonistic: bool = True, psi_override: np.ndarray | None = None) -> LossBundle:
    """Compose the CVP objective on a batched forward.

    Disabled terms are reported as zeros.  ``psi_override`` freezes the
    sigma target (used when differentiating numerically).
    """
    labels = np.atleast_1d(np.asarray(labels))
    n = labels.shape[0]
    if forward.logits_mu.data.ndim == 1:
        raise dc.ShapeError("total_loss expects a batched forward")
    if forward.logits_phi is None and (alpha > 0 or antagonistic):
        raise ValueError("total_loss: samples are required when alpha > 0 or the antagonistic term is on")

    l_ce_mu = dc.softmax_cross_entropy(forward.logits_mu, labels)
    zeros = dc.constant(np.zeros(n))
    if forward.logits_phi is not None:
        l_ce_phi = samples_loss(labels, forward.logits_phi)
    else:
        l_ce_phi = zeros
    if antagonistic:
        target = psi_from_loss(l_ce_phi, kappa_value) if psi_override is None else np.asarray(psi_override)
        l_ant = antagonistic_loss(forward.sigma, target)
    else:
        target = np.zeros(n)
        l_ant = zeros

    total = l_ce_mu
    if alpha != 0:
        total = dc.add(total, dc.scale(l_ce_phi, alpha))
    if antagonistic:
        total = dc.add(total, l_ant)
    return LossBundle(l_ce_mu, l_ce_phi, target, l_ant, total, alpha, dc.mean(total))
