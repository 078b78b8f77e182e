"""Reparameterized draws from N(mu, (sigma * I)^2)."""

from __future__ import annotations

import numpy as np

from .diffcore import ShapeError, Tensor, _node, _wrap


class NoiseSource:
    """Seeded standard-normal stream.

    ``NoiseSource.keyed(seed, cycle, step)`` derives an independent stream
    from any tuple of non-negative integers, so a run can be replayed from
    the middle without storing generator state.
    """

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    @classmethod
    def keyed(cls, *key: int) -> "NoiseSource":
        return cls(np.random.default_rng(np.random.SeedSequence([int(k) for k in key])))

    def normal(self, shape) -> np.ndarray:
        return self.rng.standard_normal(shape)


def draw(mu, sigma, M: int, noise: NoiseSource | None = None, eps: np.ndarray | None = None) -> Tensor:
    """Return ``mu + eps * sigma`` for M standard-normal ``eps`` per instance.

    ``mu`` is ``(D,)`` with scalar ``sigma`` (result ``(M, D)``) or ``(N, D)``
    with ``sigma`` of shape ``(N,)`` (result ``(N, M, D)``).  The noise is a
    constant of the graph: d phi / d mu = 1 and d phi / d sigma = eps.
    Pass ``eps`` directly to bypass the noise source.
    """
    mu, sigma = _wrap(mu), _wrap(sigma)
    if M < 1:
        raise ValueError(f"draw needs M >= 1, got {M}")
    if np.any(sigma.data <= 0):
        raise ValueError("draw needs sigma > 0")
    single = mu.data.ndim == 1
    mu2 = mu.data[None, :] if single else mu.data
    s2 = np.atleast_1d(sigma.data)
    n, d = mu2.shape
    if s2.shape != (n,):
        raise ShapeError(f"draw: sigma {sigma.shape} does not match mu {mu.shape}")
    if eps is None:
        if noise is None:
            raise ValueError("draw needs a noise source or explicit eps")
        eps = noise.normal((n, M, d))
    else:
        eps = np.asarray(eps, dtype=np.float64).reshape(n, M, d)
    out = mu2[:, None, :] + eps * s2[:, None, None]
    if single:
        out = out[0]

    def fn(g):
        g3 = g[None] if single else g
        if mu.requires_grad:
            gm = g3.sum(axis=1)
            mu._accumulate(gm[0] if single else gm)
        if sigma.requires_grad:
            gs = np.einsum("nmd,nmd->n", g3, eps)
            sigma._accumulate(gs.reshape(sigma.data.shape))

    return _node(out, "draw", (mu, sigma), fn)
