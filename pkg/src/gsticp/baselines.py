"""
Comparison localizers.

* SPA-TE-style: Gaussian messages from a first-order Taylor expansion of the
  range function at the current belief mean.
* SPAWN-style: particle beliefs weighted by the range likelihood of every
  neighbor. It never filters NLOS links.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .models import Belief3, as_position
from .sut import MessageBatch, SpatialMessage

TE_EPS = 1e-6
TE_MIN_PROJECTION = 1e-3


class DegenerateLinkError(ValueError):
    """Receiver mean coincides with the reference; no direction to linearize along."""


def spa_te_spatial_message(belief_i: Belief3, neighbor_mean, z: float, sigma: float,
                           neighbor_var=None, source: Optional[int] = None,
                           source_kind: str = "anchor") -> SpatialMessage:
    m = belief_i.mean
    ref = as_position(neighbor_mean)
    diff = m - ref
    r = float(np.linalg.norm(diff))
    if r <= TE_EPS:
        raise DegenerateLinkError("belief mean coincides with the neighbor mean")
    u = diff / r
    mean = m + u * (z - r)
    var = sigma ** 2 / np.maximum(u ** 2, TE_MIN_PROJECTION)
    if neighbor_var is not None:
        var = var + np.asarray(neighbor_var, dtype=float)
    return SpatialMessage(mean, var, source, source_kind)


def te_messages_batch(mi: np.ndarray, mj: np.ndarray, vj: np.ndarray, z: np.ndarray,
                      sigma: np.ndarray) -> Tuple[MessageBatch, np.ndarray]:
    """Vectorized ``spa_te_spatial_message``; returns (messages, degenerate mask).

    Rows flagged degenerate carry placeholder values and must be dropped.
    """
    base = mi - mj
    r = np.linalg.norm(base, axis=1)
    degenerate = r <= TE_EPS
    safe_r = np.where(degenerate, 1.0, r)
    u = base / safe_r[:, None]
    mean = mi + u * (z - r)[:, None]
    var = (sigma ** 2)[:, None] / np.maximum(u ** 2, TE_MIN_PROJECTION) + vj
    return MessageBatch(mean, var), degenerate


# ---------------------------------------------------------------------------
# Particle baseline
# ---------------------------------------------------------------------------

@dataclass
class ParticleBelief:
    particles: np.ndarray   # (n, 3)
    weights: np.ndarray     # (n,)

    def __post_init__(self):
        self.particles = np.asarray(self.particles, dtype=float).reshape(-1, 3)
        self.weights = np.asarray(self.weights, dtype=float)
        if len(self.weights) != len(self.particles):
            raise ValueError("one weight per particle")
        if np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must sum to 1")

    @classmethod
    def sample(cls, mean, var, n: int, rng: np.random.Generator) -> "ParticleBelief":
        pts = np.asarray(mean, dtype=float) + rng.standard_normal((n, 3)) * np.sqrt(var)
        return cls(pts, np.full(n, 1.0 / n))

    @property
    def n(self) -> int:
        return len(self.weights)

    def ess(self) -> float:
        return 1.0 / float(np.sum(self.weights ** 2))

    def variance(self) -> np.ndarray:
        mu = particle_mmse(self)
        return self.weights @ (self.particles - mu) ** 2


def particle_mmse(belief: ParticleBelief) -> np.ndarray:
    return belief.weights @ belief.particles


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = len(weights)
    positions = (rng.random() + np.arange(n)) / n
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.searchsorted(cum, positions, side="left")


@dataclass
class ParticleUpdate:
    belief: ParticleBelief
    resampled: bool
    diverged: bool


def spawn_particle_update(belief: ParticleBelief, neighbor_means: np.ndarray, z: np.ndarray,
                          sigma: np.ndarray, rng: np.random.Generator,
                          fallback: Optional[Tuple[np.ndarray, np.ndarray]] = None
                          ) -> ParticleUpdate:
    """Weight particles by the product of range likelihoods and resample if needed.

    ``neighbor_means`` (k, 3), ``z`` and ``sigma`` (k,) describe the k links
    into this agent. Weights are computed in the log domain. If every weight
    vanishes the particles are redrawn from ``fallback`` = (mean, var).
    """
    pts = belief.particles
    logw = np.log(np.maximum(belief.weights, 1e-300))
    nb = np.atleast_2d(np.asarray(neighbor_means, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), z.shape)
    if len(z):
        d = np.linalg.norm(pts[:, None, :] - nb[None, :, :], axis=2)   # (n, k)
        logw = logw - np.sum((z - d) ** 2 / (2.0 * sigma ** 2), axis=1)
    top = np.max(logw)
    if not np.isfinite(top):
        if fallback is None:
            raise ValueError("all particle weights vanished and no fallback was given")
        fresh = ParticleBelief.sample(fallback[0], fallback[1], belief.n, rng)
        return ParticleUpdate(fresh, resampled=False, diverged=True)
    w = np.exp(logw - top)
    w /= w.sum()
    out = ParticleBelief(pts, w)
    if out.ess() < out.n / 2.0:
        idx = systematic_resample(w, rng)
        out = ParticleBelief(pts[idx], np.full(out.n, 1.0 / out.n))
        return ParticleUpdate(out, resampled=True, diverged=False)
    return ParticleUpdate(out, resampled=False, diverged=False)


def particle_likelihood_weights(likelihoods: Sequence[float]) -> np.ndarray:
    """Normalize raw per-particle likelihood values."""
    w = np.asarray(likelihoods, dtype=float)
    total = w.sum()
    if not total > 0:
        raise ValueError("likelihoods sum to zero")
    return w / total
