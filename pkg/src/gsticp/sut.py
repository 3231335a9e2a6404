"""
Scaled-unscented-transform message computation for the cooperative localizer.

Beliefs are diagonal Gaussians, so each sigma set holds the mean plus one
symmetric pair per axis. Two message modes are available:

``default``
    Unscented measurement update. Sigma points pass through the range
    function; the innovation and cross-covariances give a per-coordinate
    posterior, and the message is posterior / belief. Fusing that message
    with the belief reproduces the posterior.
``literal``
    Moments of the likelihood values g_a used directly as a Gaussian over
    each coordinate. This mode is kept only for audit and comparison; the
    resulting "positions" lie in (0, 1].

Scalar functions take one link and are easy to read. ``*_batch`` functions
vectorize over many links and drive the network simulator; tests check that
the two agree.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from .models import Belief3, MobilityParams, as_position

DIM = 3
N_SIGMA = 2 * DIM + 1
VARIANCE_FLOOR = 1e-12
# quotient precision below this fraction of the belief precision is treated as zero
QUOTIENT_REL_EPS = 1e-9
FALLBACK_INFLATION = 10.0

MODES = ("default", "literal")


@dataclass(frozen=True)
class SutParams:
    alpha: float = 0.5
    beta: float = 2.0
    n: int = DIM

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.n != DIM:
            raise ValueError("only n = 3 is supported")

    @property
    def lam(self) -> float:
        return self.n * (self.alpha ** 2 - 1.0)

    @property
    def spread(self) -> float:
        """n + lambda, the scale applied to the covariance."""
        return self.n + self.lam


@dataclass(frozen=True)
class SigmaSet:
    points: np.ndarray        # (7, 3)
    wm: np.ndarray            # (7,)
    wc: np.ndarray            # (7,)

    def mean(self) -> np.ndarray:
        return self.wm @ self.points

    def covariance(self) -> np.ndarray:
        dev = self.points - self.points[0]
        return (self.wc[:, None] * dev).T @ dev


@dataclass(frozen=True)
class UnscentedMoments:
    mean: float
    variance: float


@dataclass(frozen=True)
class SpatialMessage:
    mean: np.ndarray
    var: np.ndarray
    source: Optional[int] = None
    source_kind: str = "anchor"
    fallback: Tuple[bool, bool, bool] = (False, False, False)

    def __post_init__(self):
        v = np.asarray(self.var, dtype=float)
        if not np.all(v > 0):
            raise ValueError(f"message variances must be > 0, got {v}")
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "var", v)

    @property
    def n_fallbacks(self) -> int:
        return int(sum(self.fallback))


@dataclass(frozen=True)
class TemporalMessage:
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.var, dtype=float)
        if not np.all(v > 0):
            raise ValueError("temporal message variances must be > 0")
        object.__setattr__(self, "mean", as_position(self.mean))
        object.__setattr__(self, "var", v)

    @classmethod
    def from_belief(cls, belief: Belief3) -> "TemporalMessage":
        return cls(belief.mean, belief.var)

    def as_belief(self) -> Belief3:
        return Belief3(self.mean, self.var)


# ---------------------------------------------------------------------------
# Sigma points and moments
# ---------------------------------------------------------------------------

def sigma_weights(params: SutParams) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and covariance weights of the 7-point scaled sigma set."""
    k = params.spread
    wm = np.full(N_SIGMA, 1.0 / (2.0 * k))
    wc = wm.copy()
    wm[0] = params.lam / k
    wc[0] = params.lam / k + (1.0 - params.alpha ** 2 + params.beta)
    return wm, wc


def generate_sigma_points(belief: Belief3, params: SutParams) -> SigmaSet:
    if belief.dirac or not np.all(belief.var > 0):
        raise ValueError("sigma points need strictly positive variances")
    # diagonal covariance: the matrix square root has columns sqrt(k * var_c) e_c
    offsets = np.diag(np.sqrt(params.spread * belief.var))
    m = belief.mean
    points = np.vstack([m, m + offsets, m - offsets])
    wm, wc = sigma_weights(params)
    return SigmaSet(points, wm, wc)


def transform_range(sigma: SigmaSet, ref, z: Optional[float] = None,
                    noise_std: Optional[float] = None, literal: bool = False) -> np.ndarray:
    """Propagate each sigma point: range to ``ref`` or, in literal mode, g_a."""
    d = np.linalg.norm(sigma.points - as_position(ref), axis=1)
    if not literal:
        return d
    if z is None or noise_std is None:
        raise ValueError("literal mode needs z and noise_std")
    return np.exp(-((z - d) ** 2) / (2.0 * noise_std ** 2))


def unscented_moments(values: Sequence[float], weights: Tuple[np.ndarray, np.ndarray]
                      ) -> UnscentedMoments:
    g = np.asarray(values, dtype=float)
    wm, wc = weights
    mean = float(wm @ g)
    var = float(wc @ (g - mean) ** 2)
    return UnscentedMoments(mean, max(var, 0.0))


# ---------------------------------------------------------------------------
# Spatial messages (scalar reference path)
# ---------------------------------------------------------------------------

def projected_variance(belief_mean, neighbor_mean, neighbor_var) -> float:
    """Neighbor position variance along the link direction."""
    nv = np.asarray(neighbor_var, dtype=float)
    if not np.any(nv):
        return 0.0
    u = as_position(belief_mean) - as_position(neighbor_mean)
    r = np.linalg.norm(u)
    if r == 0:
        return float(nv.mean())
    u = u / r
    return float(u ** 2 @ nv)


def _quotient(m, s2, m_post, s2_post, innov_gain_cov):
    """Per-coordinate Gaussian posterior / prior, with fallback flags."""
    m_out = np.empty(3)
    v_out = np.empty(3)
    flags = []
    for c in range(3):
        kc = innov_gain_cov[c]  # K_c * C_c = s2 - s2_post
        ok = s2_post[c] > 0 and kc / s2_post[c] > QUOTIENT_REL_EPS
        if ok:
            prec = kc / (s2[c] * s2_post[c])
            v_out[c] = 1.0 / prec
            m_out[c] = m[c] + (m_post[c] - m[c]) / (s2_post[c] * prec)
        else:
            v_out[c] = FALLBACK_INFLATION * s2[c]
            m_out[c] = m[c]
        flags.append(not ok)
    return m_out, v_out, tuple(flags)


def sut_spatial_message(belief_i: Belief3, neighbor_mean, neighbor_var, z: float,
                        sigma: float, params: SutParams = SutParams(),
                        mode: str = "default", source: Optional[int] = None,
                        source_kind: str = "anchor") -> SpatialMessage:
    """Message from one range factor to agent i's position.

    ``neighbor_var`` is the neighbor's per-coordinate variance, or ``None``
    / zeros for a Dirac broadcast.
    """
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    nb_mean = as_position(neighbor_mean)
    nb_var = np.zeros(3) if neighbor_var is None else np.asarray(neighbor_var, dtype=float)
    sig = generate_sigma_points(belief_i, params)
    weights = (sig.wm, sig.wc)

    if mode == "literal":
        g = transform_range(sig, nb_mean, z=z, noise_std=sigma, literal=True)
        mom = unscented_moments(g, weights)
        var = max(mom.variance, VARIANCE_FLOOR)
        msg = SpatialMessage(np.full(3, mom.mean), np.full(3, var), source, source_kind)
        if source_kind == "agent" and np.all(nb_var > 0):
            msg = moderate_agent_message(msg, Belief3(nb_mean, nb_var), mode="literal")
        return msg

    d = transform_range(sig, nb_mean)
    mom = unscented_moments(d, weights)
    z_hat = mom.mean
    S = mom.variance + sigma ** 2 + projected_variance(belief_i.mean, nb_mean, nb_var)
    m = belief_i.mean
    s2 = belief_i.var
    dev = d - z_hat
    cross = (sig.wc * dev) @ (sig.points - m)          # (3,)
    gain = cross / S
    m_post = m + gain * (z - z_hat)
    reduction = gain * cross
    s2_post = s2 - reduction
    mean, var, flags = _quotient(m, s2, m_post, s2_post, reduction)
    return SpatialMessage(mean, var, source, source_kind, flags)


def moderate_agent_message(msg: SpatialMessage, neighbor_belief: Belief3,
                           mode: str = "default") -> SpatialMessage:
    """Account for the uncertainty of an agent neighbor.

    Default mode convolves: the neighbor variance is added to the message
    variance. Literal mode takes the precision-weighted product of the
    message and the neighbor belief, coordinate by coordinate.
    """
    if mode == "default":
        return SpatialMessage(msg.mean, msg.var + neighbor_belief.var, msg.source,
                              msg.source_kind, msg.fallback)
    if mode != "literal":
        raise ValueError(f"unknown mode {mode!r}")
    if neighbor_belief.dirac:
        raise ValueError("literal moderation needs a non-Dirac neighbor belief")
    prec = 1.0 / msg.var + 1.0 / neighbor_belief.var
    var = 1.0 / prec
    mean = var * (msg.mean / msg.var + neighbor_belief.mean / neighbor_belief.var)
    return SpatialMessage(mean, var, msg.source, msg.source_kind, msg.fallback)


# ---------------------------------------------------------------------------
# Temporal message, fusion, estimate
# ---------------------------------------------------------------------------

def temporal_prediction(prev_belief: Belief3, internal_z,
                        mobility: MobilityParams) -> TemporalMessage:
    """Shift by the odometry displacement; inflate by step and odometry noise."""
    dz = np.asarray(internal_z, dtype=float).reshape(3)
    q = mobility.step_std ** 2 / 3.0 + mobility.odometry_std ** 2
    return TemporalMessage(prev_belief.mean + dz, prev_belief.var + q)


def fuse_belief(temporal: TemporalMessage, spatial: Iterable[SpatialMessage]) -> Belief3:
    prec = 1.0 / temporal.var
    info = temporal.mean * prec
    for msg in spatial:
        p = 1.0 / msg.var
        prec = prec + p
        info = info + msg.mean * p
    var = 1.0 / prec
    return Belief3(info * var, var)


def gaussian_divide(belief: Belief3, msg: SpatialMessage) -> Belief3:
    """Remove a previously fused message from a belief."""
    prec = 1.0 / belief.var - 1.0 / msg.var
    if not np.all(prec > 0):
        raise ValueError("quotient is not a proper Gaussian")
    var = 1.0 / prec
    return Belief3(var * (belief.mean / belief.var - msg.mean / msg.var), var)


def mmse_estimate(belief: Belief3) -> np.ndarray:
    return np.array(belief.mean, dtype=float)


# ---------------------------------------------------------------------------
# Vectorized paths used by the network simulator
# ---------------------------------------------------------------------------

@dataclass
class MessageBatch:
    mean: np.ndarray                 # (L, 3)
    var: np.ndarray                  # (L, 3)
    fallback: np.ndarray = field(default=None)  # (L, 3) bool

    def __post_init__(self):
        if self.fallback is None:
            self.fallback = np.zeros(self.mean.shape, dtype=bool)


def sigma_points_batch(mean: np.ndarray, var: np.ndarray, params: SutParams) -> np.ndarray:
    """(L, 7, 3) sigma points for L diagonal beliefs."""
    L = len(mean)
    off = np.sqrt(params.spread * var)
    pts = np.repeat(mean[:, None, :], N_SIGMA, axis=1)
    idx = np.arange(3)
    pts[:, 1 + idx, idx] += off
    pts[:, 4 + idx, idx] -= off
    return pts.reshape(L, N_SIGMA, 3)


def sut_messages_batch(mi: np.ndarray, vi: np.ndarray, mj: np.ndarray, vj: np.ndarray,
                       z: np.ndarray, sigma: np.ndarray, params: SutParams,
                       mode: str = "default", agent_sender: Optional[np.ndarray] = None
                       ) -> MessageBatch:
    """Vectorized ``sut_spatial_message`` over L links.

    ``mi, vi`` are receiver beliefs, ``mj, vj`` sender broadcasts (vj = 0
    for Dirac senders). ``agent_sender`` marks senders whose broadcast is an
    agent belief (used only by literal mode).
    """
    L = len(z)
    if L == 0:
        return MessageBatch(np.zeros((0, 3)), np.ones((0, 3)))
    wm, wc = sigma_weights(params)
    pts = sigma_points_batch(mi, vi, params)
    d = np.linalg.norm(pts - mj[:, None, :], axis=2)            # (L, 7)

    if mode == "literal":
        g = np.exp(-((z[:, None] - d) ** 2) / (2.0 * sigma[:, None] ** 2))
        eh = g @ wm
        vh = np.maximum(np.maximum(((g - eh[:, None]) ** 2) @ wc, 0.0), VARIANCE_FLOOR)
        mean = np.repeat(eh[:, None], 3, axis=1)
        var = np.repeat(vh[:, None], 3, axis=1)
        if agent_sender is not None:
            sel = agent_sender & np.all(vj > 0, axis=1)
            if np.any(sel):
                prec = 1.0 / var[sel] + 1.0 / vj[sel]
                v_new = 1.0 / prec
                mean[sel] = v_new * (mean[sel] / var[sel] + mj[sel] / vj[sel])
                var[sel] = v_new
        return MessageBatch(mean, var)
    if mode != "default":
        raise ValueError(f"unknown mode {mode!r}")

    z_hat = d @ wm
    dev = d - z_hat[:, None]
    pzz = np.maximum((dev ** 2) @ wc, 0.0)
    base = mi - mj
    r = np.linalg.norm(base, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        u2 = np.where(r[:, None] > 0, (base / r[:, None]) ** 2, 1.0 / 3.0)
    S = pzz + sigma ** 2 + np.sum(u2 * vj, axis=1)
    cross = np.einsum("la,lac->lc", wc[None, :] * dev, pts - mi[:, None, :])
    gain = cross / S[:, None]
    m_post = mi + gain * (z - z_hat)[:, None]
    reduction = gain * cross
    s2_post = vi - reduction
    with np.errstate(invalid="ignore", divide="ignore"):
        ok = (s2_post > 0) & (reduction / s2_post > QUOTIENT_REL_EPS)
        prec = reduction / (vi * s2_post)
        mean = np.where(ok, mi + (m_post - mi) / (s2_post * prec), mi)
        var = np.where(ok, 1.0 / prec, FALLBACK_INFLATION * vi)
    return MessageBatch(mean, var, ~ok)


def fuse_batch(t_mean: np.ndarray, t_var: np.ndarray, rx: np.ndarray,
               msgs: MessageBatch, n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Fuse messages into n receivers; rx[k] is the receiver row of message k.

    Sums run in message order, so sorting messages canonically makes the
    result independent of how receivers are laid out.
    """
    prec = 1.0 / t_var
    info = t_mean * prec
    if len(rx):
        p = 1.0 / msgs.var
        for c in range(3):
            prec[:, c] = prec[:, c] + np.bincount(rx, weights=p[:, c], minlength=n)
            info[:, c] = info[:, c] + np.bincount(rx, weights=msgs.mean[:, c] * p[:, c], minlength=n)
    var = 1.0 / prec
    return info * var, var
