"""
Domain types and generative models: positions, per-coordinate Gaussian
beliefs, ranging measurements with NLOS bias, odometry and random-walk mobility.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional

import numpy as np

from .scene import Box3, LinkClass


def as_position(p) -> np.ndarray:
    """Coerce to a finite float 3-vector."""
    arr = np.asarray(p, dtype=float).reshape(3)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"position must be finite, got {arr}")
    return arr


@dataclass(frozen=True)
class Gaussian1:
    mean: float
    variance: float
    dirac: bool = False

    def __post_init__(self):
        if self.dirac:
            object.__setattr__(self, "variance", 0.0)
        elif not self.variance > 0:
            raise ValueError(f"Gaussian variance must be > 0, got {self.variance}")

    @property
    def precision(self) -> float:
        return math.inf if self.dirac else 1.0 / self.variance


@dataclass(frozen=True)
class Belief3:
    """Diagonal-covariance Gaussian over a 3D position.

    ``dirac`` marks a point mass (anchors, pseudo-anchors); its variances are
    reported as zero.
    """

    mean: np.ndarray
    var: np.ndarray
    dirac: bool = False

    def __post_init__(self):
        m = as_position(self.mean)
        v = np.zeros(3) if self.dirac else np.asarray(self.var, dtype=float).reshape(3)
        if not self.dirac and not np.all(v > 0):
            raise ValueError(f"belief variances must be > 0, got {v}")
        m.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "var", v)

    @classmethod
    def point(cls, p) -> "Belief3":
        return cls(as_position(p), np.zeros(3), dirac=True)

    @classmethod
    def isotropic(cls, mean, std: float) -> "Belief3":
        if std == 0:
            return cls.point(mean)
        return cls(as_position(mean), np.full(3, float(std) ** 2))

    def coord(self, c: int) -> Gaussian1:
        return Gaussian1(float(self.mean[c]), float(self.var[c]), dirac=self.dirac)

    @property
    def x(self) -> Gaussian1:
        return self.coord(0)

    @property
    def y(self) -> Gaussian1:
        return self.coord(1)

    @property
    def z(self) -> Gaussian1:
        return self.coord(2)


class NodeKind(str, Enum):
    ANCHOR = "anchor"
    AGENT = "agent"
    PSEUDO_ANCHOR = "pseudo-anchor"


@dataclass
class NodeState:
    id: int
    kind: NodeKind
    true_position: np.ndarray
    belief: Belief3
    trajectory: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.true_position = as_position(self.true_position)
        if self.kind == NodeKind.ANCHOR:
            self.belief = Belief3.point(self.true_position)
        if not self.trajectory:
            self.trajectory = [self.true_position.copy()]

    @property
    def is_anchor(self) -> bool:
        return self.kind == NodeKind.ANCHOR


@dataclass(frozen=True)
class NlosParams:
    bias_mean: float = 20.0
    bias_std: float = 5.0

    def __post_init__(self):
        if self.bias_std < 0:
            raise ValueError("bias_std must be >= 0")


@dataclass(frozen=True)
class MobilityParams:
    step_std: float = 1.0
    odometry_std: float = 0.1

    def __post_init__(self):
        if self.step_std < 0 or self.odometry_std < 0:
            raise ValueError("mobility standard deviations must be >= 0")


@dataclass(frozen=True)
class RangeMeasurement:
    src: int
    dst: int
    slot: int
    z: float
    noise_std: float
    true_class: LinkClass

    def __post_init__(self):
        if self.src == self.dst:
            raise ValueError("a node cannot range to itself")
        if not math.isfinite(self.z):
            raise ValueError("range must be finite")
        if not self.noise_std > 0:
            raise ValueError("noise_std must be > 0")


@dataclass
class SlotMeasurements:
    external: List[RangeMeasurement]
    internal: Dict[int, np.ndarray]


def true_range(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)))


def generate_ranging_measurement(a: NodeState, b: NodeState, link_class: LinkClass,
                                 noise_std: float, nlos: NlosParams,
                                 rng: Optional[np.random.Generator], slot: int = 0
                                 ) -> RangeMeasurement:
    """Measurement of the range from ``a`` (sender) to ``b`` (receiver).

    Passing ``rng=None`` selects the deterministic mode in which each random
    term takes its mean value.
    """
    if not noise_std > 0:
        raise ValueError("noise_std must be > 0")
    d = true_range(a.true_position, b.true_position)
    if rng is None:
        e = 0.0
        bias = nlos.bias_mean if link_class == LinkClass.NLOS else 0.0
    else:
        e = rng.normal(0.0, noise_std)
        bias = rng.normal(nlos.bias_mean, nlos.bias_std) if link_class == LinkClass.NLOS else 0.0
    z = max(d + e + bias, 0.0)
    return RangeMeasurement(a.id, b.id, slot, z, noise_std, LinkClass(link_class))


def random_unit_vectors(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    # a zero draw has probability zero; guard anyway
    norms[norms == 0] = 1.0
    return v / norms


def clamp_to_bounds(p: np.ndarray, bounds: Optional[Box3]) -> np.ndarray:
    if bounds is None:
        return p
    return np.clip(p, bounds.min_corner, bounds.max_corner)


def mobility_step(state: NodeState, params: MobilityParams, rng: np.random.Generator,
                  bounds: Optional[Box3] = None) -> np.ndarray:
    """Random-direction step of N(0, step_std^2) length, clamped to ``bounds``."""
    if state.kind == NodeKind.ANCHOR:
        raise ValueError("anchors do not move")
    if params.step_std == 0:
        return state.true_position.copy()
    d = rng.normal(0.0, params.step_std)
    u = random_unit_vectors(rng, 1)[0]
    return clamp_to_bounds(state.true_position + d * u, bounds)


def generate_internal_measurement(prev, curr, odometry_std: float,
                                  rng: Optional[np.random.Generator]) -> np.ndarray:
    """Noisy displacement observation ``(curr - prev) + eps``."""
    if odometry_std < 0:
        raise ValueError("odometry_std must be >= 0")
    disp = np.asarray(curr, dtype=float) - np.asarray(prev, dtype=float)
    if odometry_std == 0 or rng is None:
        return disp
    return disp + rng.normal(0.0, odometry_std, size=3)


def range_likelihood(z: float, x, ref, sigma: float) -> float:
    """Unnormalized Gaussian range likelihood exp(-(z - |x - ref|)^2 / 2 sigma^2)."""
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    r = z - true_range(x, ref)
    return math.exp(-r * r / (2.0 * sigma * sigma))


def with_belief(node: NodeState, belief: Belief3) -> NodeState:
    return replace(node, belief=belief)
