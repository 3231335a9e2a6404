"""Experiment configuration (JSON <-> dataclass) and validation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

from .models import MobilityParams, NlosParams
from .scene import Box3
from .sut import SutParams

ALGORITHMS = ("gsticp", "gsticp-literal", "spa-te", "spa-te-gie", "spawn")

# Communication overhead per agent per iteration as stated for the method in
# its complexity table; reported next to the measured value.
STATED_BROADCAST_OVERHEAD = 14


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EauParams:
    eta1: float = 0.05
    eta2: float = 0.5
    enabled: bool = False

    def validate(self):
        if self.enabled and not (0 < self.eta1 < self.eta2):
            raise ConfigError(f"EAU thresholds need 0 < eta1 < eta2, got {self.eta1}, {self.eta2}")


@dataclass(frozen=True)
class ScenarioConfig:
    n_agents: int = 20
    n_anchors: int = 8
    area: Box3 = Box3((0.0, 0.0, 0.0), (400.0, 400.0, 50.0))
    comm_range: float = 300.0
    n_slots: int = 3
    l_max: int = 20
    noise_std: float = 1.0
    nlos: NlosParams = NlosParams()
    mobility: MobilityParams = MobilityParams()
    prior_std: float = 10.0
    sut: SutParams = SutParams()
    eau: EauParams = EauParams()
    algorithm: str = "gsticp"
    oracle_nlos: bool = False
    seed: int = 0
    mc_runs: int = 1
    scene_path: Optional[str] = None
    # extensions beyond the core scenario description
    nlos_identification: bool = True
    belief_inflation: bool = True
    area_constraint: bool = True
    n_particles: int = 1000
    all_slots: bool = False

    def validate(self) -> "ScenarioConfig":
        if self.n_agents < 0 or self.n_anchors < 0:
            raise ConfigError("node counts must be >= 0")
        if self.n_agents + self.n_anchors == 0:
            raise ConfigError("network has no nodes")
        if not self.comm_range > 0:
            raise ConfigError("comm_range must be > 0")
        if self.n_slots < 1:
            raise ConfigError("n_slots must be >= 1")
        if self.l_max < 0:
            raise ConfigError("l_max must be >= 0")
        if not self.noise_std > 0:
            raise ConfigError("noise_std must be > 0")
        if self.prior_std < 0:
            raise ConfigError("prior_std must be >= 0")
        if self.mc_runs < 1:
            raise ConfigError("mc_runs must be >= 1")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if self.algorithm == "spawn" and self.oracle_nlos:
            raise ConfigError("spawn runs without NLOS identification; oracle_nlos is not allowed")
        if self.algorithm == "spawn" and self.n_particles < 100:
            raise ConfigError("spawn needs at least 100 particles")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        self.eau.validate()
        return self

    @property
    def uses_gie(self) -> bool:
        """Whether links are filtered before the iteration loop."""
        if self.algorithm == "spawn":
            return False
        if self.algorithm == "spa-te-gie" or self.oracle_nlos:
            return True
        return self.algorithm.startswith("gsticp") and self.nlos_identification

    @property
    def uses_odometry(self) -> bool:
        """Only the GSTICP variants fuse the internal displacement measurement."""
        return self.algorithm.startswith("gsticp")

    def with_(self, **changes) -> "ScenarioConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Box3):
                v = {"min": list(v.min_corner), "max": list(v.max_corner)}
            elif f.name == "sut":
                v = {"alpha": v.alpha, "beta": v.beta}
            elif hasattr(v, "__dataclass_fields__"):
                v = asdict(v)
            d[f.name] = v
        return d

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Optional[Path] = None) -> "ScenarioConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(doc)
        try:
            if "area" in kw:
                a = kw["area"]
                kw["area"] = Box3(tuple(a["min"]), tuple(a["max"]))
            if "nlos" in kw:
                kw["nlos"] = NlosParams(**kw["nlos"])
            if "mobility" in kw:
                kw["mobility"] = MobilityParams(**kw["mobility"])
            if "sut" in kw:
                kw["sut"] = SutParams(**kw["sut"])
            if "eau" in kw:
                kw["eau"] = EauParams(**kw["eau"])
        except (TypeError, KeyError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from None
        if kw.get("scene_path") and base_dir is not None:
            p = Path(kw["scene_path"])
            if not p.is_absolute():
                kw["scene_path"] = str((base_dir / p).resolve())
        return cls(**kw).validate()


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return ScenarioConfig.from_dict(doc, base_dir=path.parent)


def dump_config(config: ScenarioConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
