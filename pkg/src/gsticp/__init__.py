"""Distributed 3D cooperative positioning in mixed LOS/NLOS scenes.

Factor-graph message passing with scaled-unscented-transform messages,
building-aware NLOS link identification and early anchor upgrading.
"""

from .config import EauParams, ScenarioConfig, load_config
from .evaluation import compute_cdf, run_monte_carlo, run_single, write_results
from .models import Belief3, MobilityParams, NlosParams
from .scene import Box3, Scene, build_index, classify_link, load_scene
from .sut import SutParams

__version__ = "0.1.0"

__all__ = [
    "Belief3", "Box3", "EauParams", "MobilityParams", "NlosParams", "Scene", "ScenarioConfig",
    "SutParams", "build_index", "classify_link", "compute_cdf", "load_config", "load_scene",
    "run_monte_carlo", "run_single", "write_results",
]
