"""Scenario generation, Monte-Carlo driver, error CDFs and CSV output."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from .config import ConfigError, ScenarioConfig, dump_config
from .models import Belief3, NodeKind, NodeState
from .netsim import Counters, Network, SeedPlan, SlotResult, Stream, run_time_slot
from .scene import Scene, SceneIndex, build_index, load_scene

log = logging.getLogger(__name__)

MAX_PLACEMENT_TRIES = 1000
RESULT_COLUMNS = ["run", "slot", "agent", "true_x", "true_y", "true_z",
                  "est_x", "est_y", "est_z", "error"]


class ScenarioError(RuntimeError):
    pass


class MonteCarloError(RuntimeError):
    def __init__(self, run: int, cause: Exception):
        super().__init__(f"run {run}: {cause}")
        self.run = run
        self.cause = cause


@dataclass
class RunResult:
    run: int
    slots: List[SlotResult]
    counters: Counters

    def rows(self):
        for s in self.slots:
            err = np.linalg.norm(s.true_positions - s.estimates, axis=1)
            for k, aid in enumerate(s.agent_ids):
                yield (self.run, s.slot, int(aid), *s.true_positions[k], *s.estimates[k], float(err[k]))

    def errors(self, all_slots: bool = False) -> np.ndarray:
        chosen = self.slots if all_slots else self.slots[-1:]
        if not chosen:
            return np.zeros(0)
        return np.concatenate([np.linalg.norm(s.true_positions - s.estimates, axis=1) for s in chosen])

    def prediction_errors(self, slot: int) -> np.ndarray:
        s = self.slots[slot]
        return np.linalg.norm(s.true_positions - s.predicted, axis=1)


@dataclass
class CdfCurve:
    epsilons: np.ndarray
    p: np.ndarray
    label: str = "gsticp"

    def __post_init__(self):
        self.epsilons = np.asarray(self.epsilons, dtype=float)
        self.p = np.asarray(self.p, dtype=float)

    def at(self, eps: float) -> float:
        k = int(np.searchsorted(self.epsilons, eps, side="right")) - 1
        return float(self.p[k]) if k >= 0 else 0.0


# ---------------------------------------------------------------------------
# Scenario
# ---------------------------------------------------------------------------

def _inside_any(p: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> bool:
    if len(lo) == 0:
        return False
    return bool(np.any(np.all((lo <= p) & (p <= hi), axis=1)))


def _place(rng: np.random.Generator, area, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    amin, amax = np.asarray(area.min_corner), np.asarray(area.max_corner)
    for _ in range(MAX_PLACEMENT_TRIES):
        p = amin + rng.random(3) * (amax - amin)
        if not _inside_any(p, lo, hi):
            return p
    raise ScenarioError(f"could not place a node outside buildings after {MAX_PLACEMENT_TRIES} tries")


def resolve_scene(config: ScenarioConfig) -> Scene:
    if config.scene_path:
        return load_scene(config.scene_path)
    return Scene(bounds=config.area, buildings=())


def generate_scenario(config: ScenarioConfig, seeds: SeedPlan, run: int = 0,
                      scene: Optional[Scene] = None, index: Optional[SceneIndex] = None
                      ) -> Network:
    """Random anchors and agents outside buildings, with consistent priors.

    Anchors get ids ``0..A-1`` and agents ``A..A+N-1``. The prior mean of an
    agent is its true position plus N(0, prior_std^2 I) noise.
    """
    scene = scene if scene is not None else resolve_scene(config)
    index = index if index is not None else build_index(scene)
    lo, hi = scene.box_arrays()
    rng = seeds.rng(run, Stream.PLACEMENT)
    prior_rng = seeds.rng(run, Stream.PRIOR)
    nodes: List[NodeState] = []
    for k in range(config.n_anchors):
        p = _place(rng, config.area, lo, hi)
        nodes.append(NodeState(k, NodeKind.ANCHOR, p, Belief3.point(p)))
    for k in range(config.n_agents):
        p = _place(rng, config.area, lo, hi)
        offset = prior_rng.standard_normal(3) * config.prior_std
        belief = Belief3.isotropic(p + offset, config.prior_std)
        nodes.append(NodeState(config.n_anchors + k, NodeKind.AGENT, p, belief))
    return Network(nodes, config.comm_range, index)


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------

def run_single(config: ScenarioConfig, run: int, scene: Optional[Scene] = None,
               deterministic: bool = False) -> RunResult:
    seeds = SeedPlan(config.seed)
    scene = scene if scene is not None else resolve_scene(config)
    index = build_index(scene)
    net = generate_scenario(config, seeds, run, scene, index)
    slots = []
    total = Counters()
    for _ in range(config.n_slots):
        res = run_time_slot(net, config, seeds, run, deterministic=deterministic)
        total.merge(res.counters)
        slots.append(res)
    return RunResult(run, slots, total)


def _run_job(args):
    config, run, scene = args
    try:
        return run_single(config, run, scene)
    except Exception as exc:  # surfaced with the run index
        raise MonteCarloError(run, exc) from exc


def run_monte_carlo(config: ScenarioConfig, scene: Optional[Scene] = None,
                    workers: int = 1) -> List[RunResult]:
    """``mc_runs`` independent runs, returned in run order."""
    config.validate()
    scene = scene if scene is not None else resolve_scene(config)
    jobs = [(config, r, scene) for r in range(config.mc_runs)]
    if workers > 1 and config.mc_runs > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]
    return sorted(results, key=lambda r: r.run)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def compute_cdf(results: Sequence[RunResult], epsilons: Iterable[float], label: str = "gsticp",
                all_slots: bool = False) -> CdfCurve:
    """Empirical P(error <= eps) over agents (final slot unless ``all_slots``)."""
    if not results:
        raise ValueError("no results to evaluate")
    errors = np.concatenate([r.errors(all_slots) for r in results])
    return cdf_from_errors(errors, epsilons, label)


def cdf_from_errors(errors: np.ndarray, epsilons: Iterable[float], label: str = "gsticp") -> CdfCurve:
    errors = np.sort(np.asarray(errors, dtype=float))
    if len(errors) == 0:
        raise ValueError("no errors to evaluate")
    eps = np.sort(np.asarray(list(epsilons), dtype=float))
    p = np.searchsorted(errors, eps, side="right") / len(errors)
    return CdfCurve(eps, p, label)


def parse_range(text: str) -> np.ndarray:
    """``start:stop:step`` with an inclusive stop, or a comma-separated list."""
    if ":" not in text:
        return np.array([float(v) for v in text.split(",")])
    parts = [float(v) for v in text.split(":")]
    if len(parts) != 3 or parts[2] <= 0:
        raise ValueError(f"bad range {text!r}; expected start:stop:step")
    start, stop, step = parts
    n = int(np.floor((stop - start) / step + 1e-9)) + 1
    return np.round(start + step * np.arange(n), 12)


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_results(results: Sequence[RunResult], curves: Mapping[str, CdfCurve] | Sequence[CdfCurve],
                  out_dir, config: Optional[ScenarioConfig] = None) -> Dict[str, Path]:
    """Write results.csv, cdf.csv, counters.csv and config.json into ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    if isinstance(curves, Mapping):
        curves = [CdfCurve(c.epsilons, c.p, label) for label, c in curves.items()]
    paths = {name: out / f"{name}.csv" for name in ("results", "cdf", "counters")}
    try:
        with open(paths["results"], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RESULT_COLUMNS)
            for r in results:
                for row in r.rows():
                    w.writerow([_fmt(v) for v in row])
        with open(paths["cdf"], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["algorithm", "epsilon", "p"])
            for c in curves:
                for e, p in zip(c.epsilons, c.p):
                    w.writerow([c.label, _fmt(e), _fmt(p)])
        with open(paths["counters"], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["run", "counter", "value"])
            for r in results:
                for name, value in r.counters.as_dict().items():
                    w.writerow([r.run, name, _fmt(value)])
        if config is not None:
            paths["config"] = out / "config.json"
            dump_config(config, paths["config"])
    except OSError as exc:
        raise OSError(f"failed writing results under {out}: {exc}") from exc
    return paths


@dataclass
class ParsedResults:
    run: np.ndarray
    slot: np.ndarray
    agent: np.ndarray
    true: np.ndarray
    est: np.ndarray
    error: np.ndarray

    def final_slot_errors(self) -> np.ndarray:
        keep = np.zeros(len(self.run), dtype=bool)
        for r in np.unique(self.run):
            sel = self.run == r
            keep |= sel & (self.slot == self.slot[sel].max())
        return self.error[keep]


def read_results(path) -> ParsedResults:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != RESULT_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        rows = [row for row in reader]
    if not rows:
        z = np.zeros(0)
        return ParsedResults(z.astype(int), z.astype(int), z.astype(int), np.zeros((0, 3)), np.zeros((0, 3)), z)
    ints = np.array([[int(r[0]), int(r[1]), int(r[2])] for r in rows])
    floats = np.array([[float(v) for v in r[3:]] for r in rows])
    return ParsedResults(ints[:, 0], ints[:, 1], ints[:, 2], floats[:, 0:3], floats[:, 3:6], floats[:, 6])


def sweep(config: ScenarioConfig, parameter: str, values: Sequence[float], epsilons,
          scene: Optional[Scene] = None, workers: int = 1):
    """Run one Monte-Carlo batch per parameter value.

    Returns a list of ``(value, results, curve)``.
    """
    out = []
    for v in values:
        if parameter in ("n_agents", "n_anchors", "l_max", "n_slots", "mc_runs"):
            v = int(round(v))
        try:
            cfg = config.with_(**{parameter: v}).validate()
        except TypeError:
            raise ConfigError(f"cannot sweep over unknown parameter {parameter!r}") from None
        res = run_monte_carlo(cfg, scene=scene, workers=workers)
        curve = compute_cdf(res, epsilons, label=f"{parameter}={v}", all_slots=cfg.all_slots)
        out.append((v, res, curve))
    return out
