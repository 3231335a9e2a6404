"""
Discrete-time network simulator for cooperative localization.

One time slot runs: truth mobility, odometry, ranging over the true geometry,
temporal prediction, geographic NLOS identification on the predicted
positions, ``l_max`` synchronous (Jacobi) message-passing iterations with
optional EAU early termination, and an MMSE read-out.

Internally every per-node quantity is an array row in ascending node-id
order, and links are sorted by (receiver id, sender id). The vectorized
sums therefore run in a canonical order and results do not depend on how
the node list is laid out.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from enum import Enum, IntEnum
from typing import Dict, List, Optional, Tuple

import numpy as np

from .baselines import ParticleBelief, spawn_particle_update, te_messages_batch
from .config import STATED_BROADCAST_OVERHEAD, EauParams, ScenarioConfig
from .models import Belief3, LinkClass, NodeKind, NodeState, RangeMeasurement
from .scene import SceneIndex
from .sut import N_SIGMA, MessageBatch, SutParams, fuse_batch, sut_messages_batch

log = logging.getLogger(__name__)

AGENT_BROADCAST_SCALARS = 6   # per-coordinate mean and variance
POINT_BROADCAST_SCALARS = 3   # Dirac: means only
PRIOR_VARIANCE_FLOOR = 1e-12


class Stream(IntEnum):
    """Random sub-stream identifiers; see :class:`SeedPlan`."""

    PLACEMENT = 0
    PRIOR = 1
    MOBILITY = 2
    ODOMETRY = 3
    RANGING = 4
    NLOS_BIAS = 5
    PARTICLES = 6


@dataclass(frozen=True)
class SeedPlan:
    """Deterministic random streams.

    Stream ``(run, kind, slot)`` is seeded with
    ``SeedSequence(master_seed, spawn_key=(run, kind, slot))``. Link noise
    is drawn as a full (N, N) matrix indexed by (sender rank, receiver rank),
    so the draw for a link does not depend on which other links exist or on
    processing order.
    """

    master_seed: int

    def rng(self, run: int, kind: Stream, slot: int = 0) -> np.random.Generator:
        ss = np.random.SeedSequence(self.master_seed, spawn_key=(int(run), int(kind), int(slot)))
        return np.random.Generator(np.random.PCG64(ss))


# ---------------------------------------------------------------------------
# Bookkeeping types
# ---------------------------------------------------------------------------

@dataclass
class Counters:
    belief_updates: int = 0
    spatial_messages: int = 0
    scalars_broadcast: int = 0
    agent_broadcasts: int = 0
    agent_scalars_broadcast: int = 0
    anchor_scalars_broadcast: int = 0
    range_propagations: int = 0
    nlos_links_discarded: int = 0
    quotient_fallbacks: int = 0
    links_pruned: int = 0
    skipped_updates: int = 0
    pseudo_anchor_upgrades: int = 0
    degenerate_links: int = 0
    particle_resamples: int = 0
    particle_divergences: int = 0
    iterations: int = 0

    def merge(self, other: "Counters") -> "Counters":
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))
        return self

    def as_dict(self) -> Dict[str, float]:
        out: Dict[str, float] = {f.name: getattr(self, f.name) for f in fields(self)}
        if self.agent_broadcasts:
            out["scalars_per_agent_iteration"] = self.agent_scalars_broadcast / self.agent_broadcasts
        else:
            out["scalars_per_agent_iteration"] = float(AGENT_BROADCAST_SCALARS)
        out["stated_scalars_per_agent_iteration"] = STATED_BROADCAST_OVERHEAD
        return out


class AgentStatus(IntEnum):
    ACTIVE = 0
    SKIP_NEXT = 1
    PSEUDO_ANCHOR = 2


class EauDecision(str, Enum):
    UPGRADE = "upgrade"
    SKIP_NEXT = "skip-next"
    CONTINUE = "continue"


@dataclass
class EauState:
    status: np.ndarray      # (N,) AgentStatus codes; anchors stay ACTIVE
    prev_mean: np.ndarray   # (N, 3)

    @classmethod
    def fresh(cls, means: np.ndarray) -> "EauState":
        return cls(np.zeros(len(means), dtype=np.int8), means.copy())

    @property
    def pseudo(self) -> np.ndarray:
        return self.status == AgentStatus.PSEUDO_ANCHOR


@dataclass
class LinkSet:
    """Directed links of one slot; ``src``/``dst`` are node rows."""

    src: np.ndarray
    dst: np.ndarray
    z: np.ndarray
    noise_std: np.ndarray
    true_nlos: np.ndarray
    classified_nlos: Optional[np.ndarray] = None
    slot: int = 0

    def __len__(self) -> int:
        return len(self.z)

    def canonical(self) -> "LinkSet":
        """Links sorted by (receiver, sender); fusion sums run in this order."""
        order = np.lexsort((self.src, self.dst))
        if np.all(order[1:] > order[:-1]):
            return self
        return self.subset(order)

    def subset(self, keep: np.ndarray) -> "LinkSet":
        cls_ = None if self.classified_nlos is None else self.classified_nlos[keep]
        return LinkSet(self.src[keep], self.dst[keep], self.z[keep], self.noise_std[keep],
                       self.true_nlos[keep], cls_, self.slot)

    def measurements(self, ids: np.ndarray) -> List[RangeMeasurement]:
        return [
            RangeMeasurement(int(ids[s]), int(ids[d]), self.slot, float(z), float(sd),
                             LinkClass.NLOS if n else LinkClass.LOS)
            for s, d, z, sd, n in zip(self.src, self.dst, self.z, self.noise_std, self.true_nlos)
        ]


class Network:
    """Nodes plus radio range and scene; arrays are kept in node-id order."""

    def __init__(self, nodes: List[NodeState], comm_range: float,
                 index: Optional[SceneIndex] = None, slot: int = 0):
        if not comm_range > 0:
            raise ValueError("comm_range must be > 0")
        ids = [n.id for n in nodes]
        if len(set(ids)) != len(ids):
            raise ValueError("node ids must be unique")
        self.nodes = sorted(nodes, key=lambda n: n.id)
        self.comm_range = float(comm_range)
        self.index = index
        self.slot = slot
        self.particles: Dict[int, ParticleBelief] = {}

    @property
    def ids(self) -> np.ndarray:
        return np.array([n.id for n in self.nodes], dtype=int)

    @property
    def is_anchor(self) -> np.ndarray:
        return np.array([n.kind == NodeKind.ANCHOR for n in self.nodes], dtype=bool)

    @property
    def true_positions(self) -> np.ndarray:
        if not self.nodes:
            return np.zeros((0, 3))
        return np.array([n.true_position for n in self.nodes])

    def beliefs(self) -> Tuple[np.ndarray, np.ndarray]:
        if not self.nodes:
            return np.zeros((0, 3)), np.zeros((0, 3))
        return (np.array([n.belief.mean for n in self.nodes]),
                np.array([n.belief.var for n in self.nodes]))

    def row_of(self, node_id: int) -> int:
        for k, n in enumerate(self.nodes):
            if n.id == node_id:
                return k
        raise KeyError(node_id)

    @property
    def agent_rows(self) -> np.ndarray:
        return np.flatnonzero(~self.is_anchor)


# ---------------------------------------------------------------------------
# Topology and measurements
# ---------------------------------------------------------------------------

def in_range_matrix(positions: np.ndarray, comm_range: float) -> np.ndarray:
    diff = positions[:, None, :] - positions[None, :, :]
    dist = np.sqrt(np.sum(diff ** 2, axis=2))
    adj = dist <= comm_range
    np.fill_diagonal(adj, False)
    return adj


def discover_neighbors(net: Network, node_id: int) -> Tuple[List[int], List[int]]:
    """(anchor ids, agent ids) within the closed communication ball of the node."""
    i = net.row_of(node_id)
    pos = net.true_positions
    d = np.linalg.norm(pos - pos[i], axis=1)
    near = (d <= net.comm_range)
    near[i] = False
    anchors, agents = [], []
    for k in np.flatnonzero(near):
        node = net.nodes[k]
        (anchors if node.kind == NodeKind.ANCHOR else agents).append(node.id)
    return anchors, agents


def truth_classes(index: Optional[SceneIndex], a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if index is None or len(index) == 0 or len(a) == 0:
        return np.zeros(len(a), dtype=bool)
    return index.segments_blocked(a, b)


def collect_measurements(net: Network, config: ScenarioConfig, seeds: SeedPlan, run: int,
                         deterministic: bool = False) -> LinkSet:
    """Ranging from every in-range node to every agent, using true geometry.

    ``deterministic`` replaces both random terms by their means.
    """
    pos = net.true_positions
    n = len(pos)
    anchor = net.is_anchor
    adj = in_range_matrix(pos, net.comm_range)
    adj[:, anchor] = False                          # only agents receive
    dst, src = np.nonzero(adj.T)                    # sorted by (receiver, sender)
    slot = net.slot
    if deterministic:
        noise = np.zeros((n, n))
        bias = np.full((n, n), config.nlos.bias_mean)
    else:
        noise = seeds.rng(run, Stream.RANGING, slot).standard_normal((n, n)) * config.noise_std
        bias = seeds.rng(run, Stream.NLOS_BIAS, slot).normal(config.nlos.bias_mean,
                                                             config.nlos.bias_std, (n, n))
    # the segment test is symmetric, so both directions of a pair agree
    nlos = truth_classes(net.index, pos[src], pos[dst])
    d = np.linalg.norm(pos[src] - pos[dst], axis=1)
    z = d + noise[src, dst] + np.where(nlos, bias[src, dst], 0.0)
    z = np.maximum(z, 0.0)
    return LinkSet(src, dst, z, np.full(len(z), config.noise_std), nlos, None, slot)


def classify_and_filter(links: LinkSet, index: Optional[SceneIndex], estimates: np.ndarray,
                        oracle_mode: bool = False) -> Tuple[LinkSet, int]:
    """Drop links judged NLOS; returns (kept links, number discarded).

    Classification tests the segment between the *estimated* endpoint
    positions against the buildings, or uses the true label in oracle mode.
    """
    if len(links) == 0:
        return links, 0
    if oracle_mode:
        nlos = links.true_nlos.copy()
    else:
        nlos = truth_classes(index, estimates[links.src], estimates[links.dst])
    tagged = LinkSet(links.src, links.dst, links.z, links.noise_std, links.true_nlos, nlos, links.slot)
    kept = tagged.subset(~nlos)
    return kept, int(nlos.sum())


def eau_classify(prev_mean, new_mean, params: EauParams) -> EauDecision:
    delta = float(np.max(np.abs(np.asarray(new_mean, dtype=float) - np.asarray(prev_mean, dtype=float))))
    if delta < params.eta1:
        return EauDecision.UPGRADE
    if delta < params.eta2:
        return EauDecision.SKIP_NEXT
    return EauDecision.CONTINUE


def prune_pseudo_anchor_links(links: LinkSet, status: np.ndarray, is_anchor: np.ndarray
                              ) -> Tuple[LinkSet, int]:
    """Remove pseudo<->pseudo and pseudo<->anchor links; keep pseudo<->active ones."""
    if len(links) == 0:
        return links, 0
    pseudo = status == AgentStatus.PSEUDO_ANCHOR
    ps, pd = pseudo[links.src], pseudo[links.dst]
    drop = (ps & pd) | (ps & is_anchor[links.dst]) | (pd & is_anchor[links.src])
    return links.subset(~drop), int(drop.sum())


def broadcast(node: NodeState, pseudo: bool = False) -> Tuple[Tuple[float, ...], int]:
    """Belief summary sent to neighbors and its scalar count."""
    if node.kind == NodeKind.ANCHOR or pseudo or node.belief.dirac:
        payload = tuple(float(v) for v in node.belief.mean)
    else:
        payload = tuple(float(v) for v in node.belief.mean) + tuple(float(v) for v in node.belief.var)
    return payload, len(payload)


# ---------------------------------------------------------------------------
# Iteration
# ---------------------------------------------------------------------------

@dataclass
class SlotState:
    """Mutable per-slot arrays shared by the iterations of one slot."""

    mean: np.ndarray          # (N, 3) current beliefs (anchors: true positions)
    var: np.ndarray           # (N, 3) zeros for anchors
    t_mean: np.ndarray        # (N, 3) temporal message (agents)
    t_var: np.ndarray
    is_anchor: np.ndarray
    eau: EauState
    counters: Counters = field(default_factory=Counters)
    bounds: Optional[Tuple[np.ndarray, np.ndarray]] = None   # area of interest (lo, hi)


def _message_batch(algorithm: str, state: SlotState, links: LinkSet, bmean, bvar,
                   params: SutParams, counters: Counters) -> Tuple[MessageBatch, np.ndarray]:
    rx, tx = links.dst, links.src
    if algorithm in ("gsticp", "gsticp-literal"):
        mode = "literal" if algorithm == "gsticp-literal" else "default"
        agent_sender = ~state.is_anchor[tx] & ~state.eau.pseudo[tx]
        mb = sut_messages_batch(state.mean[rx], state.var[rx], bmean[tx], bvar[tx], links.z,
                                links.noise_std, params, mode=mode, agent_sender=agent_sender)
        counters.range_propagations += N_SIGMA * len(rx)
        counters.quotient_fallbacks += int(mb.fallback.sum())
        return mb, np.ones(len(rx), dtype=bool)
    mb, degenerate = te_messages_batch(state.mean[rx], bmean[tx], bvar[tx], links.z, links.noise_std)
    counters.range_propagations += len(rx)
    counters.degenerate_links += int(degenerate.sum())
    return mb, ~degenerate


def run_iteration(state: SlotState, links: LinkSet, config: ScenarioConfig, l: int) -> LinkSet:
    """One synchronous iteration; returns the (possibly pruned) link set."""
    c = state.counters
    eau = state.eau
    pseudo = eau.pseudo
    links = links.canonical()
    agents = ~state.is_anchor
    n = len(state.mean)

    # broadcast snapshot of iteration l-1
    bmean = state.mean.copy()
    bvar = state.var.copy()
    bvar[pseudo] = 0.0
    n_pseudo = int(np.sum(pseudo & agents))
    n_active_bc = int(np.sum(agents & ~pseudo))
    c.agent_broadcasts += n_active_bc
    c.agent_scalars_broadcast += AGENT_BROADCAST_SCALARS * n_active_bc
    c.scalars_broadcast += AGENT_BROADCAST_SCALARS * n_active_bc + POINT_BROADCAST_SCALARS * n_pseudo
    c.anchor_scalars_broadcast += POINT_BROADCAST_SCALARS * int(np.sum(state.is_anchor))

    if config.eau.enabled:
        links, pruned = prune_pseudo_anchor_links(links, eau.status, state.is_anchor)
        c.links_pruned += pruned

    updating = agents & (eau.status == AgentStatus.ACTIVE)
    skipping = agents & (eau.status == AgentStatus.SKIP_NEXT)
    c.skipped_updates += int(skipping.sum())
    if config.eau.enabled:
        eau.status[skipping] = AgentStatus.ACTIVE

    use = updating[links.dst]
    sub = links.subset(use)
    mb, valid = _message_batch(config.algorithm, state, sub, bmean, bvar, config.sut, c)
    if not np.all(valid):
        sub = sub.subset(valid)
        mb = MessageBatch(mb.mean[valid], mb.var[valid], mb.fallback[valid])
    c.spatial_messages += len(sub)

    new_mean, new_var = fuse_batch(state.t_mean, state.t_var, sub.dst, mb, n)
    if state.bounds is not None:
        new_mean = np.clip(new_mean, state.bounds[0], state.bounds[1])
    rows = np.flatnonzero(updating)
    step = new_mean[rows] - state.mean[rows]
    if config.belief_inflation:
        new_var[rows] = new_var[rows] + step ** 2
    state.mean[rows] = new_mean[rows]
    state.var[rows] = new_var[rows]
    c.belief_updates += len(rows)

    if config.eau.enabled and len(rows):
        delta = np.max(np.abs(step), axis=1)
        up = delta < config.eau.eta1
        sk = ~up & (delta < config.eau.eta2)
        eau.status[rows[up]] = AgentStatus.PSEUDO_ANCHOR
        eau.status[rows[sk]] = AgentStatus.SKIP_NEXT
        c.pseudo_anchor_upgrades += int(up.sum())
    eau.prev_mean[rows] = state.mean[rows]
    c.iterations += 1
    return links


# ---------------------------------------------------------------------------
# Time slot
# ---------------------------------------------------------------------------

@dataclass
class SlotResult:
    slot: int
    agent_ids: np.ndarray
    true_positions: np.ndarray      # (n_agents, 3)
    predicted: np.ndarray           # temporal-prediction means (pre-iteration)
    estimates: np.ndarray           # MMSE estimates after l_max iterations
    counters: Counters
    n_links: int = 0
    n_true_nlos: int = 0


def _mobility(net: Network, config: ScenarioConfig, seeds: SeedPlan, run: int) -> np.ndarray:
    """Move agents in place; returns displacement (N, 3) (zeros for anchors)."""
    n = len(net.nodes)
    rng = seeds.rng(run, Stream.MOBILITY, net.slot)
    d = rng.normal(0.0, 1.0, n) * config.mobility.step_std
    u = rng.standard_normal((n, 3))
    u /= np.maximum(np.linalg.norm(u, axis=1, keepdims=True), 1e-300)
    lo, hi = config.area.min_corner, config.area.max_corner
    disp = np.zeros((n, 3))
    for k, node in enumerate(net.nodes):
        if node.kind == NodeKind.ANCHOR:
            continue
        new = np.clip(node.true_position + d[k] * u[k], lo, hi)
        disp[k] = new - node.true_position
        node.true_position = new
        node.trajectory.append(new.copy())
    return disp


def _temporal(net: Network, config: ScenarioConfig, seeds: SeedPlan, run: int,
              disp: Optional[np.ndarray]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Temporal messages for all rows; also returns the odometry readings.

    Baselines have no internal sensor: their prediction keeps the previous
    mean and only adds the mobility-model variance.
    """
    mean, var = net.beliefs()
    n = len(mean)
    odo = np.zeros((n, 3))
    if disp is None:
        return mean, np.maximum(var, PRIOR_VARIANCE_FLOOR), odo
    agents = ~net.is_anchor
    q = config.mobility.step_std ** 2 / 3.0
    if config.uses_odometry:
        noise = seeds.rng(run, Stream.ODOMETRY, net.slot).standard_normal((n, 3)) * config.mobility.odometry_std
        odo[agents] = disp[agents] + noise[agents]
        q += config.mobility.odometry_std ** 2
    t_mean = mean + odo
    t_var = np.maximum(var + q, PRIOR_VARIANCE_FLOOR)
    t_mean[~agents] = mean[~agents]
    return t_mean, t_var, odo


def _area_bounds(config: ScenarioConfig) -> Tuple[np.ndarray, np.ndarray]:
    return np.asarray(config.area.min_corner, dtype=float), np.asarray(config.area.max_corner, dtype=float)


def _run_spawn(net: Network, config: ScenarioConfig, seeds: SeedPlan, run: int,
               links: LinkSet, t_mean: np.ndarray, t_var: np.ndarray, odo: np.ndarray,
               counters: Counters) -> Tuple[np.ndarray, np.ndarray]:
    rng = seeds.rng(run, Stream.PARTICLES, net.slot)
    anchor = net.is_anchor
    n = len(net.nodes)
    q = config.mobility.step_std ** 2 / 3.0
    priors: Dict[int, ParticleBelief] = {}
    for k in np.flatnonzero(~anchor):
        nid = net.nodes[k].id
        old = net.particles.get(nid)
        if old is None:
            priors[k] = ParticleBelief.sample(t_mean[k], t_var[k], config.n_particles, rng)
        else:
            moved = old.particles + odo[k] + rng.standard_normal(old.particles.shape) * np.sqrt(q)
            priors[k] = ParticleBelief(moved, old.weights)
        if config.area_constraint:
            lo, hi = _area_bounds(config)
            priors[k].particles = np.clip(priors[k].particles, lo, hi)
    mean = t_mean.copy()
    var = t_var.copy()
    mean[anchor] = net.true_positions[anchor]
    var[anchor] = 0.0
    current = dict(priors)
    # links are sorted by receiver; slice boundaries per receiver row
    starts = np.searchsorted(links.dst, np.arange(n + 1))
    for _ in range(config.l_max):
        bmean = mean.copy()
        agent_rows = list(priors)
        counters.agent_broadcasts += len(agent_rows)
        counters.agent_scalars_broadcast += AGENT_BROADCAST_SCALARS * len(agent_rows)
        counters.scalars_broadcast += AGENT_BROADCAST_SCALARS * len(agent_rows)
        counters.anchor_scalars_broadcast += POINT_BROADCAST_SCALARS * int(anchor.sum())
        for k in agent_rows:
            sl = slice(starts[k], starts[k + 1])
            src = links.src[sl]
            upd = spawn_particle_update(priors[k], bmean[src], links.z[sl], links.noise_std[sl], rng,
                                        fallback=(t_mean[k], t_var[k]))
            counters.spatial_messages += len(src)
            counters.range_propagations += len(src) * priors[k].n
            counters.particle_resamples += int(upd.resampled)
            counters.particle_divergences += int(upd.diverged)
            current[k] = upd.belief
            counters.belief_updates += 1
        for k in agent_rows:
            b = current[k]
            mean[k] = b.weights @ b.particles
            var[k] = np.maximum(b.variance(), PRIOR_VARIANCE_FLOOR)
        counters.iterations += 1
    for k, b in current.items():
        net.particles[net.nodes[k].id] = b
    return mean, var


def run_time_slot(net: Network, config: ScenarioConfig, seeds: SeedPlan, run: int = 0,
                  deterministic: bool = False) -> SlotResult:
    """Advance the network by one slot and localize every agent."""
    counters = Counters()
    disp = _mobility(net, config, seeds, run) if net.slot > 0 else None
    links = collect_measurements(net, config, seeds, run, deterministic=deterministic)
    n_links, n_true_nlos = len(links), int(links.true_nlos.sum())
    t_mean, t_var, odo = _temporal(net, config, seeds, run, disp)
    anchor = net.is_anchor
    truth = net.true_positions
    t_mean[anchor] = truth[anchor]
    bounds = _area_bounds(config) if config.area_constraint else None

    if config.uses_gie:
        est = t_mean if bounds is None else np.clip(t_mean, bounds[0], bounds[1])
        links, discarded = classify_and_filter(links, net.index, est, oracle_mode=config.oracle_nlos)
        counters.nlos_links_discarded += discarded

    if config.algorithm == "spawn":
        mean, var = _run_spawn(net, config, seeds, run, links, t_mean, t_var, odo, counters)
    else:
        var0 = t_var.copy()
        var0[anchor] = 0.0
        state = SlotState(mean=t_mean.copy(), var=var0, t_mean=t_mean, t_var=t_var,
                          is_anchor=anchor, eau=EauState.fresh(t_mean), counters=counters,
                          bounds=bounds)
        for l in range(1, config.l_max + 1):
            links = run_iteration(state, links, config, l)
        mean, var = state.mean, state.var

    rows = np.flatnonzero(~anchor)
    for k in rows:
        node = net.nodes[k]
        node.belief = Belief3(mean[k], np.maximum(var[k], PRIOR_VARIANCE_FLOOR))
    result = SlotResult(
        slot=net.slot,
        agent_ids=net.ids[rows],
        true_positions=truth[rows].copy(),
        predicted=t_mean[rows].copy(),
        estimates=mean[rows].copy(),
        counters=counters,
        n_links=n_links,
        n_true_nlos=n_true_nlos,
    )
    net.slot += 1
    return result
