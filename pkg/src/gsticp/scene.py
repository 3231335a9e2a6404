"""
Building geometry and line-of-sight queries.

Buildings are axis-aligned boxes. A bulk-loaded R-tree (Sort-Tile-Recursive
packing) indexes them so that a link between two points can be classified as
LOS or NLOS without scanning every building.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List

import numpy as np

_AXES = "xyz"


class SceneFormatError(ValueError):
    """Raised when a scene file cannot be parsed or fails validation."""


class LinkClass(str, Enum):
    LOS = "LOS"
    NLOS = "NLOS"


@dataclass(frozen=True)
class Box3:
    min_corner: tuple
    max_corner: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.min_corner)
        hi = tuple(float(v) for v in self.max_corner)
        if len(lo) != 3 or len(hi) != 3:
            raise ValueError("box corners must be 3-vectors")
        for c in range(3):
            if not (math.isfinite(lo[c]) and math.isfinite(hi[c])):
                raise ValueError(f"non-finite box coordinate on axis {_AXES[c]}")
            if lo[c] > hi[c]:
                raise ValueError(
                    f"box min > max on coordinate {_AXES[c]}: {lo[c]} > {hi[c]}"
                )
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)

    def contains_box(self, other: "Box3") -> bool:
        return all(
            self.min_corner[c] <= other.min_corner[c]
            and other.max_corner[c] <= self.max_corner[c]
            for c in range(3)
        )

    def contains_point(self, p) -> bool:
        return all(self.min_corner[c] <= p[c] <= self.max_corner[c] for c in range(3))

    def intersects(self, other: "Box3") -> bool:
        return all(
            self.min_corner[c] <= other.max_corner[c]
            and other.min_corner[c] <= self.max_corner[c]
            for c in range(3)
        )

    @property
    def extent(self) -> np.ndarray:
        return np.subtract(self.max_corner, self.min_corner)


@dataclass(frozen=True)
class Scene:
    bounds: Box3
    buildings: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "buildings", tuple(self.buildings))
        for k, b in enumerate(self.buildings):
            if not self.bounds.contains_box(b):
                raise ValueError(f"building {k} is not inside the scene bounds")

    def box_arrays(self):
        """Return (n, 3) arrays of building min and max corners."""
        if not self.buildings:
            return np.zeros((0, 3)), np.zeros((0, 3))
        lo = np.array([b.min_corner for b in self.buildings], dtype=float)
        hi = np.array([b.max_corner for b in self.buildings], dtype=float)
        return lo, hi

    def to_dict(self) -> dict:
        return {
            "bounds": {"min": list(self.bounds.min_corner), "max": list(self.bounds.max_corner)},
            "buildings": [
                {"min": list(b.min_corner), "max": list(b.max_corner)} for b in self.buildings
            ],
        }


# ---------------------------------------------------------------------------
# Scene file IO
# ---------------------------------------------------------------------------

def _parse_vec(obj, where: str):
    if not isinstance(obj, (list, tuple)) or len(obj) != 3:
        raise SceneFormatError(f"{where}: expected a list of 3 numbers, got {obj!r}")
    out = []
    for c, v in enumerate(obj):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise SceneFormatError(f"{where}[{c}] ({_AXES[c]}): expected a number, got {v!r}")
        out.append(float(v))
    return out


def _parse_box(obj, where: str) -> Box3:
    if not isinstance(obj, dict):
        raise SceneFormatError(f"{where}: expected an object with 'min' and 'max'")
    for key in ("min", "max"):
        if key not in obj:
            raise SceneFormatError(f"{where}: missing field '{key}'")
    lo = _parse_vec(obj["min"], f"{where}.min")
    hi = _parse_vec(obj["max"], f"{where}.max")
    try:
        return Box3(tuple(lo), tuple(hi))
    except ValueError as exc:
        raise SceneFormatError(f"{where}: {exc}") from None


def scene_from_dict(doc) -> Scene:
    if not isinstance(doc, dict):
        raise SceneFormatError("scene document must be a JSON object")
    if "bounds" not in doc:
        raise SceneFormatError("missing field 'bounds'")
    bounds = _parse_box(doc["bounds"], "bounds")
    raw = doc.get("buildings", [])
    if not isinstance(raw, list):
        raise SceneFormatError("field 'buildings' must be a list")
    buildings = [_parse_box(b, f"buildings[{k}]") for k, b in enumerate(raw)]
    for k, b in enumerate(buildings):
        if not bounds.contains_box(b):
            raise SceneFormatError(f"buildings[{k}]: box is not inside bounds")
    return Scene(bounds=bounds, buildings=tuple(buildings))


def load_scene(path) -> Scene:
    """Read a scene JSON file; building order is preserved."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneFormatError(
            f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from None
    try:
        return scene_from_dict(doc)
    except SceneFormatError as exc:
        raise SceneFormatError(f"{path}: {exc}") from None


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(json.dumps(scene.to_dict(), indent=2), encoding="utf-8")


# ---------------------------------------------------------------------------
# Segment / box geometry
# ---------------------------------------------------------------------------

def segments_hit_boxes(p, q, lo, hi) -> np.ndarray:
    """Closed segment-vs-closed-box slab test, broadcasting over leading axes.

    ``p``, ``q`` have shape (..., 3) and ``lo``, ``hi`` have shape (..., 3);
    the result has the broadcast shape without the trailing axis. Endpoints
    are put in lexicographic order first so the test is exactly symmetric.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)

    # lexicographic canonical order of (p, q)
    swap = np.zeros(np.broadcast_shapes(p.shape[:-1], q.shape[:-1]), dtype=bool)
    undecided = np.ones_like(swap)
    for c in range(3):
        gt = p[..., c] > q[..., c]
        lt = p[..., c] < q[..., c]
        swap = swap | (undecided & gt)
        undecided = undecided & ~(gt | lt)
    a = np.where(swap[..., None], q, p)
    b = np.where(swap[..., None], p, q)
    d = b - a

    t_enter = np.zeros(np.broadcast_shapes(a.shape[:-1], lo.shape[:-1]))
    t_exit = np.ones_like(t_enter)
    hit = np.ones(t_enter.shape, dtype=bool)
    # tiny direction components may overflow to +-inf, which is the right limit
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        for c in range(3):
            dc = d[..., c]
            ac = a[..., c]
            flat = dc == 0.0
            inside = (lo[..., c] <= ac) & (ac <= hi[..., c])
            t1 = (lo[..., c] - ac) / dc
            t2 = (hi[..., c] - ac) / dc
            near = np.where(flat, -np.inf, np.minimum(t1, t2))
            far = np.where(flat, np.inf, np.maximum(t1, t2))
            hit = hit & np.where(flat, inside, True)
            t_enter = np.maximum(t_enter, near)
            t_exit = np.minimum(t_exit, far)
    return hit & (t_enter <= t_exit)


def segment_intersects_box(p, q, box: Box3) -> bool:
    """True iff the closed segment pq touches the closed box."""
    return bool(segments_hit_boxes(p, q, box.min_corner, box.max_corner))


# ---------------------------------------------------------------------------
# R-tree
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Level:
    lo: np.ndarray       # (k, 3)
    hi: np.ndarray       # (k, 3)
    start: np.ndarray    # (k,) first child index in the level below (or leaf slot)
    count: np.ndarray    # (k,)


def _str_order(centers: np.ndarray, cap: int) -> np.ndarray:
    """Sort-Tile-Recursive ordering of points into runs of ``cap``."""
    n = len(centers)
    if n <= cap:
        return np.arange(n)
    pages = math.ceil(n / cap)
    slices = math.ceil(pages ** (1.0 / 3.0))
    order = np.argsort(centers[:, 0], kind="stable")
    out = []
    per_x = slices * slices * cap
    for xs in range(0, n, per_x):
        ix = order[xs:xs + per_x]
        iy = ix[np.argsort(centers[ix, 1], kind="stable")]
        per_y = slices * cap
        for ys in range(0, len(iy), per_y):
            jy = iy[ys:ys + per_y]
            out.append(jy[np.argsort(centers[jy, 2], kind="stable")])
    return np.concatenate(out)


class SceneIndex:
    """Immutable STR-packed R-tree over the buildings of a scene."""

    def __init__(self, scene: Scene, node_capacity: int = 8):
        if node_capacity < 2:
            raise ValueError("node_capacity must be >= 2")
        self.scene = scene
        self.node_capacity = node_capacity
        self._lo, self._hi = scene.box_arrays()
        n = len(self._lo)
        self._levels: List[_Level] = []
        if n == 0:
            self._slots = np.zeros(0, dtype=int)
            return

        order = _str_order((self._lo + self._hi) / 2, node_capacity)
        self._slots = order  # leaf slot -> building index
        lo, hi = self._lo[order], self._hi[order]
        start = np.arange(n)
        count = np.ones(n, dtype=int)
        entries = _Level(lo, hi, start, count)
        while True:
            k = len(entries.lo)
            if k <= node_capacity and self._levels:
                break
            perm = _str_order((entries.lo + entries.hi) / 2, node_capacity)
            entries = _Level(entries.lo[perm], entries.hi[perm],
                             entries.start[perm], entries.count[perm])
            self._levels.append(entries)
            groups = range(0, k, node_capacity)
            plo = np.array([entries.lo[g:g + node_capacity].min(axis=0) for g in groups])
            phi = np.array([entries.hi[g:g + node_capacity].max(axis=0) for g in groups])
            pstart = np.array(list(groups))
            pcount = np.array([min(node_capacity, k - g) for g in groups])
            entries = _Level(plo, phi, pstart, pcount)
            if len(plo) == 1:
                break
        self._levels.append(entries)
        self._levels.reverse()  # root level first, leaf entries last

    def __len__(self) -> int:
        return len(self._lo)

    @property
    def depth(self) -> int:
        return len(self._levels)

    def _descend(self, box_test) -> List[int]:
        if not self._levels:
            return []
        frontier = np.arange(len(self._levels[0].lo))
        for depth, level in enumerate(self._levels):
            keep = frontier[box_test(level.lo[frontier], level.hi[frontier])]
            if depth == len(self._levels) - 1:
                return sorted(int(self._slots[level.start[k]]) for k in keep)
            if len(keep) == 0:
                return []
            frontier = np.concatenate(
                [np.arange(level.start[k], level.start[k] + level.count[k]) for k in keep]
            )
        return []

    def query_region(self, region: Box3) -> List[int]:
        """Indices of buildings whose boxes intersect ``region`` (closed)."""
        rlo = np.asarray(region.min_corner)
        rhi = np.asarray(region.max_corner)
        return self._descend(
            lambda lo, hi: np.all((lo <= rhi) & (rlo <= hi), axis=1)
        )

    def query_segment(self, p, q) -> List[int]:
        """Indices of buildings hit by the closed segment pq."""
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        return self._descend(lambda lo, hi: segments_hit_boxes(p, q, lo, hi))

    def segments_blocked(self, p: np.ndarray, q: np.ndarray) -> np.ndarray:
        """Batch NLOS test for (m, 3) endpoint arrays; returns (m,) bools."""
        p = np.atleast_2d(np.asarray(p, dtype=float))
        q = np.atleast_2d(np.asarray(q, dtype=float))
        m = len(p)
        blocked = np.zeros(m, dtype=bool)
        if not self._levels or m == 0:
            return blocked
        root = self._levels[0]
        seg = np.repeat(np.arange(m), len(root.lo))
        node = np.tile(np.arange(len(root.lo)), m)
        last = len(self._levels) - 1
        for depth, level in enumerate(self._levels):
            hit = segments_hit_boxes(p[seg], q[seg], level.lo[node], level.hi[node])
            seg, node = seg[hit], node[hit]
            if depth == last:
                blocked[seg] = True
                break
            if len(seg) == 0:
                break
            counts = level.count[node]
            seg = np.repeat(seg, counts)
            starts = np.repeat(level.start[node], counts)
            offsets = np.arange(len(starts)) - np.repeat(np.cumsum(counts) - counts, counts)
            node = starts + offsets
        return blocked


def build_index(scene: Scene, node_capacity: int = 8) -> SceneIndex:
    return SceneIndex(scene, node_capacity=node_capacity)


def classify_link(index: SceneIndex, p, q) -> LinkClass:
    """NLOS iff the segment pq meets at least one building box."""
    blocked = index.segments_blocked(np.asarray(p, dtype=float)[None], np.asarray(q, dtype=float)[None])
    return LinkClass.NLOS if blocked[0] else LinkClass.LOS


def classify_brute_force(scene: Scene, p, q) -> LinkClass:
    """Reference classification by scanning every building."""
    lo, hi = scene.box_arrays()
    if len(lo) == 0:
        return LinkClass.LOS
    hit = segments_hit_boxes(np.asarray(p, dtype=float)[None], np.asarray(q, dtype=float)[None], lo, hi)
    return LinkClass.NLOS if hit.any() else LinkClass.LOS


def random_city(bounds: Box3, n_buildings: int, rng: np.random.Generator,
                footprint=(20.0, 80.0), height=(10.0, None)) -> Scene:
    """Scatter non-validated random boxes (overlaps allowed) inside ``bounds``."""
    lo_b = np.asarray(bounds.min_corner)
    hi_b = np.asarray(bounds.max_corner)
    span = hi_b - lo_b
    top = span[2] if height[1] is None else min(height[1], span[2])
    boxes = []
    for _ in range(n_buildings):
        w = rng.uniform(footprint[0], footprint[1], size=2)
        w = np.minimum(w, span[:2])
        h = rng.uniform(min(height[0], top), top)
        x0 = rng.uniform(lo_b[0], hi_b[0] - w[0])
        y0 = rng.uniform(lo_b[1], hi_b[1] - w[1])
        boxes.append(Box3((x0, y0, lo_b[2]), (x0 + w[0], y0 + w[1], lo_b[2] + h)))
    return Scene(bounds=bounds, buildings=tuple(boxes))

