"""Topological maps: the prior grid topology and its online growth with
the Instantaneous Topological Map (ITM) update rules."""
from __future__ import annotations

import copy
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import Delaunay
from scipy.spatial import QhullError

from . import kernels
from .scene import PotentialCostMap

log = logging.getLogger(__name__)

Point = tuple[float, float]
Edge = tuple[int, int]


class TopologyError(ValueError):
    pass


class StaleDeltaError(TopologyError):
    """A delta references node ids or edges the map does not have."""


def edge_key(a: int, b: int) -> Edge:
    if a == b:
        raise TopologyError(f"self-edge on node {a}")
    return (a, b) if a < b else (b, a)


@dataclass
class TopoNode:
    id: int
    centroid: Point
    hit_count: int = 0
    dwell_accumulator: int = 0


@dataclass
class TopologyDelta:
    """Everything one ITM step changed.

    ``counters`` holds post-update ``(id, hit_count, dwell_accumulator)``
    values and ``run`` the post-update dwell run ``(node id, length)``.
    """

    nodes_added: list[tuple[int, Point]] = field(default_factory=list)
    nodes_removed: list[int] = field(default_factory=list)
    edges_added: list[Edge] = field(default_factory=list)
    edges_removed: list[Edge] = field(default_factory=list)
    nodes_moved: list[tuple[int, Point, Point]] = field(default_factory=list)
    counters: list[tuple[int, int, int]] = field(default_factory=list)
    run: tuple[int, int] | None = None
    winner: int | None = None

    @property
    def structural(self) -> bool:
        return bool(self.nodes_added or self.nodes_removed or self.edges_added
                    or self.edges_removed or self.nodes_moved)

    def is_empty(self) -> bool:
        return not self.structural and not self.counters and self.run is None


class TopologicalMap:
    """Nodes with 2-D centroids joined by undirected edges.

    Pinned nodes (destinations and discovered goals) never move and are
    never removed by the ITM.
    """

    def __init__(self, tau: float, epsilon_itm: float = 0.05,
                 bounds: tuple[float, float, float, float] | None = None):
        if not (math.isfinite(tau) and tau > 0):
            raise TopologyError(f"insertion threshold tau must be > 0, got {tau}")
        if not 0 <= epsilon_itm <= 1:
            raise TopologyError(f"epsilon_itm must lie in [0, 1], got {epsilon_itm}")
        self.tau = float(tau)
        self.epsilon_itm = float(epsilon_itm)
        self.bounds = bounds
        self.nodes: dict[int, TopoNode] = {}
        self.adjacency: dict[int, set[int]] = {}
        self.pinned: set[int] = set()
        self.next_id = 0
        self.run: tuple[int, int] | None = None
        self._pos_cache: tuple[np.ndarray, list[int]] | None = None

    # -- basic structure ---------------------------------------------------

    @property
    def edges(self) -> set[Edge]:
        return {(a, b) for a, nb in self.adjacency.items() for b in nb if a < b}

    def __len__(self) -> int:
        return len(self.nodes)

    def copy(self) -> "TopologicalMap":
        other = copy.deepcopy(self)
        other._pos_cache = None
        return other

    def add_node(self, centroid: Sequence[float], pinned: bool = False) -> int:
        nid = self.next_id
        self.next_id += 1
        self.nodes[nid] = TopoNode(nid, (float(centroid[0]), float(centroid[1])))
        self.adjacency[nid] = set()
        if pinned:
            self.pinned.add(nid)
        self._pos_cache = None
        return nid

    def add_edge(self, a: int, b: int) -> None:
        a, b = edge_key(a, b)
        self.adjacency[a].add(b)
        self.adjacency[b].add(a)

    def pin(self, nid: int) -> None:
        if nid not in self.nodes:
            raise TopologyError(f"unknown node {nid}")
        self.pinned.add(nid)

    def centroid(self, nid: int) -> Point:
        return self.nodes[nid].centroid

    def positions(self) -> tuple[np.ndarray, list[int]]:
        """Node centroids as an (n, 2) array in ascending id order."""
        if self._pos_cache is None:
            ids = sorted(self.nodes)
            pos = np.array([self.nodes[i].centroid for i in ids], dtype=np.float64).reshape(-1, 2)
            self._pos_cache = (np.ascontiguousarray(pos), ids)
        return self._pos_cache

    def reset_run(self) -> None:
        """Forget the current dwell run, e.g. between trajectories."""
        self.run = None

    def snapshot_id(self) -> str:
        return hashlib.sha256(format_topology(self).encode()).hexdigest()[:16]

    def check_invariants(self) -> None:
        for a, nb in self.adjacency.items():
            if a not in self.nodes:
                raise TopologyError(f"adjacency for unknown node {a}")
            for b in nb:
                if b == a:
                    raise TopologyError(f"self-edge on node {a}")
                if b not in self.nodes or a not in self.adjacency.get(b, ()):
                    raise TopologyError(f"dangling edge ({a}, {b})")
        if set(self.adjacency) != set(self.nodes):
            raise TopologyError("adjacency and node sets differ")
        pos, ids = self.positions()
        if len(ids) > 1:
            d = min_pairwise_distance(pos)
            if d < self.tau / 2 - 1e-9:
                raise TopologyError(f"node spacing {d} below tau/2 = {self.tau / 2}")

    def __eq__(self, other) -> bool:
        if not isinstance(other, TopologicalMap):
            return NotImplemented
        return (self.tau == other.tau and self.epsilon_itm == other.epsilon_itm
                and self.nodes == other.nodes and self.adjacency == other.adjacency
                and self.pinned == other.pinned and self.run == other.run)


def min_pairwise_distance(pos: np.ndarray) -> float:
    pos = np.asarray(pos, dtype=np.float64)
    best = math.inf
    for k in range(len(pos) - 1):
        d = np.hypot(*(pos[k + 1:] - pos[k]).T)
        best = min(best, float(d.min()))
    return best


# -- Delaunay --------------------------------------------------------------

def _incircle(a, b, c, d) -> float:
    """Positive when d lies inside the circumcircle of ccw triangle abc."""
    adx, ady = a[0] - d[0], a[1] - d[1]
    bdx, bdy = b[0] - d[0], b[1] - d[1]
    cdx, cdy = c[0] - d[0], c[1] - d[1]
    return ((adx * adx + ady * ady) * (bdx * cdy - cdx * bdy)
            - (bdx * bdx + bdy * bdy) * (adx * cdy - cdx * ady)
            + (cdx * cdx + cdy * cdy) * (adx * bdy - bdx * ady))


def _orient(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def delaunay_edges(points: Sequence[Sequence[float]]) -> set[Edge]:
    """Index pairs of the Delaunay triangulation edges of ``points``.

    Collinear inputs give the path graph along the line. Where four
    points are cocircular the diagonal holding the lowest point index is
    kept, so the result does not depend on Qhull's internal choices.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if n < 2:
        raise TopologyError("Delaunay triangulation needs at least 2 points")
    if len(np.unique(pts, axis=0)) != n:
        raise TopologyError("Delaunay triangulation needs distinct points")
    if n == 2:
        return {(0, 1)}
    centered = pts - pts.mean(axis=0)
    scale = float(np.abs(centered).max()) or 1.0
    _, sv, vt = np.linalg.svd(centered / scale, full_matrices=False)
    if sv[1] <= 1e-12 * sv[0]:
        order = np.argsort(centered @ vt[0], kind="stable")
        return {edge_key(int(a), int(b)) for a, b in zip(order[:-1], order[1:])}
    try:
        tri = Delaunay(pts)
    except QhullError:
        tri = Delaunay(pts, qhull_options="Qbb Qc Qz Q12 QJ")
    if len(getattr(tri, "coplanar", [])):
        raise TopologyError("Qhull dropped input points; inputs too close together")

    # triangles as ccw vertex triples
    tris = []
    for simplex in tri.simplices:
        a, b, c = (int(v) for v in simplex)
        if _orient(pts[a], pts[b], pts[c]) < 0:
            b, c = c, b
        tris.append([a, b, c])
    return _resolve_cocircular(pts, tris)


def _resolve_cocircular(pts: np.ndarray, tris: list[list[int]]) -> set[Edge]:
    def build_edge_map():
        emap: dict[Edge, list[int]] = {}
        for t, tri in enumerate(tris):
            for k in range(3):
                emap.setdefault(edge_key(tri[k], tri[(k + 1) % 3]), []).append(t)
        return emap

    changed = True
    while changed:
        changed = False
        emap = build_edge_map()
        touched: set[int] = set()
        for e in sorted(emap):
            owners = emap[e]
            if len(owners) != 2 or owners[0] in touched or owners[1] in touched:
                continue
            t1, t2 = owners
            a, b = e
            c = next(v for v in tris[t1] if v not in e)
            d = next(v for v in tris[t2] if v not in e)
            alt = edge_key(c, d)
            if alt >= e:
                continue
            quad = pts[[a, b, c, d]]
            size = float(np.ptp(quad, axis=0).max()) ** 2
            tri1 = tris[t1]
            if abs(_incircle(pts[tri1[0]], pts[tri1[1]], pts[tri1[2]], pts[d])) > 1e-9 * size * size:
                continue
            # flip only across a strictly convex quadrilateral
            if _orient(pts[c], pts[d], pts[a]) * _orient(pts[c], pts[d], pts[b]) >= 0:
                continue
            if _orient(pts[a], pts[b], pts[c]) * _orient(pts[a], pts[b], pts[d]) >= 0:
                continue
            new1 = [c, d, a] if _orient(pts[c], pts[d], pts[a]) > 0 else [d, c, a]
            new2 = [c, d, b] if _orient(pts[c], pts[d], pts[b]) > 0 else [d, c, b]
            tris[t1], tris[t2] = new1, new2
            touched.update((t1, t2))
            changed = True
    return set(build_edge_map())


# -- prior topology --------------------------------------------------------

def build_prior_topology(cost_map: PotentialCostMap, destinations: Sequence[Point], tau: float,
                         epsilon_itm: float = 0.05) -> TopologicalMap:
    """Grid of spacing ``tau`` over the map extent plus every destination,
    joined by Delaunay edges. Grid points closer than ``tau / 2`` to a
    destination are dropped in its favour."""
    x0, y0, x1, y1 = cost_map.extent
    if not (math.isfinite(tau) and tau > 0):
        raise TopologyError(f"tau must be > 0, got {tau}")
    if tau > min(x1 - x0, y1 - y0):
        raise TopologyError(f"tau = {tau} exceeds the scene extent {x1 - x0} x {y1 - y0}")
    dests: list[Point] = []
    for d in destinations:
        if not cost_map.contains(d):
            raise TopologyError(f"destination {tuple(d)} outside the cost map extent")
        if any(math.hypot(d[0] - q[0], d[1] - q[1]) < tau / 2 for q in dests):
            log.warning("destination %s within tau/2 of another destination; merged", tuple(d))
            continue
        dests.append((float(d[0]), float(d[1])))

    nx = int(math.floor((x1 - x0) / tau + 1e-9)) + 1
    ny = int(math.floor((y1 - y0) / tau + 1e-9)) + 1
    topo = TopologicalMap(tau, epsilon_itm, bounds=cost_map.extent)
    for j in range(ny):
        for i in range(nx):
            p = (x0 + i * tau, y0 + j * tau)
            if all(math.hypot(p[0] - q[0], p[1] - q[1]) >= tau / 2 for q in dests):
                topo.add_node(p)
    for d in dests:
        topo.add_node(d, pinned=True)
    pos, ids = topo.positions()
    if len(ids) >= 2:
        for a, b in delaunay_edges(pos):
            topo.add_edge(ids[a], ids[b])
    return topo


def build_destination_topology(destinations: Sequence[Point], tau: float, epsilon_itm: float = 0.05,
                               bounds: tuple[float, float, float, float] | None = None) -> TopologicalMap:
    """Pinned destination nodes and no edges: the starting point of a map
    grown from observations alone."""
    topo = TopologicalMap(tau, epsilon_itm, bounds=bounds)
    for d in destinations:
        if any(math.hypot(d[0] - n.centroid[0], d[1] - n.centroid[1]) < tau / 2
               for n in topo.nodes.values()):
            continue
        topo.add_node(d, pinned=True)
    if not topo.nodes:
        raise TopologyError("no destinations given")
    return topo


# -- ITM -------------------------------------------------------------------

def _sub(a, b):
    return (a[0] - b[0], a[1] - b[1])


def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1]


def itm_update(topo: TopologicalMap, observation: Sequence[float]) -> TopologyDelta:
    """One ITM step for ``observation``; returns the delta without applying it.

    Matching picks the nearest node ``b`` and runner-up ``s``. ``b`` moves
    toward the observation unless pinned or unless the move would bring it
    within ``tau / 2`` of another node. Edge ``(b, s)`` is created and every
    edge ``(b, m)`` whose Thales circle contains ``s`` is dropped, along with
    nodes left without edges. A new node is inserted at the observation
    when it is farther than ``tau`` from ``b`` and outside the Thales
    circle of ``b`` and ``s``.
    """
    if not topo.nodes:
        raise TopologyError("ITM update on an empty map")
    x, y = float(observation[0]), float(observation[1])
    if not (math.isfinite(x) and math.isfinite(y)):
        raise TopologyError(f"non-finite observation {observation}")
    if topo.bounds is not None:
        bx0, by0, bx1, by1 = topo.bounds
        if not (bx0 - 1e-9 <= x <= bx1 + 1e-9 and by0 - 1e-9 <= y <= by1 + 1e-9):
            raise TopologyError(f"observation ({x}, {y}) outside scene bounds {topo.bounds}")
    obs = (x, y)
    pos, ids = topo.positions()
    bi, si, _, _ = kernels.nearest_two(pos, x, y)
    b = ids[bi]
    s = ids[si] if si >= 0 else None
    delta = TopologyDelta(winner=b)
    half = topo.tau / 2

    wb_old = topo.nodes[b].centroid
    wb = wb_old
    if b not in topo.pinned and topo.epsilon_itm > 0:
        cand = (wb_old[0] + topo.epsilon_itm * (x - wb_old[0]),
                wb_old[1] + topo.epsilon_itm * (y - wb_old[1]))
        if cand != wb_old:
            d2 = (pos[:, 0] - cand[0]) ** 2 + (pos[:, 1] - cand[1]) ** 2
            d2[bi] = np.inf
            if float(d2.min(initial=np.inf)) >= half * half:
                wb = cand
                delta.nodes_moved.append((b, wb_old, wb))

    removed_nodes: list[int] = []
    if s is not None:
        ws = topo.nodes[s].centroid
        nb = topo.adjacency[b]
        if s not in nb:
            delta.edges_added.append(edge_key(b, s))
        degree_loss: dict[int, int] = {}
        for m in sorted(nb):
            if m == s:
                continue
            wm = topo.nodes[m].centroid
            if _dot(_sub(wb, ws), _sub(wm, ws)) < 0:
                delta.edges_removed.append(edge_key(b, m))
                degree_loss[m] = degree_loss.get(m, 0) + 1
        for m, lost in sorted(degree_loss.items()):
            if len(topo.adjacency[m]) == lost and m not in topo.pinned:
                removed_nodes.append(m)
        delta.nodes_removed.extend(removed_nodes)

    dist_b = math.hypot(x - wb[0], y - wb[1])
    outside_thales = s is None or _dot(_sub(wb, obs), _sub(topo.nodes[s].centroid, obs)) > 0
    if dist_b > topo.tau and outside_thales:
        new_id = topo.next_id
        delta.nodes_added.append((new_id, obs))
        delta.edges_added.append(edge_key(new_id, b))

    node = topo.nodes[b]
    if topo.run is not None and topo.run[0] == b:
        run = (b, topo.run[1] + 1)
    else:
        run = (b, 1)
    delta.run = run
    delta.counters.append((b, node.hit_count + 1, max(node.dwell_accumulator, run[1])))
    return delta


def apply_delta(topo: TopologicalMap, delta: TopologyDelta) -> TopologicalMap:
    """Apply ``delta`` in place and return the map.

    Raises :class:`StaleDeltaError` if the delta refers to nodes or edges
    the map does not have; the map is left untouched in that case.
    """
    for nid, old, _new in delta.nodes_moved:
        if nid not in topo.nodes:
            raise StaleDeltaError(f"moved node {nid} not in map")
        if topo.nodes[nid].centroid != tuple(old):
            raise StaleDeltaError(f"node {nid} is not at the delta's pre-move position")
    for nid in delta.nodes_removed:
        if nid not in topo.nodes:
            raise StaleDeltaError(f"removed node {nid} not in map")
        if nid in topo.pinned:
            raise StaleDeltaError(f"delta removes pinned node {nid}")
    for a, b in delta.edges_removed:
        if a not in topo.adjacency or b not in topo.adjacency[a]:
            raise StaleDeltaError(f"removed edge ({a}, {b}) not in map")
    added = {nid for nid, _ in delta.nodes_added}
    for nid in added:
        if nid in topo.nodes or nid < topo.next_id:
            raise StaleDeltaError(f"added node {nid} already allocated")
    gone = set(delta.nodes_removed)
    for a, b in delta.edges_added:
        for v in (a, b):
            if v in gone or (v not in topo.nodes and v not in added):
                raise StaleDeltaError(f"added edge ({a}, {b}) references unknown node {v}")
    for nid, _, _ in delta.counters:
        if nid not in topo.nodes:
            raise StaleDeltaError(f"counter update for unknown node {nid}")

    for nid, _old, new in delta.nodes_moved:
        topo.nodes[nid].centroid = (float(new[0]), float(new[1]))
    for a, b in delta.edges_removed:
        topo.adjacency[a].discard(b)
        topo.adjacency[b].discard(a)
    for nid in delta.nodes_removed:
        for m in topo.adjacency.pop(nid):
            topo.adjacency[m].discard(nid)
        del topo.nodes[nid]
        if topo.run is not None and topo.run[0] == nid:
            topo.run = None
    for nid, p in delta.nodes_added:
        topo.nodes[nid] = TopoNode(nid, (float(p[0]), float(p[1])))
        topo.adjacency[nid] = set()
        topo.next_id = max(topo.next_id, nid + 1)
    for a, b in delta.edges_added:
        topo.add_edge(a, b)
    for nid, hits, dwell in delta.counters:
        topo.nodes[nid].hit_count = hits
        topo.nodes[nid].dwell_accumulator = dwell
    if delta.run is not None:
        topo.run = delta.run
    if delta.structural:
        topo._pos_cache = None
    return topo


# -- text export -----------------------------------------------------------

TOPOLOGY_HEADER = "topology-format 1"


def format_topology(topo: TopologicalMap) -> str:
    """``node id x y`` and ``edge i j`` lines, plus ``meta``/``stat``/``pin``
    lines carrying the remaining state; plot consumers may skip those."""
    out = [TOPOLOGY_HEADER,
           f"meta tau {topo.tau!r}",
           f"meta epsilon_itm {topo.epsilon_itm!r}",
           f"meta next_id {topo.next_id}"]
    if topo.bounds is not None:
        out.append("meta bounds " + " ".join(repr(float(v)) for v in topo.bounds))
    if topo.run is not None:
        out.append(f"meta run {topo.run[0]} {topo.run[1]}")
    for nid in sorted(topo.nodes):
        x, y = topo.nodes[nid].centroid
        out.append(f"node {nid} {x!r} {y!r}")
    for a, b in sorted(topo.edges):
        out.append(f"edge {a} {b}")
    for nid in sorted(topo.pinned):
        out.append(f"pin {nid}")
    for nid in sorted(topo.nodes):
        n = topo.nodes[nid]
        if n.hit_count or n.dwell_accumulator:
            out.append(f"stat {nid} {n.hit_count} {n.dwell_accumulator}")
    return "\n".join(out) + "\n"


def save_topology(topo: TopologicalMap, path: str | Path) -> None:
    Path(path).write_text(format_topology(topo), encoding="utf-8")


def parse_topology(text: str) -> TopologicalMap:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != TOPOLOGY_HEADER:
        raise TopologyError(f"expected header '{TOPOLOGY_HEADER}'")
    meta: dict[str, list[str]] = {}
    body = []
    for k, ln in enumerate(lines[1:], start=2):
        key, *rest = ln.split()
        if key == "meta":
            meta[rest[0]] = rest[1:]
        else:
            body.append((k, key, rest))
    try:
        bounds = tuple(float(v) for v in meta["bounds"]) if "bounds" in meta else None
        topo = TopologicalMap(float(meta["tau"][0]), float(meta["epsilon_itm"][0]), bounds=bounds)
        next_id = int(meta["next_id"][0])
        run = (int(meta["run"][0]), int(meta["run"][1])) if "run" in meta else None
    except (KeyError, IndexError, ValueError) as exc:
        raise TopologyError(f"bad topology metadata: {exc}") from None
    for k, key, rest in body:
        try:
            if key == "node":
                nid = int(rest[0])
                topo.nodes[nid] = TopoNode(nid, (float(rest[1]), float(rest[2])))
                topo.adjacency[nid] = set()
            elif key == "edge":
                topo.add_edge(int(rest[0]), int(rest[1]))
            elif key == "pin":
                topo.pin(int(rest[0]))
            elif key == "stat":
                n = topo.nodes[int(rest[0])]
                n.hit_count, n.dwell_accumulator = int(rest[1]), int(rest[2])
            else:
                raise TopologyError(f"unknown record '{key}'")
        except (IndexError, ValueError, KeyError) as exc:
            raise TopologyError(f"line {k}: {exc}") from None
    topo.next_id = max(next_id, max(topo.nodes, default=-1) + 1)
    if run is not None and run[0] in topo.nodes:
        topo.run = run
    return topo


def load_topology(path: str | Path) -> TopologicalMap:
    return parse_topology(Path(path).read_text(encoding="utf-8"))


def nodes_within(topo: TopologicalMap, points: Iterable[Point], radius: float) -> bool:
    pos, _ = topo.positions()
    for p in points:
        if not np.any(np.hypot(pos[:, 0] - p[0], pos[:, 1] - p[1]) <= radius):
            return False
    return True
