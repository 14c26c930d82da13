"""The growing HMM: states over (node, goal) pairs, cost-seeded priors and
transitions, goal discovery and incremental Baum-Welch learning.

Priors and transition rows are stored as unnormalized weights; the
probabilities are the weights divided by their totals. New states and
edges enter with their raw seed weights, so a row that grows keeps the
same relative scale between seeded entries, and learning rescales a
row's weights without changing their total.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .scene import PotentialCostMap
from .topology import StaleDeltaError, TopologicalMap, TopologyDelta, edge_key

log = logging.getLogger(__name__)

Point = tuple[float, float]
State = tuple[int, int]  # (node id, goal id)

SELF_WEIGHT = 0.05
DOWNHILL_WEIGHT = 0.8
LEVEL_WEIGHT = 0.5
UPHILL_WEIGHT = 0.2

MODEL_MAGIC = b"GHMM"
MODEL_VERSION = 1


class ModelError(ValueError):
    pass


class NumericalUnderflowError(ArithmeticError):
    """The observations have zero likelihood under the model."""


@dataclass(frozen=True)
class LearningConfig:
    epsilon: float = 0.05
    sigma_obs: float = 1.0
    dwell_threshold: int = 50
    bw_learning_rate: float = 0.1
    # pseudo-count weight of the old parameters in the blended update
    bw_prior_weight: float = 10.0
    learned_threshold: float = 1e-2
    goal_merge_radius: float = 2.0
    pi0: float = 0.5
    a0: float = 0.5

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ModelError(f"epsilon must be > 0, got {self.epsilon}")
        if not (math.isfinite(self.sigma_obs) and self.sigma_obs > 0):
            raise ModelError(f"sigma_obs must be > 0, got {self.sigma_obs}")
        if not 0 < self.bw_learning_rate <= 1:
            raise ModelError(f"bw_learning_rate must lie in (0, 1], got {self.bw_learning_rate}")
        if not self.bw_prior_weight > 0:
            raise ModelError("bw_prior_weight must be > 0")
        if self.dwell_threshold < 1:
            raise ModelError("dwell_threshold must be >= 1")
        if not (self.pi0 > 0 and self.a0 > 0):
            raise ModelError("pi0 and a0 must be > 0")
        if self.goal_merge_radius < 0:
            raise ModelError("goal_merge_radius must be >= 0")

    @property
    def covariance(self) -> np.ndarray:
        return self.sigma_obs ** 2 * np.eye(2)


@dataclass(frozen=True)
class Goal:
    node_id: int
    point: Point


@dataclass
class GoalSet:
    goals: dict[int, Goal] = field(default_factory=dict)
    dwell_threshold: int = 50
    next_id: int = 0

    def add(self, node_id: int, point: Sequence[float]) -> int:
        gid = self.next_id
        self.next_id += 1
        self.goals[gid] = Goal(node_id, (float(point[0]), float(point[1])))
        return gid

    @classmethod
    def from_topology(cls, topo: TopologicalMap, dwell_threshold: int = 50) -> "GoalSet":
        """One goal per pinned node, in node-id order."""
        gs = cls(dwell_threshold=dwell_threshold)
        for nid in sorted(topo.pinned):
            gs.add(nid, topo.nodes[nid].centroid)
        return gs

    def __len__(self):
        return len(self.goals)


@dataclass(frozen=True)
class ObservationSequence:
    """Positions observed at consecutive timesteps, with the goal the
    sequence is known to head for when training (``None`` if unknown)."""

    positions: np.ndarray
    goal_id: int | None = None

    def __post_init__(self):
        pos = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(-1, 2)
        object.__setattr__(self, "positions", pos)

    def __len__(self):
        return len(self.positions)


def as_sequence(seq) -> ObservationSequence:
    return seq if isinstance(seq, ObservationSequence) else ObservationSequence(np.asarray(seq))


def transition_seed(alpha: float, beta: float, is_self: bool, epsilon: float) -> float:
    """Unnormalized weight for moving from a node of cost ``beta`` to a node
    of cost ``alpha``: high to low cost 0.8, similar cost 0.5, low to high
    0.2, and 0.05 for staying put."""
    if is_self:
        return SELF_WEIGHT
    diff = beta - alpha
    if abs(diff) <= epsilon:
        return LEVEL_WEIGHT
    return DOWNHILL_WEIGHT if diff > 0 else UPHILL_WEIGHT


@dataclass
class _Arrays:
    states: list[State]
    index: dict[State, int]
    pi: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    node_ids: list[int]
    goal_ids: list[int]
    state_node: np.ndarray  # index into node_ids
    state_goal: np.ndarray  # index into goal_ids
    means: np.ndarray


class GhmmModel:
    """HMM over (node, goal) states.

    ``mode`` selects how new states and transitions are seeded: ``"cost"``
    uses the potential cost map, ``"preset"`` uses the constant defaults
    ``config.pi0`` and ``config.a0``.
    """

    def __init__(self, config: LearningConfig, goals: GoalSet, mode: str = "cost",
                 bounds: tuple[float, float, float, float] | None = None):
        if mode not in ("cost", "preset"):
            raise ModelError(f"unknown seeding mode {mode!r}")
        self.config = config
        self.goals = goals
        self.mode = mode
        self.bounds = bounds
        self.node_pos: dict[int, Point] = {}
        self.node_cost: dict[int, float] = {}
        self.adjacency: dict[int, set[int]] = {}
        self.prior_w: dict[State, float] = {}
        self.trans_w: dict[State, dict[int, float]] = {}
        self.learned: dict[State, set[int]] = {}
        self.topology_id: str | None = None
        self._arrays: _Arrays | None = None

    # -- seeding -------------------------------------------------------------

    def _prior_seed(self, node: int) -> float:
        if self.mode == "preset":
            return self.config.pi0
        return 1.0 - self.node_cost[node]

    def _trans_seed(self, src: int, dst: int) -> float:
        if self.mode == "preset":
            return self.config.a0
        return transition_seed(self.node_cost[dst], self.node_cost[src], src == dst, self.config.epsilon)

    def _add_state(self, node: int, goal: int) -> None:
        st = (node, goal)
        self.prior_w[st] = self._prior_seed(node)
        row = {node: self._trans_seed(node, node)}
        for m in sorted(self.adjacency[node]):
            row[m] = self._trans_seed(node, m)
        self.trans_w[st] = row
        self.learned[st] = set()

    # -- derived arrays --------------------------------------------------------

    def invalidate(self) -> None:
        self._arrays = None

    @property
    def arrays(self) -> _Arrays:
        if self._arrays is None:
            self._arrays = self._build_arrays()
        return self._arrays

    def _build_arrays(self) -> _Arrays:
        node_ids = sorted(self.node_pos)
        goal_ids = sorted(self.goals.goals)
        node_ix = {n: k for k, n in enumerate(node_ids)}
        goal_ix = {g: k for k, g in enumerate(goal_ids)}
        states = [(n, g) for n in node_ids for g in goal_ids]
        index = {s: k for k, s in enumerate(states)}
        pw = np.array([self.prior_w[s] for s in states], dtype=np.float64)
        total = pw.sum()
        pi = pw / total if total > 0 else np.full(len(states), 1.0 / max(len(states), 1))
        indptr = np.zeros(len(states) + 1, dtype=np.int32)
        indices: list[int] = []
        data: list[float] = []
        for k, (n, g) in enumerate(states):
            row = self.trans_w[(n, g)]
            tot = math.fsum(row.values())
            for m in sorted(row):
                indices.append(index[(m, g)])
                data.append(row[m] / tot if tot > 0 else 1.0 / len(row))
            indptr[k + 1] = len(indices)
        means = np.array([self.node_pos[n] for n, _ in states], dtype=np.float64).reshape(-1, 2)
        return _Arrays(
            states=states,
            index=index,
            pi=pi,
            indptr=indptr,
            indices=np.asarray(indices, dtype=np.int32),
            data=np.asarray(data, dtype=np.float64),
            node_ids=node_ids,
            goal_ids=goal_ids,
            state_node=np.array([node_ix[n] for n, _ in states], dtype=np.int64),
            state_goal=np.array([goal_ix[g] for _, g in states], dtype=np.int64),
            means=np.ascontiguousarray(means),
        )

    @property
    def states(self) -> list[State]:
        return self.arrays.states

    @property
    def n_states(self) -> int:
        return len(self.node_pos) * len(self.goals)

    @property
    def prior(self) -> np.ndarray:
        return self.arrays.pi

    def transition_matrix(self) -> np.ndarray:
        """Dense row-stochastic matrix; for tests and small models."""
        a = self.arrays
        n = len(a.states)
        out = np.zeros((n, n))
        rows = np.repeat(np.arange(n), np.diff(a.indptr))
        out[rows, a.indices] = a.data
        return out

    def csr(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        a = self.arrays
        return a.indptr, a.indices, a.data

    def copy(self) -> "GhmmModel":
        other = copy.deepcopy(self)
        return other

    # -- checks ------------------------------------------------------------------

    def check_invariants(self, tol: float = 1e-9) -> None:
        a = self.arrays
        n = len(a.states)
        if n == 0:
            raise ModelError("model has no states")
        if abs(a.pi.sum() - 1.0) > tol or np.any(a.pi < 0):
            raise ModelError(f"prior sums to {a.pi.sum()!r}")
        if np.any(a.data < 0):
            raise ModelError("negative transition probability")
        sums = np.add.reduceat(a.data, a.indptr[:-1]) if len(a.data) else np.zeros(n)
        if np.any(np.diff(a.indptr) == 0) or np.any(np.abs(sums - 1.0) > tol):
            bad = int(np.argmax(np.abs(sums - 1.0)))
            raise ModelError(f"transition row {a.states[bad]} sums to {sums[bad]!r}")
        rows = np.repeat(np.arange(n), np.diff(a.indptr))
        for i, j, p in zip(rows, a.indices, a.data):
            if i == j or p == 0:
                continue
            (ni, gi), (nj, gj) = a.states[i], a.states[j]
            if gi != gj or nj not in self.adjacency.get(ni, ()):
                raise ModelError(f"transition {a.states[i]} -> {a.states[j]} violates sparsity")
        for gid, goal in self.goals.goals.items():
            if goal.node_id not in self.node_pos:
                raise ModelError(f"goal {gid} sits on missing node {goal.node_id}")
            if tuple(self.node_pos[goal.node_id]) != tuple(goal.point):
                raise ModelError(f"goal {gid} drifted off its node")
        for nb_a, nbs in self.adjacency.items():
            for b in nbs:
                if nb_a not in self.adjacency.get(b, ()):
                    raise ModelError(f"asymmetric adjacency ({nb_a}, {b})")
        if not self.config.sigma_obs > 0:
            raise ModelError("covariance not positive definite")

    # -- observation model -------------------------------------------------------

    def log_likelihoods(self, positions: np.ndarray, goal_id: int | None = None) -> np.ndarray:
        """(T, n_states) Gaussian log densities; states of other goals get
        ``-inf`` when ``goal_id`` is given."""
        a = self.arrays
        pos = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
        s2 = self.config.sigma_obs ** 2
        node_means = np.array([self.node_pos[n] for n in a.node_ids]).reshape(-1, 2)
        d2 = ((pos[:, None, :] - node_means[None, :, :]) ** 2).sum(axis=2)
        node_ll = -0.5 * d2 / s2 - math.log(2 * math.pi * s2)
        out = node_ll[:, a.state_node]
        if goal_id is not None:
            if goal_id not in self.goals.goals:
                raise ModelError(f"unknown goal {goal_id}")
            out[:, a.state_goal != a.goal_ids.index(goal_id)] = -np.inf
        return out

    def check_in_bounds(self, positions: np.ndarray) -> None:
        if self.bounds is None:
            return
        x0, y0, x1, y1 = self.bounds
        p = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
        bad = ~((p[:, 0] >= x0 - 1e-9) & (p[:, 0] <= x1 + 1e-9)
                & (p[:, 1] >= y0 - 1e-9) & (p[:, 1] <= y1 + 1e-9))
        if bad.any():
            k = int(np.argmax(bad))
            raise ModelError(f"observation {k} at {tuple(p[k])} outside scene bounds {self.bounds}")


def shifted_emissions(logb: np.ndarray) -> tuple[np.ndarray, float]:
    """Rescale each row of log densities so its maximum is 1; returns the
    emission matrix and the total log shift removed."""
    shift = logb.max(axis=1)
    if not np.all(np.isfinite(shift)):
        raise NumericalUnderflowError("an observation has zero density under every state")
    B = np.exp(logb - shift[:, None])
    return np.ascontiguousarray(B), float(shift.sum())


def observation_likelihood(model: GhmmModel, state_index: int, obs: Sequence[float]) -> float:
    """Bivariate Gaussian density of ``obs`` around the state's node."""
    node, _ = model.arrays.states[state_index]
    cx, cy = model.node_pos[node]
    s2 = model.config.sigma_obs ** 2
    d2 = (obs[0] - cx) ** 2 + (obs[1] - cy) ** 2
    return math.exp(-0.5 * d2 / s2) / (2 * math.pi * s2)


# -- construction ------------------------------------------------------------------

def _sync_nodes(model: GhmmModel, topo: TopologicalMap, cost_map: PotentialCostMap | None) -> None:
    for nid in sorted(topo.nodes):
        p = topo.nodes[nid].centroid
        if cost_map is not None and not cost_map.contains(p):
            raise ModelError(f"node {nid} at {p} outside the cost map extent")
        model.node_pos[nid] = p
        model.node_cost[nid] = float(cost_map.sample(p)[0]) if cost_map is not None else 0.0
        model.adjacency[nid] = set(topo.adjacency[nid])


def _populate(model: GhmmModel) -> GhmmModel:
    if not model.node_pos:
        raise ModelError("topology has no nodes")
    if not model.goals.goals:
        raise ModelError("goal set is empty")
    for gid, goal in model.goals.goals.items():
        if goal.node_id not in model.node_pos:
            raise ModelError(f"goal {gid} refers to unknown node {goal.node_id}")
    for n in sorted(model.node_pos):
        for g in sorted(model.goals.goals):
            model._add_state(n, g)
    return model


def init_model_from_topology(topo: TopologicalMap, cost_map: PotentialCostMap, goals: GoalSet,
                             config: LearningConfig) -> GhmmModel:
    """Cost-seeded model: priors ``1 - f(n)`` and transitions from
    :func:`transition_seed` over topology edges plus self-loops."""
    model = GhmmModel(config, copy.deepcopy(goals), "cost", bounds=topo.bounds or cost_map.extent)
    _sync_nodes(model, topo, cost_map)
    return _populate(model)


def make_baseline(topo: TopologicalMap, goals: GoalSet, pi0: float | None = None,
                  a0: float | None = None, config: LearningConfig | None = None,
                  cost_map: PotentialCostMap | None = None) -> GhmmModel:
    """Same structure as :func:`init_model_from_topology` but every prior is
    ``pi0`` and every allowed transition ``a0`` before normalization."""
    config = config or LearningConfig()
    overrides = {k: v for k, v in (("pi0", pi0), ("a0", a0)) if v is not None}
    if overrides:
        config = LearningConfig(**{**asdict(config), **overrides})
    bounds = topo.bounds or (cost_map.extent if cost_map is not None else None)
    model = GhmmModel(config, copy.deepcopy(goals), "preset", bounds=bounds)
    _sync_nodes(model, topo, cost_map)
    return _populate(model)


# -- structure updates ---------------------------------------------------------------

def apply_topology_delta(model: GhmmModel, delta: TopologyDelta,
                         cost_map: PotentialCostMap | None) -> GhmmModel:
    """Mirror a topology delta in the state space, in place.

    Moved nodes update their means and re-seed their transitions that
    learning has not touched. Counter-only deltas leave the model as is.
    """
    if not delta.structural:
        return model
    goal_nodes = {g.node_id for g in model.goals.goals.values()}
    added = {nid for nid, _ in delta.nodes_added}
    for nid, _old, _new in delta.nodes_moved:
        if nid not in model.node_pos:
            raise StaleDeltaError(f"moved node {nid} unknown to the model")
        if nid in goal_nodes:
            raise StaleDeltaError(f"delta moves goal node {nid}")
    for nid in delta.nodes_removed:
        if nid not in model.node_pos:
            raise StaleDeltaError(f"removed node {nid} unknown to the model")
        if nid in goal_nodes:
            raise StaleDeltaError(f"delta removes goal node {nid}")
    for a, b in delta.edges_removed:
        if b not in model.adjacency.get(a, ()):
            raise StaleDeltaError(f"removed edge ({a}, {b}) unknown to the model")
    for nid in added:
        if nid in model.node_pos:
            raise StaleDeltaError(f"added node {nid} already in the model")
    gone = set(delta.nodes_removed)
    for a, b in delta.edges_added:
        for v in (a, b):
            if v in gone or (v not in model.node_pos and v not in added):
                raise StaleDeltaError(f"added edge ({a}, {b}) references unknown node {v}")
    needs_cost = model.mode == "cost"
    if needs_cost and (delta.nodes_added or delta.nodes_moved) and cost_map is None:
        raise ModelError("cost map required to seed new or moved nodes")

    goal_ids = sorted(model.goals.goals)
    for nid, _old, new in delta.nodes_moved:
        model.node_pos[nid] = (float(new[0]), float(new[1]))
        if needs_cost:
            model.node_cost[nid] = float(cost_map.sample(new)[0])

    def drop_edge(a: int, b: int) -> None:
        model.adjacency[a].discard(b)
        model.adjacency[b].discard(a)
        for g in goal_ids:
            model.trans_w[(a, g)].pop(b, None)
            model.trans_w[(b, g)].pop(a, None)
            model.learned[(a, g)].discard(b)
            model.learned[(b, g)].discard(a)

    for a, b in delta.edges_removed:
        drop_edge(a, b)
    for nid in delta.nodes_removed:
        for m in sorted(model.adjacency[nid]):
            drop_edge(nid, m)
        for g in goal_ids:
            del model.prior_w[(nid, g)], model.trans_w[(nid, g)], model.learned[(nid, g)]
        del model.adjacency[nid], model.node_pos[nid]
        model.node_cost.pop(nid, None)

    for nid, p in delta.nodes_added:
        p = (float(p[0]), float(p[1]))
        if needs_cost and not cost_map.contains(p):
            raise ModelError(f"node {nid} at {p} outside the cost map extent")
        model.node_pos[nid] = p
        model.node_cost[nid] = float(cost_map.sample(p)[0]) if needs_cost else 0.0
        model.adjacency[nid] = set()
        for g in goal_ids:
            model._add_state(nid, g)

    for a, b in delta.edges_added:
        a, b = edge_key(a, b)
        if b in model.adjacency[a]:
            continue
        model.adjacency[a].add(b)
        model.adjacency[b].add(a)
        for g in goal_ids:
            model.trans_w[(a, g)][b] = model._trans_seed(a, b)
            model.trans_w[(b, g)][a] = model._trans_seed(b, a)

    if needs_cost:
        for nid, _old, _new in delta.nodes_moved:
            if nid not in model.node_pos:
                continue
            for g in goal_ids:
                st = (nid, g)
                row, learned = model.trans_w[st], model.learned[st]
                for m in row:
                    if m not in learned:
                        row[m] = model._trans_seed(nid, m)
                for m in model.adjacency[nid]:
                    if nid not in model.learned[(m, g)]:
                        model.trans_w[(m, g)][nid] = model._trans_seed(m, nid)
    model.invalidate()
    return model


def update_goals(model: GhmmModel, topo: TopologicalMap) -> GhmmModel:
    """Promote nodes whose dwell count reached the threshold to goals.

    A candidate within ``goal_merge_radius`` of an existing goal is
    skipped. New goal nodes are pinned in ``topo`` so they stay put.
    """
    threshold = model.config.dwell_threshold
    radius = model.config.goal_merge_radius
    added = []
    for nid in sorted(topo.nodes):
        node = topo.nodes[nid]
        if node.dwell_accumulator < threshold or nid not in model.node_pos:
            continue
        p = model.node_pos[nid]
        if any(g.node_id == nid or math.hypot(p[0] - g.point[0], p[1] - g.point[1]) <= radius
               for g in model.goals.goals.values()):
            continue
        gid = model.goals.add(nid, p)
        topo.pin(nid)
        added.append(gid)
        for n in sorted(model.node_pos):
            model._add_state(n, gid)
    if added:
        log.info("discovered goals %s", added)
        model.invalidate()
    return model


# -- learning ------------------------------------------------------------------------

def sequence_loglik(model: GhmmModel, sequence) -> float:
    """log P(O_1..O_T) by the scaled forward algorithm; ``-inf`` when the
    sequence is impossible under the model's sparsity pattern."""
    seq = as_sequence(sequence)
    if len(seq) < 1:
        raise ModelError("sequence must hold at least one observation")
    logb = model.log_likelihoods(seq.positions, seq.goal_id)
    B, shift = shifted_emissions(logb)
    indptr, indices, data = model.csr()
    ll, fail = kernels.forward_loglik(indptr, indices, data, model.prior, B)
    if fail >= 0:
        return -math.inf
    return ll + shift


def incremental_baum_welch(model: GhmmModel, sequence, learning_rate: float | None = None) -> GhmmModel:
    """Blend one sequence's expected statistics into pi and A, in place.

    With rate ``r`` and pseudo-count weight ``k = config.bw_prior_weight``::

        pi'   = (1 - r) pi + r gamma_1
        A'_ij = ((1 - r) k A_ij + r xi_ij) / ((1 - r) k + r gamma_i)

    where ``gamma_i`` and ``xi_ij`` are expected visit and transition
    counts over the sequence. ``r = 1`` is one exact Baum-Welch step and
    ``r = 0`` leaves the model untouched. Rows never visited keep their
    parameters; the observation model is not re-estimated.
    """
    seq = as_sequence(sequence)
    rate = model.config.bw_learning_rate if learning_rate is None else float(learning_rate)
    if not 0 <= rate <= 1:
        raise ModelError(f"learning rate must lie in [0, 1], got {rate}")
    if len(seq) < 2:
        raise ModelError("Baum-Welch needs a sequence of at least 2 observations")
    model.check_in_bounds(seq.positions)
    if rate == 0:
        return model

    logb = model.log_likelihoods(seq.positions, seq.goal_id)
    B, _ = shifted_emissions(logb)
    a = model.arrays
    _, gamma0, gsum, xsum, fail = kernels.forward_backward(a.indptr, a.indices, a.data, a.pi, B)
    if fail >= 0:
        raise NumericalUnderflowError(
            f"sequence irreconcilable with the model at observation {fail} (scaled forward mass is zero)")

    pi_new = (1.0 - rate) * a.pi + rate * gamma0
    k = model.config.bw_prior_weight
    old_w = (1.0 - rate) * k
    prior_total = math.fsum(model.prior_w[s] for s in a.states)
    if not prior_total > 0:
        prior_total = 1.0
    for i, st in enumerate(a.states):
        model.prior_w[st] = float(pi_new[i]) * prior_total

    thr = model.config.learned_threshold
    for i, (n, g) in enumerate(a.states):
        denom = old_w + rate * gsum[i]
        if not denom > 0:
            continue
        lo, hi = a.indptr[i], a.indptr[i + 1]
        row = model.trans_w[(n, g)]
        learned = model.learned[(n, g)]
        row_total = math.fsum(row.values())
        for kk in range(lo, hi):
            m = a.states[a.indices[kk]][0]
            p = (old_w * a.data[kk] + rate * xsum[kk]) / denom
            row[m] = float(p) * row_total
            if xsum[kk] >= thr:
                learned.add(m)
    model.invalidate()
    return model


# -- serialization ----------------------------------------------------------------------

def _model_arrays(model: GhmmModel) -> dict[str, np.ndarray]:
    a = model.arrays
    node_ids = a.node_ids
    edges = sorted(edge_key(x, y) for x in model.adjacency for y in model.adjacency[x] if x < y)
    src, dst, w, learned = [], [], [], []
    for i, st in enumerate(a.states):
        row = model.trans_w[st]
        for m in sorted(row):
            src.append(i)
            dst.append(a.index[(m, st[1])])
            w.append(row[m])
            learned.append(1 if m in model.learned[st] else 0)
    rows = np.repeat(np.arange(len(a.states)), np.diff(a.indptr))
    return {
        "node_ids": np.array(node_ids, dtype="<i8"),
        "node_pos": np.array([model.node_pos[n] for n in node_ids], dtype="<f8").reshape(-1, 2),
        "node_cost": np.array([model.node_cost.get(n, 0.0) for n in node_ids], dtype="<f8"),
        "edges": np.array(edges, dtype="<i8").reshape(-1, 2),
        "state_node": np.array([s[0] for s in a.states], dtype="<i8"),
        "state_goal": np.array([s[1] for s in a.states], dtype="<i8"),
        "prior_weight": np.array([model.prior_w[s] for s in a.states], dtype="<f8"),
        "trans_src": np.array(src, dtype="<i8"),
        "trans_dst": np.array(dst, dtype="<i8"),
        "trans_weight": np.array(w, dtype="<f8"),
        "trans_learned": np.array(learned, dtype="u1"),
        "pi": a.pi.astype("<f8"),
        "A_row": rows.astype("<i8"),
        "A_col": a.indices.astype("<i8"),
        "A_val": a.data.astype("<f8"),
        "sigma": model.config.covariance.astype("<f8"),
    }


def model_to_bytes(model: GhmmModel) -> bytes:
    """Versioned binary container: magic, uint32 version, uint32 header
    length, JSON header, then 8-byte aligned little-endian arrays."""
    arrays = _model_arrays(model)
    layout = {}
    offset = 0
    for name, arr in arrays.items():
        layout[name] = {"dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset}
        offset += (arr.nbytes + 7) // 8 * 8
    header = {
        "format": "pedghmm-model",
        "version": MODEL_VERSION,
        "mode": model.mode,
        "config": asdict(model.config),
        "bounds": list(model.bounds) if model.bounds is not None else None,
        "topology_id": model.topology_id,
        "goals": [[gid, g.node_id, g.point[0], g.point[1]] for gid, g in sorted(model.goals.goals.items())],
        "goal_next_id": model.goals.next_id,
        "dwell_threshold": model.goals.dwell_threshold,
        "arrays": layout,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    hbytes += b" " * ((-len(MODEL_MAGIC) - 8 - len(hbytes)) % 8)
    out = [MODEL_MAGIC, struct.pack("<II", MODEL_VERSION, len(hbytes)), hbytes]
    for arr in arrays.values():
        raw = np.ascontiguousarray(arr).tobytes()
        out.append(raw + b"\0" * ((-len(raw)) % 8))
    return b"".join(out)


def model_from_bytes(data: bytes) -> GhmmModel:
    if data[:4] != MODEL_MAGIC:
        raise ModelError("not a model file (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != MODEL_VERSION:
        raise ModelError(f"unsupported model format version {version}")
    header = json.loads(data[12:12 + hlen])
    base = 12 + hlen
    arr = {}
    for name, entry in header["arrays"].items():
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr[name] = np.frombuffer(data, dtype=dt, count=count,
                                  offset=base + entry["offset"]).reshape(entry["shape"]).copy()
    goals = GoalSet(dwell_threshold=header["dwell_threshold"], next_id=header["goal_next_id"])
    for gid, nid, x, y in header["goals"]:
        goals.goals[int(gid)] = Goal(int(nid), (float(x), float(y)))
    bounds = tuple(header["bounds"]) if header["bounds"] is not None else None
    model = GhmmModel(LearningConfig(**header["config"]), goals, header["mode"], bounds=bounds)
    model.topology_id = header["topology_id"]
    for nid, p, c in zip(arr["node_ids"], arr["node_pos"], arr["node_cost"]):
        model.node_pos[int(nid)] = (float(p[0]), float(p[1]))
        model.node_cost[int(nid)] = float(c)
        model.adjacency[int(nid)] = set()
    for a, b in arr["edges"]:
        model.adjacency[int(a)].add(int(b))
        model.adjacency[int(b)].add(int(a))
    states = list(zip(arr["state_node"].tolist(), arr["state_goal"].tolist()))
    for st, w in zip(states, arr["prior_weight"]):
        model.prior_w[st] = float(w)
        model.trans_w[st] = {}
        model.learned[st] = set()
    for s, d, w, lr in zip(arr["trans_src"], arr["trans_dst"], arr["trans_weight"], arr["trans_learned"]):
        st = states[int(s)]
        m = states[int(d)][0]
        model.trans_w[st][m] = float(w)
        if lr:
            model.learned[st].add(m)
    return model


def save_model(model: GhmmModel, path: str | Path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path: str | Path) -> GhmmModel:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ModelError(f"cannot read model file {path}: {exc.strerror}") from None
    return model_from_bytes(data)


def dump_model_text(model: GhmmModel) -> str:
    """Lossless line-oriented dump (floats in shortest round-trip form)."""
    a = model.arrays
    out = [f"ghmm-dump {MODEL_VERSION}", f"mode {model.mode}",
           "config " + json.dumps(asdict(model.config), sort_keys=True),
           f"bounds {model.bounds!r}", f"topology_id {model.topology_id}"]
    for gid, g in sorted(model.goals.goals.items()):
        out.append(f"goal {gid} node {g.node_id} {g.point[0]!r} {g.point[1]!r}")
    for nid in a.node_ids:
        x, y = model.node_pos[nid]
        out.append(f"node {nid} {x!r} {y!r} cost {model.node_cost.get(nid, 0.0)!r} "
                   f"adj {','.join(map(str, sorted(model.adjacency[nid])))}")
    for i, st in enumerate(a.states):
        out.append(f"state {i} {st[0]} {st[1]} prior_w {model.prior_w[st]!r} pi {float(a.pi[i])!r}")
        row = model.trans_w[st]
        tot = math.fsum(row.values())
        for m in sorted(row):
            flag = "L" if m in model.learned[st] else "S"
            out.append(f"  trans {st[0]}->{m} w {row[m]!r} p {row[m] / tot!r} {flag}")
    return "\n".join(out) + "\n"
