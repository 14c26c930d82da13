"""Online filtering over a GHMM and H-step prediction of position and goal.

Every function here treats the model as read-only, so one model can serve
any number of tracked pedestrians.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import kernels
from .ghmm import GhmmModel

UNDERFLOW_FLOOR = 1e-300


class DegenerateBeliefError(ArithmeticError):
    """The filter lost all probability mass; re-initialise from the prior."""


@dataclass(frozen=True)
class Belief:
    weights: np.ndarray
    timestep: int = 0

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)


class Marginal(NamedTuple):
    ids: list[int]
    probs: np.ndarray

    def as_dict(self) -> dict[int, float]:
        return {i: float(p) for i, p in zip(self.ids, self.probs)}

    def mode(self) -> int:
        return self.ids[int(np.argmax(self.probs))]


@dataclass(frozen=True)
class PredictionResult:
    horizon: int
    state_belief: Belief
    expected_position: tuple[float, float]
    map_goal: int


def _check(model: GhmmModel, belief: Belief) -> None:
    if len(belief.weights) != model.n_states:
        raise ValueError(f"belief has {len(belief.weights)} entries, model has {model.n_states} states")


def initial_belief(model: GhmmModel) -> Belief:
    return Belief(model.prior.copy(), 0)


def filter_update(model: GhmmModel, belief: Belief, obs: Sequence[float]) -> Belief:
    """Predict through A, weight by the observation density, renormalise."""
    _check(model, belief)
    model.check_in_bounds(obs)
    logb = model.log_likelihoods(np.asarray(obs, dtype=np.float64).reshape(1, 2))[0]
    # the normaliser absorbs any constant factor, so rescale before exp
    lik = np.exp(logb - logb.max())
    indptr, indices, data = model.csr()
    out, total = kernels.filter_step(indptr, indices, data, np.ascontiguousarray(belief.weights), lik)
    if not total > UNDERFLOW_FLOOR:
        raise DegenerateBeliefError(
            f"belief mass {total!r} at timestep {belief.timestep + 1} fell below {UNDERFLOW_FLOOR}")
    return Belief(out / total, belief.timestep + 1)


def _marginal(ids: list[int], index: np.ndarray, weights: np.ndarray) -> Marginal:
    p = np.bincount(index, weights=weights, minlength=len(ids))
    total = p.sum()
    return Marginal(list(ids), p / total if total > 0 else p)


def position_marginal(model: GhmmModel, belief: Belief) -> Marginal:
    _check(model, belief)
    a = model.arrays
    return _marginal(a.node_ids, a.state_node, belief.weights)


def goal_marginal(model: GhmmModel, belief: Belief) -> Marginal:
    _check(model, belief)
    a = model.arrays
    return _marginal(a.goal_ids, a.state_goal, belief.weights)


def expected_position(model: GhmmModel, weights: np.ndarray) -> tuple[float, float]:
    x, y = np.asarray(weights) @ model.arrays.means
    return float(x), float(y)


def predict(model: GhmmModel, belief: Belief, horizon: int) -> PredictionResult:
    """Propagate the belief ``horizon`` steps through A without observations."""
    _check(model, belief)
    if horizon < 0:
        raise ValueError(f"horizon must be >= 0, got {horizon}")
    indptr, indices, data = model.csr()
    w = kernels.propagate(indptr, indices, data, np.ascontiguousarray(belief.weights), int(horizon))
    future = Belief(w, belief.timestep + horizon)
    goals = goal_marginal(model, future)
    return PredictionResult(horizon, future, expected_position(model, w), goals.mode())


def prediction_error(predicted: Sequence[float], truth: Sequence[float]) -> float:
    return math.hypot(predicted[0] - truth[0], predicted[1] - truth[1])
