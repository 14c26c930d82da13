import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pedghmm.ghmm import GhmmModel, GoalSet, LearningConfig, _populate  # noqa: E402
from pedghmm.scene import compute_potential_map, list_destinations  # noqa: E402
from pedghmm.synthetic import crossing_scene  # noqa: E402

BOUNDS = (0.0, 0.0, 10.0, 10.0)


def toy_model(rng, n_nodes, n_goals=1, sigma=1.5, randomize=True, edge_p=0.6, mode="cost"):
    """Small model with random node positions, costs, edges and weights."""
    cfg = LearningConfig(sigma_obs=sigma)
    goals = GoalSet()
    model = GhmmModel(cfg, goals, mode, bounds=BOUNDS)
    for n in range(n_nodes):
        model.node_pos[n] = tuple(float(v) for v in rng.uniform(1, 9, 2))
        model.node_cost[n] = float(rng.uniform(0.05, 1.0))
        model.adjacency[n] = set()
    for a in range(n_nodes):
        for b in range(a + 1, n_nodes):
            if rng.random() < edge_p:
                model.adjacency[a].add(b)
                model.adjacency[b].add(a)
    for n in rng.choice(n_nodes, size=n_goals, replace=False):
        goals.add(int(n), model.node_pos[int(n)])
    _populate(model)
    if randomize:
        for st in model.prior_w:
            model.prior_w[st] = float(rng.uniform(0.05, 1.0))
            for m in model.trans_w[st]:
                model.trans_w[st][m] = float(rng.uniform(0.05, 1.0))
        model.invalidate()
    return model


def emissions(model, obs):
    """Dense (T, n_states) observation densities, straight from the
    scalar density function."""
    from pedghmm.ghmm import observation_likelihood

    return np.array([[observation_likelihood(model, i, o) for i in range(model.n_states)] for o in obs])


@pytest.fixture(scope="session")
def crossing():
    scene = crossing_scene()
    cmap = compute_potential_map(scene, 0.5)
    return scene, cmap, list_destinations(scene)
