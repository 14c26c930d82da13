"""Desk-scale synthetic scenes and pedestrian corpora.

``crossing_scene`` is a street with a sidewalk on each side, one
crosswalk and two points of interest. Legal walkers cross at the
crosswalk; illegal walkers cut diagonally across the road.
``corridor_scene`` is a single straight sidewalk.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .eval import Trajectory
from .scene import Poi, SceneDescription

Point = tuple[float, float]

CROSSING_BOUNDS = (0.0, 0.0, 40.0, 20.0)
ROAD_Y = (7.0, 13.0)
CROSSWALK_X = (18.0, 22.0)
LOWER_WALK_Y, UPPER_WALK_Y = 5.0, 15.0


def _rect(x0, y0, x1, y1):
    return ((x0, y0), (x1, y0), (x1, y1), (x0, y1))


def crossing_scene() -> SceneDescription:
    x0, y0, x1, y1 = CROSSING_BOUNDS
    r0, r1 = ROAD_Y
    c0, c1 = CROSSWALK_X
    return SceneDescription(
        bounds=CROSSING_BOUNDS,
        destinations=((1.0, LOWER_WALK_Y), (39.0, UPPER_WALK_Y)),
        road_edges=(((x0, r0), (x1, r0)), ((x0, r1), (x1, r1))),
        road_polygons=(_rect(x0, r0, x1, r1),),
        crosswalks=(_rect(c0, r0, c1, r1),),
        sidewalks=(_rect(x0, 3.0, x1, r0), _rect(x0, r1, x1, 17.0)),
        pois=(Poi("cafe", (10.0, UPPER_WALK_Y)), Poi("kiosk", (30.0, LOWER_WALK_Y))),
    )


CORRIDOR_BOUNDS = (0.0, 0.0, 30.0, 10.0)
CORRIDOR_Y = 3.5


def corridor_scene() -> SceneDescription:
    x0, _, x1, _ = CORRIDOR_BOUNDS
    return SceneDescription(
        bounds=CORRIDOR_BOUNDS,
        destinations=((1.0, CORRIDOR_Y), (29.0, CORRIDOR_Y)),
        road_edges=(((x0, 6.0), (x1, 6.0)),),
        road_polygons=(_rect(x0, 6.0, x1, 10.0),),
        sidewalks=(_rect(x0, 2.0, x1, 5.0),),
    )


def walk(waypoints: Sequence[Point], speed: float, noise: float, rng: np.random.Generator,
         bounds: tuple[float, float, float, float]) -> tuple[np.ndarray, np.ndarray]:
    """Sample a constant-speed walk along the polyline, add isotropic
    Gaussian noise and clip to ``bounds``. Returns positions and the
    noise-free velocities."""
    pts = np.asarray(waypoints, dtype=np.float64)
    seg = np.diff(pts, axis=0)
    seglen = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(seglen)])
    n = int(math.floor(cum[-1] / speed)) + 1
    s = np.arange(n) * speed
    x = np.interp(s, cum, pts[:, 0])
    y = np.interp(s, cum, pts[:, 1])
    clean = np.column_stack([x, y])
    vel = np.gradient(clean, axis=0) if n > 1 else np.zeros_like(clean)
    pos = clean + rng.normal(0.0, noise, clean.shape) if noise > 0 else clean
    x0, y0, x1, y1 = bounds
    pos[:, 0] = np.clip(pos[:, 0], x0, x1)
    pos[:, 1] = np.clip(pos[:, 1], y0, y1)
    return pos, vel


def _lane(rng, y: float, jitter: float = 0.6) -> float:
    return y + rng.uniform(-jitter, jitter)


def legal_route(rng: np.random.Generator) -> list[Point]:
    """Along one sidewalk to the crosswalk, over it, then along the other."""
    up = rng.random() < 0.5
    y_from, y_to = (LOWER_WALK_Y, UPPER_WALK_Y) if up else (UPPER_WALK_Y, LOWER_WALK_Y)
    lf, lt = _lane(rng, y_from), _lane(rng, y_to)
    cx = rng.uniform(CROSSWALK_X[0] + 0.5, CROSSWALK_X[1] - 0.5)
    start_x = rng.uniform(1.0, 39.0)
    end_x = rng.choice([1.0, 10.0, 30.0, 39.0])
    return [(start_x, lf), (cx, lf), (cx, lt), (float(end_x), lt)]


def illegal_route(rng: np.random.Generator) -> list[Point]:
    """Straight across the road, well away from the crosswalk."""
    up = rng.random() < 0.5
    y_from, y_to = (LOWER_WALK_Y, UPPER_WALK_Y) if up else (UPPER_WALK_Y, LOWER_WALK_Y)
    left = rng.random() < 0.5
    xs = (2.0, 14.0) if left else (26.0, 38.0)
    a, b = rng.uniform(*xs), rng.uniform(*xs)
    return [(a, _lane(rng, y_from)), (b, _lane(rng, y_to))]


def crossing_corpus(n_train: int = 50, n_test: int = 10, seed: int = 0, speed: float = 0.12,
                    noise: float = 0.1, partial: tuple[float, float] = (0.6, 0.9)
                    ) -> tuple[list[Trajectory], list[Trajectory]]:
    """Partial legal training trajectories, plus ``n_test`` complete legal
    and ``n_test`` complete illegal test trajectories."""
    rng = np.random.default_rng(seed)
    train = []
    for k in range(n_train):
        pos, vel = walk(legal_route(rng), speed, noise, rng, CROSSING_BOUNDS)
        keep = max(2, int(len(pos) * rng.uniform(*partial)))
        train.append(Trajectory(f"train{k}", "legal", np.arange(keep), pos[:keep], vel[:keep], True))
    test = []
    for cls, route in (("legal", legal_route), ("illegal", illegal_route)):
        for k in range(n_test):
            pos, vel = walk(route(rng), speed, noise, rng, CROSSING_BOUNDS)
            test.append(Trajectory(f"{cls}{k}", cls, np.arange(len(pos)), pos, vel))
    return train, test


def corridor_corpus(n: int, tau: float, seed: int = 0, speed: float = 0.12,
                    partial: tuple[float, float] = (0.5, 0.9)) -> list[Trajectory]:
    """Partial walks along the corridor sidewalk with noise ``tau / 4``."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        a, b = (2.0, 28.0) if rng.random() < 0.5 else (28.0, 2.0)
        pos, vel = walk([(a, CORRIDOR_Y), (b, CORRIDOR_Y)], speed, tau / 4, rng, CORRIDOR_BOUNDS)
        keep = max(2, int(len(pos) * rng.uniform(*partial)))
        out.append(Trajectory(f"c{k}", "legal", np.arange(keep), pos[:keep], vel[:keep], True))
    return out
