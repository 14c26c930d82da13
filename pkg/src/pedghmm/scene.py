"""Semantic scene descriptions and the potential cost map derived from them.

A scene lists the road geometry, crossing aids, points of interest,
obstacles and destinations of an urban street in ground-plane meters.
:func:`compute_potential_map` turns it into a grid of costs in (0, 1]
that seeds the topology and the HMM parameters downstream.
"""
from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import shapely

log = logging.getLogger(__name__)

Point = tuple[float, float]

SCENE_HEADER = "scene-format 1"
COSTMAP_MAGIC = b"PCM1"
_COSTMAP_HEADER = struct.Struct("<4sHHd")  # 16 bytes


class SceneError(ValueError):
    """Invalid scene content or cost map request."""


class SceneParseError(SceneError):
    def __init__(self, message: str, path: str | Path | None = None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
        if line is not None:
            where = f"{where}:{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.line = line


class OutOfExtentError(SceneError):
    """A query point lies outside the cost map."""


@dataclass(frozen=True)
class Poi:
    label: str
    point: Point


@dataclass(frozen=True)
class Obstacle:
    center: Point
    radius: float
    start: int
    end: int

    def active(self, time: int) -> bool:
        return self.start <= time <= self.end


@dataclass(frozen=True)
class PotentialParams:
    """Gains and length scales of the four potential components.

    ``edge`` and ``obstacle`` are repulsive ``gain * exp(-d / scale)``
    fields, ``road`` is a plateau of ``road_gain * width / road_ref_width``
    over road polygons, and ``poi`` is an attractive well of the same
    exponential form with a negative sign.
    """

    edge_gain: float = 0.5
    edge_scale: float = 1.0
    road_gain: float = 0.5
    road_ref_width: float = 8.0
    obstacle_gain: float = 1.0
    obstacle_scale: float = 1.5
    poi_gain: float = 0.2
    poi_scale: float = 4.0
    floor: float = 0.05

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise SceneError(f"potential parameter {f.name} must be finite and >= 0, got {v}")
        for name in ("edge_scale", "obstacle_scale", "poi_scale", "road_ref_width"):
            if getattr(self, name) <= 0:
                raise SceneError(f"potential parameter {name} must be > 0")
        if not 0 < self.floor < 1:
            raise SceneError(f"floor cost must lie in (0, 1), got {self.floor}")


@dataclass(frozen=True)
class SceneDescription:
    bounds: tuple[float, float, float, float]
    destinations: tuple[Point, ...]
    road_edges: tuple[tuple[Point, ...], ...] = ()
    road_polygons: tuple[tuple[Point, ...], ...] = ()
    crosswalks: tuple[tuple[Point, ...], ...] = ()
    sidewalks: tuple[tuple[Point, ...], ...] = ()
    pois: tuple[Poi, ...] = ()
    obstacles: tuple[Obstacle, ...] = ()
    params: PotentialParams = field(default_factory=PotentialParams)

    def __post_init__(self):
        xmin, ymin, xmax, ymax = self.bounds
        if not all(math.isfinite(v) for v in self.bounds):
            raise SceneError("bounds must be finite")
        if xmin > xmax or ymin > ymax:
            raise SceneError(f"bounds {self.bounds} are inverted")
        if not self.destinations:
            raise SceneError("scene must list at least one destination")

        def check(p: Point, what: str):
            if not self.contains(p):
                raise SceneError(f"{what} at ({p[0]}, {p[1]}) lies outside bounds {self.bounds}")

        for k, line in enumerate(self.road_edges):
            if len(line) < 2:
                raise SceneError(f"road-edge {k} needs at least 2 points")
            for p in line:
                check(p, f"road-edge {k} vertex")
        for kind, polys in (("road", self.road_polygons), ("crosswalk", self.crosswalks),
                            ("sidewalk", self.sidewalks)):
            for k, poly in enumerate(polys):
                if len(poly) < 3:
                    raise SceneError(f"{kind} polygon {k} needs at least 3 vertices")
                for p in poly:
                    check(p, f"{kind} polygon {k} vertex")
        for poi in self.pois:
            check(poi.point, f"poi '{poi.label}'")
        for k, ob in enumerate(self.obstacles):
            if not ob.radius > 0:
                raise SceneError(f"obstacle {k} radius must be > 0, got {ob.radius}")
            if ob.start > ob.end:
                raise SceneError(f"obstacle {k} active interval [{ob.start}, {ob.end}] is inverted")
            check(ob.center, f"obstacle {k}")
        for k, d in enumerate(self.destinations):
            check(d, f"destination {k}")

    def contains(self, p: Sequence[float], tol: float = 1e-9) -> bool:
        xmin, ymin, xmax, ymax = self.bounds
        return xmin - tol <= p[0] <= xmax + tol and ymin - tol <= p[1] <= ymax + tol


# -- scene files -----------------------------------------------------------

def _floats(tokens: list[str], path, lineno: int, what: str) -> list[float]:
    try:
        vals = [float(t) for t in tokens]
    except ValueError as exc:
        raise SceneParseError(f"{what}: {exc}", path, lineno) from None
    if not all(math.isfinite(v) for v in vals):
        raise SceneParseError(f"{what}: non-finite coordinate", path, lineno)
    return vals


def _pairs(vals: list[float], path, lineno: int, what: str) -> tuple[Point, ...]:
    if len(vals) % 2:
        raise SceneParseError(f"{what}: odd number of coordinates", path, lineno)
    return tuple((vals[i], vals[i + 1]) for i in range(0, len(vals), 2))


def parse_scene(text: str, path: str | Path | None = None) -> SceneDescription:
    lines = text.splitlines()
    body = [(i + 1, ln.split("#", 1)[0].strip()) for i, ln in enumerate(lines)]
    body = [(i, ln) for i, ln in body if ln]
    if not body or body[0][1] != SCENE_HEADER:
        raise SceneParseError(f"expected header line '{SCENE_HEADER}'", path, body[0][0] if body else 1)

    bounds = None
    kw: dict[str, list] = {k: [] for k in ("road_edges", "road_polygons", "crosswalks", "sidewalks",
                                           "pois", "obstacles", "destinations")}
    params: dict[str, float] = {}
    polygon_kinds = {"road": "road_polygons", "crosswalk": "crosswalks", "sidewalk": "sidewalks"}
    param_names = {f.name for f in fields(PotentialParams)}

    for lineno, ln in body[1:]:
        key, *rest = ln.split()
        if key == "bounds":
            if bounds is not None:
                raise SceneParseError("duplicate bounds", path, lineno)
            vals = _floats(rest, path, lineno, "bounds")
            if len(vals) != 4:
                raise SceneParseError("bounds takes xmin ymin xmax ymax", path, lineno)
            bounds = tuple(vals)
        elif key == "road-edge":
            kw["road_edges"].append(_pairs(_floats(rest, path, lineno, key), path, lineno, key))
        elif key in polygon_kinds:
            kw[polygon_kinds[key]].append(_pairs(_floats(rest, path, lineno, key), path, lineno, key))
        elif key == "poi":
            if len(rest) != 3:
                raise SceneParseError("poi takes label x y", path, lineno)
            x, y = _floats(rest[1:], path, lineno, "poi")
            kw["pois"].append(Poi(rest[0], (x, y)))
        elif key == "obstacle":
            if len(rest) != 5:
                raise SceneParseError("obstacle takes cx cy radius t_start t_end", path, lineno)
            cx, cy, r = _floats(rest[:3], path, lineno, "obstacle")
            try:
                t0, t1 = int(rest[3]), int(rest[4])
            except ValueError:
                raise SceneParseError("obstacle active interval must be integer timesteps",
                                      path, lineno) from None
            kw["obstacles"].append(Obstacle((cx, cy), r, t0, t1))
        elif key == "destination":
            vals = _floats(rest, path, lineno, key)
            if len(vals) != 2:
                raise SceneParseError("destination takes x y", path, lineno)
            kw["destinations"].append((vals[0], vals[1]))
        elif key == "param":
            if len(rest) != 2 or rest[0] not in param_names:
                raise SceneParseError(f"param takes one of {sorted(param_names)} and a value",
                                      path, lineno)
            params[rest[0]] = _floats(rest[1:], path, lineno, "param")[0]
        else:
            raise SceneParseError(f"unknown record '{key}'", path, lineno)

    if bounds is None:
        raise SceneParseError("missing bounds record", path)
    try:
        return SceneDescription(
            bounds=bounds,
            params=PotentialParams(**params),
            **{k: tuple(v) for k, v in kw.items()},
        )
    except SceneParseError:
        raise
    except SceneError as exc:
        raise SceneParseError(str(exc), path) from None


def load_scene(path: str | Path) -> SceneDescription:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise SceneParseError(f"cannot read scene file: {exc.strerror}", path) from None
    return parse_scene(text, path)


def format_scene(scene: SceneDescription) -> str:
    def coords(pts: Iterable[Point]) -> str:
        return " ".join(f"{x!r} {y!r}" for x, y in pts)

    out = [SCENE_HEADER, "bounds " + " ".join(repr(float(v)) for v in scene.bounds)]
    out += [f"road-edge {coords(line)}" for line in scene.road_edges]
    out += [f"road {coords(p)}" for p in scene.road_polygons]
    out += [f"crosswalk {coords(p)}" for p in scene.crosswalks]
    out += [f"sidewalk {coords(p)}" for p in scene.sidewalks]
    out += [f"poi {p.label} {p.point[0]!r} {p.point[1]!r}" for p in scene.pois]
    out += [f"obstacle {o.center[0]!r} {o.center[1]!r} {o.radius!r} {o.start} {o.end}"
            for o in scene.obstacles]
    out += [f"destination {x!r} {y!r}" for x, y in scene.destinations]
    defaults = PotentialParams()
    for f in fields(PotentialParams):
        v = getattr(scene.params, f.name)
        if v != getattr(defaults, f.name):
            out.append(f"param {f.name} {v!r}")
    return "\n".join(out) + "\n"


def save_scene(scene: SceneDescription, path: str | Path) -> None:
    Path(path).write_text(format_scene(scene), encoding="utf-8")


# -- cost map --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PotentialCostMap:
    """Row-major grid of costs; cell ``(row, col)`` is centered at
    ``origin + ((col + 0.5) * resolution, (row + 0.5) * resolution)``."""

    origin: Point
    resolution: float
    width: int
    height: int
    values: np.ndarray

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float64).reshape(-1)
        if self.width < 1 or self.height < 1:
            raise SceneError("cost map needs at least one cell")
        if vals.size != self.width * self.height:
            raise SceneError(f"cost map has {vals.size} values, expected {self.width * self.height}")
        if not self.resolution > 0:
            raise SceneError("cost map resolution must be > 0")
        if not (np.all(vals > 0) and np.all(vals <= 1)):
            raise SceneError("cost map values must lie in (0, 1]")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def extent(self) -> tuple[float, float, float, float]:
        x0, y0 = self.origin
        return (x0, y0, x0 + self.width * self.resolution, y0 + self.height * self.resolution)

    @property
    def grid(self) -> np.ndarray:
        return self.values.reshape(self.height, self.width)

    def cell_center(self, row: int, col: int) -> Point:
        return (self.origin[0] + (col + 0.5) * self.resolution,
                self.origin[1] + (row + 0.5) * self.resolution)

    def contains(self, p: Sequence[float], tol: float = 1e-9) -> bool:
        x0, y0, x1, y1 = self.extent
        return x0 - tol <= p[0] <= x1 + tol and y0 - tol <= p[1] <= y1 + tol

    def sample(self, points) -> np.ndarray:
        """Vectorized bilinear interpolation; see :func:`sample_cost`."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        x0, y0, x1, y1 = self.extent
        tol = 1e-9 * max(1.0, abs(x1), abs(y1))
        bad = ((pts[:, 0] < x0 - tol) | (pts[:, 0] > x1 + tol)
               | (pts[:, 1] < y0 - tol) | (pts[:, 1] > y1 + tol) | ~np.isfinite(pts).all(axis=1))
        if bad.any():
            p = pts[np.argmax(bad)]
            raise OutOfExtentError(f"point ({p[0]}, {p[1]}) outside cost map extent {self.extent}")
        u = np.clip((pts[:, 0] - x0) / self.resolution - 0.5, 0.0, self.width - 1)
        v = np.clip((pts[:, 1] - y0) / self.resolution - 0.5, 0.0, self.height - 1)
        i0 = np.minimum(np.floor(u).astype(np.int64), max(self.width - 2, 0))
        j0 = np.minimum(np.floor(v).astype(np.int64), max(self.height - 2, 0))
        i1 = np.minimum(i0 + 1, self.width - 1)
        j1 = np.minimum(j0 + 1, self.height - 1)
        fx = u - i0
        fy = v - j0
        g = self.grid
        top = g[j0, i0] * (1 - fx) + g[j0, i1] * fx
        bot = g[j1, i0] * (1 - fx) + g[j1, i1] * fx
        out = top * (1 - fy) + bot * fy
        return np.clip(out, np.finfo(float).tiny, 1.0)


def sample_cost(cost_map: PotentialCostMap, point: Sequence[float]) -> float:
    """Cost at ``point``, bilinearly interpolated between cell centers.

    Points between the outer cell centers and the map border take the
    border cells' values. Raises :class:`OutOfExtentError` outside the map.
    """
    return float(cost_map.sample(point)[0])


def _polygon_width(poly) -> float:
    rect = shapely.minimum_rotated_rectangle(poly)
    xy = np.asarray(rect.exterior.coords)
    sides = np.hypot(*np.diff(xy, axis=0).T)
    sides = sides[sides > 0]
    return float(sides.min()) if sides.size else 0.0


def _inside_any(polys: Sequence[tuple[Point, ...]], x: np.ndarray, y: np.ndarray) -> np.ndarray:
    mask = np.zeros(x.shape, dtype=bool)
    for p in polys:
        mask |= shapely.intersects_xy(shapely.Polygon(p), x, y)
    return mask


def static_potential(scene: SceneDescription, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Edge + road + POI potentials at the given points, before clipping."""
    prm = scene.params
    u = np.zeros(x.shape, dtype=np.float64)
    if scene.road_edges:
        pts = shapely.points(x, y)
        d = np.full(x.shape, np.inf)
        for line in scene.road_edges:
            d = np.minimum(d, shapely.distance(shapely.LineString(line), pts))
        u += prm.edge_gain * np.exp(-d / prm.edge_scale)
    if scene.road_polygons:
        plateau = np.zeros(x.shape, dtype=np.float64)
        for poly in scene.road_polygons:
            sp = shapely.Polygon(poly)
            level = prm.road_gain * _polygon_width(sp) / prm.road_ref_width
            plateau = np.where(shapely.intersects_xy(sp, x, y), np.maximum(plateau, level), plateau)
        u += plateau
    for poi in scene.pois:
        d = np.hypot(x - poi.point[0], y - poi.point[1])
        u -= prm.poi_gain * np.exp(-d / prm.poi_scale)
    return u


def obstacle_potential(scene: SceneDescription, x: np.ndarray, y: np.ndarray, time: int) -> np.ndarray:
    prm = scene.params
    u = np.zeros(x.shape, dtype=np.float64)
    for ob in scene.obstacles:
        if not ob.active(time):
            continue
        d = np.maximum(np.hypot(x - ob.center[0], y - ob.center[1]) - ob.radius, 0.0)
        u += prm.obstacle_gain * np.exp(-d / prm.obstacle_scale)
    return u


def compute_potential_map(scene: SceneDescription, resolution: float, time: int = 0) -> PotentialCostMap:
    """Rasterize the summed scene potentials into a cost map in (0, 1].

    Crosswalk and sidewalk cells drop the static components (they offer
    no resistance) but still feel active obstacles. The affine rescale
    uses a reference scale that does not depend on which obstacles are
    active, so adding an obstacle can only raise costs.
    """
    if not (math.isfinite(resolution) and resolution > 0):
        raise SceneError(f"resolution must be > 0, got {resolution}")
    xmin, ymin, xmax, ymax = scene.bounds
    if xmax - xmin <= 0 or ymax - ymin <= 0:
        raise SceneError(f"degenerate scene: bounds {scene.bounds} have zero area")
    width = max(1, math.ceil((xmax - xmin) / resolution - 1e-9))
    height = max(1, math.ceil((ymax - ymin) / resolution - 1e-9))
    cx = xmin + (np.arange(width) + 0.5) * resolution
    cy = ymin + (np.arange(height) + 0.5) * resolution
    gx, gy = np.meshgrid(cx, cy)
    x, y = gx.ravel(), gy.ravel()

    static = static_potential(scene, x, y)
    free = _inside_any(scene.crosswalks + scene.sidewalks, x, y)
    static[free] = 0.0
    prm = scene.params
    scale = max(float(np.max(np.maximum(static, 0.0))), 0.0) + prm.obstacle_gain
    if scale <= 0:
        scale = 1.0
    total = np.maximum(static + obstacle_potential(scene, x, y, time), 0.0)
    values = prm.floor + (1.0 - prm.floor) * np.minimum(total / scale, 1.0)
    return PotentialCostMap((xmin, ymin), float(resolution), width, height, values)


def list_destinations(scene: SceneDescription, merge_radius: float = 1.0) -> list[Point]:
    """Scene destinations followed by POIs, merging points closer than
    ``merge_radius`` into the first one listed."""
    out: list[Point] = []
    for p in list(scene.destinations) + [poi.point for poi in scene.pois]:
        if all(math.hypot(p[0] - q[0], p[1] - q[1]) >= merge_radius for q in out):
            out.append((float(p[0]), float(p[1])))
    return out


# -- cost map files --------------------------------------------------------

def save_cost_map(cost_map: PotentialCostMap, path: str | Path) -> None:
    """Binary export: 16-byte header (magic, uint16 width, uint16 height,
    float64 resolution), row-major float64 values, then the origin as a
    two-float64 trailer. Little-endian throughout."""
    if cost_map.width > 0xFFFF or cost_map.height > 0xFFFF:
        raise SceneError("cost map too large for the binary format (max 65535 cells per side)")
    with open(path, "wb") as fh:
        fh.write(_COSTMAP_HEADER.pack(COSTMAP_MAGIC, cost_map.width, cost_map.height,
                                      cost_map.resolution))
        fh.write(cost_map.values.astype("<f8").tobytes())
        fh.write(struct.pack("<2d", *cost_map.origin))


def load_cost_map(path: str | Path) -> PotentialCostMap:
    data = Path(path).read_bytes()
    if len(data) < _COSTMAP_HEADER.size:
        raise SceneError(f"{path}: truncated cost map header")
    magic, w, h, res = _COSTMAP_HEADER.unpack_from(data)
    if magic != COSTMAP_MAGIC:
        raise SceneError(f"{path}: not a cost map file (bad magic {magic!r})")
    n = w * h
    expected = _COSTMAP_HEADER.size + 8 * n + 16
    if len(data) != expected:
        raise SceneError(f"{path}: expected {expected} bytes, found {len(data)}")
    values = np.frombuffer(data, dtype="<f8", count=n, offset=_COSTMAP_HEADER.size).astype(np.float64)
    origin = struct.unpack_from("<2d", data, _COSTMAP_HEADER.size + 8 * n)
    return PotentialCostMap(tuple(origin), res, w, h, values)


def export_cost_map_csv(cost_map: PotentialCostMap, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "x", "y", "cost"])
        g = cost_map.grid
        for r in range(cost_map.height):
            for c in range(cost_map.width):
                x, y = cost_map.cell_center(r, c)
                w.writerow([r, c, repr(x), repr(y), repr(float(g[r, c]))])
