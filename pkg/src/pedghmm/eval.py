"""Trajectory datasets, the train/evaluate protocol, the preset-prior
baseline and the statistics used to compare two predictors."""
from __future__ import annotations

import csv
import logging
import math
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy import stats

from .ghmm import (GhmmModel, GoalSet, LearningConfig, ModelError, NumericalUnderflowError,
                   ObservationSequence, apply_topology_delta, incremental_baum_welch,
                   init_model_from_topology, make_baseline, sequence_loglik, update_goals)
from .inference import DegenerateBeliefError, filter_update, initial_belief
from .scene import PotentialCostMap
from .topology import (TopologicalMap, TopologyError, apply_delta, build_destination_topology,
                       build_prior_topology, itm_update)

__all__ = [
    "CLASSES", "Trajectory", "TrajectoryError", "ErrorSeries", "ComparisonReport",
    "load_trajectories", "save_trajectories", "parse_trajectories", "format_trajectories",
    "assign_goal", "train", "evaluate", "make_baseline", "paired_test", "combine_pvalues",
    "export_report", "run_comparison", "DEFAULT_SIZES",
]

log = logging.getLogger(__name__)

CLASSES = ("legal", "illegal")
CSV_FIELDS = ["id", "class", "t", "x", "y", "vx", "vy"]
P_FLOOR = 1e-300
DEFAULT_SIZES = (0, 50, 100, 250)


class TrajectoryError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Trajectory:
    id: str
    cls: str
    t: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray | None = None
    partial: bool = False

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.int64).reshape(-1)
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        if self.cls not in CLASSES:
            raise TrajectoryError(f"trajectory {self.id}: class must be one of {CLASSES}, got {self.cls!r}")
        if len(t) != len(pos):
            raise TrajectoryError(f"trajectory {self.id}: {len(t)} timesteps but {len(pos)} positions")
        if len(t) < 2:
            raise TrajectoryError(f"trajectory {self.id}: needs at least 2 samples, has {len(t)}")
        if np.any(np.diff(t) <= 0):
            k = int(np.argmax(np.diff(t) <= 0)) + 1
            raise TrajectoryError(f"trajectory {self.id}: timestep {t[k]} at sample {k} does not increase")
        if not np.all(np.isfinite(pos)):
            raise TrajectoryError(f"trajectory {self.id}: non-finite position")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "positions", pos)
        if self.velocities is not None:
            vel = np.asarray(self.velocities, dtype=np.float64).reshape(-1, 2)
            if len(vel) != len(t):
                raise TrajectoryError(f"trajectory {self.id}: velocity count mismatch")
            object.__setattr__(self, "velocities", vel)

    def __len__(self):
        return len(self.t)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        same_vel = (self.velocities is None and other.velocities is None) or (
            self.velocities is not None and other.velocities is not None
            and np.array_equal(self.velocities, other.velocities))
        return (self.id == other.id and self.cls == other.cls and self.partial == other.partial
                and np.array_equal(self.t, other.t) and np.array_equal(self.positions, other.positions)
                and same_vel)

    def truncated(self, n: int, new_id: str | None = None) -> "Trajectory":
        vel = None if self.velocities is None else self.velocities[:n]
        return Trajectory(new_id or self.id, self.cls, self.t[:n], self.positions[:n], vel, True)


def _id_key(tid: str):
    # natural order: "t2" before "t10"
    return [int(p) if p.isdigit() else p for p in re.split(r"(\d+)", tid)]


def parse_trajectories(text: str, path: str | Path = "<string>") -> list[Trajectory]:
    lines = text.splitlines()
    if not lines:
        raise TrajectoryError(f"{path}: empty file")
    reader = csv.reader(lines)
    header = [h.strip() for h in next(reader)]
    required = ["id", "class", "t", "x", "y"]
    missing = [h for h in required if h not in header]
    if missing:
        raise TrajectoryError(f"{path}:1: header lacks column(s) {', '.join(missing)}")
    col = {h: k for k, h in enumerate(header)}
    has_vel = "vx" in col and "vy" in col
    groups: dict[str, dict] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise TrajectoryError(f"{path}:{lineno}: expected {len(header)} fields, found {len(row)}")
        tid = row[col["id"]].strip()
        try:
            t = int(row[col["t"]])
            x, y = float(row[col["x"]]), float(row[col["y"]])
            vel = None
            if has_vel and row[col["vx"]].strip() and row[col["vy"]].strip():
                vel = (float(row[col["vx"]]), float(row[col["vy"]]))
        except ValueError as exc:
            raise TrajectoryError(f"{path}:{lineno}: {exc}") from None
        g = groups.setdefault(tid, {"cls": row[col["class"]].strip(), "t": [], "p": [], "v": [],
                                    "partial": False, "line": lineno})
        if g["cls"] != row[col["class"]].strip():
            raise TrajectoryError(f"{path}:{lineno}: trajectory {tid} changes class")
        if g["t"] and t <= g["t"][-1]:
            raise TrajectoryError(f"{path}:{lineno}: trajectory {tid} timestep {t} not after {g['t'][-1]}")
        g["t"].append(t)
        g["p"].append((x, y))
        g["v"].append(vel)
        if "partial" in col:
            g["partial"] = row[col["partial"]].strip() in ("1", "true", "True")
    out = []
    for tid in sorted(groups, key=_id_key):
        g = groups[tid]
        vel = g["v"]
        vel_arr = None if any(v is None for v in vel) else np.array(vel)
        try:
            out.append(Trajectory(tid, g["cls"], g["t"], g["p"], vel_arr, g["partial"]))
        except TrajectoryError as exc:
            raise TrajectoryError(f"{path}:{g['line']}: {exc}") from None
    return out


def load_trajectories(path: str | Path) -> list[Trajectory]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise TrajectoryError(f"cannot read {path}: {exc.strerror}") from None
    return parse_trajectories(text, path)


def format_trajectories(trajs: Iterable[Trajectory]) -> str:
    trajs = list(trajs)
    with_partial = any(tr.partial for tr in trajs)
    rows = [CSV_FIELDS + (["partial"] if with_partial else [])]
    for tr in trajs:
        for k in range(len(tr)):
            vx = vy = ""
            if tr.velocities is not None:
                vx, vy = repr(float(tr.velocities[k, 0])), repr(float(tr.velocities[k, 1]))
            row = [tr.id, tr.cls, str(int(tr.t[k])), repr(float(tr.positions[k, 0])),
                   repr(float(tr.positions[k, 1])), vx, vy]
            if with_partial:
                row.append("1" if tr.partial else "0")
            rows.append(row)
    return "".join(",".join(r) + "\n" for r in rows)


def save_trajectories(trajs: Iterable[Trajectory], path: str | Path) -> None:
    Path(path).write_text(format_trajectories(trajs), encoding="utf-8")


# -- training ------------------------------------------------------------------

def assign_goal(model: GhmmModel, positions: np.ndarray) -> int:
    """Goal the trajectory made the most progress towards; lowest id on ties."""
    first, last = positions[0], positions[-1]
    best, best_gain = None, -math.inf
    for gid in sorted(model.goals.goals):
        g = model.goals.goals[gid].point
        gain = math.hypot(first[0] - g[0], first[1] - g[1]) - math.hypot(last[0] - g[0], last[1] - g[1])
        if gain > best_gain:
            best, best_gain = gid, gain
    return best


@dataclass
class TrainStep:
    index: int
    trajectory_id: str
    ok: bool
    loglik: float = math.nan
    message: str = ""


def train(model: GhmmModel, topo: TopologicalMap, corpus: Sequence[Trajectory],
          cost_map: PotentialCostMap | None = None,
          progress: Callable[[TrainStep], None] | None = None) -> tuple[GhmmModel, TopologicalMap]:
    """Run the corpus through the learner in order and return evolved copies.

    Each observation updates the topology and the state space; after the
    whole trajectory, dwell counts feed goal discovery and one Baum-Welch
    blend runs on the sequence. ``cost_map`` is needed for cost-seeded
    models. Trajectories that fail are logged and skipped.
    """
    model, topo = model.copy(), topo.copy()
    if model.mode == "cost" and cost_map is None:
        raise ModelError("training a cost-seeded model needs the cost map")
    for k, tr in enumerate(corpus):
        try:
            model.check_in_bounds(tr.positions)
        except ModelError as exc:
            _report(progress, TrainStep(k, tr.id, False, message=str(exc)))
            continue
        topo.reset_run()
        for obs in tr.positions:
            delta = itm_update(topo, obs)
            apply_delta(topo, delta)
            apply_topology_delta(model, delta, cost_map)
        update_goals(model, topo)
        seq = ObservationSequence(tr.positions, assign_goal(model, tr.positions))
        try:
            incremental_baum_welch(model, seq)
            ll = sequence_loglik(model, seq)
        except (NumericalUnderflowError, ModelError) as exc:
            _report(progress, TrainStep(k, tr.id, False, message=str(exc)))
            continue
        _report(progress, TrainStep(k, tr.id, True, ll))
    model.topology_id = topo.snapshot_id()
    return model, topo


def _report(progress, step: TrainStep) -> None:
    if step.ok:
        log.debug("trajectory %s: loglik %.3f", step.trajectory_id, step.loglik)
    else:
        log.warning("trajectory %s skipped: %s", step.trajectory_id, step.message)
    if progress is not None:
        progress(step)


# -- evaluation ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ErrorSeries:
    trajectory_id: str
    horizon: int
    errors: np.ndarray
    cls: str = "legal"
    degenerate_steps: int = 0

    def __len__(self):
        return len(self.errors)

    @property
    def mean(self) -> float:
        return float(self.errors.mean()) if len(self.errors) else math.nan


def propagated_means(model: GhmmModel, horizon: int) -> np.ndarray:
    """Rows are the expected position ``horizon`` steps after starting in
    each state, so the prediction for belief ``w`` is ``w @ M``."""
    a = model.arrays
    A = sp.csr_matrix((a.data, a.indices, a.indptr), shape=(len(a.states),) * 2)
    m = a.means.copy()
    for _ in range(horizon):
        m = A @ m
    return m


def evaluate(model: GhmmModel, topo: TopologicalMap | None, test: Sequence[Trajectory],
             horizon: int) -> list[ErrorSeries]:
    """Filter each test trajectory and score the H-step prediction at every
    timestep that has ground truth ``horizon`` samples later. The model is
    not modified."""
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    m_h = propagated_means(model, horizon)
    out = []
    for tr in test:
        n = max(0, len(tr) - horizon)
        errors = np.empty(n)
        belief = initial_belief(model)
        degenerate = 0
        for t in range(n):
            try:
                belief = filter_update(model, belief, tr.positions[t])
            except DegenerateBeliefError:
                degenerate += 1
                log.warning("trajectory %s: degenerate belief at step %d; restarting from the prior",
                            tr.id, t)
                belief = initial_belief(model)
            px, py = belief.weights @ m_h
            gx, gy = tr.positions[t + horizon]
            errors[t] = math.hypot(px - gx, py - gy)
        out.append(ErrorSeries(tr.id, horizon, errors, tr.cls, degenerate))
    return out


# -- statistics ---------------------------------------------------------------------

def paired_test(a: ErrorSeries | Sequence[float], b: ErrorSeries | Sequence[float]) -> float:
    """One-sided paired t-test p-value for mean(a) < mean(b)."""
    xa = np.asarray(a.errors if isinstance(a, ErrorSeries) else a, dtype=np.float64)
    xb = np.asarray(b.errors if isinstance(b, ErrorSeries) else b, dtype=np.float64)
    if xa.shape != xb.shape:
        raise ValueError(f"series lengths differ: {len(xa)} vs {len(xb)}")
    n = len(xa)
    if n < 2:
        raise ValueError("paired test needs at least 2 pairs")
    d = xa - xb
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0 or not math.isfinite(mean / sd * math.sqrt(n)):
        if mean == 0.0:
            return 0.5
        return 0.0 if mean < 0 else 1.0
    tstat = mean / (sd / math.sqrt(n))
    return float(stats.t.cdf(tstat, n - 1))


def combine_pvalues(ps: Sequence[float], floor: float = P_FLOOR) -> float:
    """Fisher's method: ``-2 sum log p`` against chi-square with 2k dof."""
    p = np.asarray(list(ps), dtype=np.float64)
    if p.size == 0:
        raise ValueError("no p-values to combine")
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise ValueError("p-values must lie in [0, 1]")
    if np.any(p < floor):
        warnings.warn(f"{int(np.sum(p < floor))} p-value(s) below {floor} clamped", RuntimeWarning,
                      stacklevel=2)
        p = np.maximum(p, floor)
    statistic = -2.0 * float(np.sum(np.log(p)))
    return float(stats.chi2.sf(statistic, 2 * p.size))


# -- comparison protocol ---------------------------------------------------------------

@dataclass
class ComparisonRow:
    preset: str
    cls: str
    proposed_size: int
    baseline_size: int
    n_trajectories: int
    combined_p: float
    mean_error_proposed: float
    mean_error_baseline: float


@dataclass
class ComparisonReport:
    horizon: int
    rows: list[ComparisonRow] = field(default_factory=list)
    # (preset, trajectory id, class, p)
    trajectory_pvalues: list[tuple[str, str, str, float]] = field(default_factory=list)
    # (preset, model, trajectory id, class, step, error)
    curves: list[tuple[str, str, str, str, int, float]] = field(default_factory=list)
    failed: str | None = None

    @property
    def sizes(self) -> list[str]:
        return list(dict.fromkeys(r.preset for r in self.rows))

    def row(self, preset: str, cls: str) -> ComparisonRow:
        for r in self.rows:
            if r.preset == preset and r.cls == cls:
                return r
        raise KeyError((preset, cls))


def _fmt(x: float) -> str:
    return repr(float(x))


def export_report(report: ComparisonReport, out_dir: str | Path) -> list[Path]:
    """Write ``pvalues.csv``, ``trajectory_pvalues.csv`` and
    ``error_curves.csv`` into ``out_dir``; returns the paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror}") from None
    files = {
        "pvalues.csv": [["preset", "class", "proposed_size", "baseline_size", "n_trajectories",
                         "combined_p", "mean_error_proposed", "mean_error_baseline"]]
        + [[r.preset, r.cls, str(r.proposed_size), str(r.baseline_size), str(r.n_trajectories),
            _fmt(r.combined_p), _fmt(r.mean_error_proposed), _fmt(r.mean_error_baseline)]
           for r in report.rows],
        "trajectory_pvalues.csv": [["preset", "trajectory", "class", "p"]]
        + [[pr, tid, c, _fmt(p)] for pr, tid, c, p in report.trajectory_pvalues],
        "error_curves.csv": [["preset", "model", "trajectory", "class", "step", "error"]]
        + [[pr, m, tid, c, str(k), _fmt(e)] for pr, m, tid, c, k, e in report.curves],
    }
    if report.failed:
        files["FAILED"] = [[report.failed]]
    paths = []
    for name, rows in files.items():
        p = out / name
        with open(p, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerows(rows)
        paths.append(p)
    return paths


def _presets(sizes: Sequence[int], corpus_len: int, zero_full: bool) -> list[tuple[str, int, int]]:
    out, seen = [], set()
    for s in sizes:
        n = min(int(s), corpus_len)
        if n in seen:
            continue
        seen.add(n)
        out.append((str(n), n, n))
    if zero_full:
        out.append(("0-full", 0, corpus_len))
    return out


def run_comparison(cost_map: PotentialCostMap, destinations: Sequence[tuple[float, float]],
                   corpus: Sequence[Trajectory], test: Sequence[Trajectory], *, tau: float,
                   horizon: int = 75, config: LearningConfig | None = None,
                   sizes: Sequence[int] = DEFAULT_SIZES, zero_full: bool = True,
                   epsilon_itm: float = 0.05) -> ComparisonReport:
    """Train the cost-seeded model and the preset baseline on the first
    ``n`` corpus trajectories for each training size, evaluate both on the
    test set and compare them per class.

    The proposed model starts from the prior topology; the baseline starts
    from the destinations alone and grows its map from observations. The
    ``0-full`` preset pits the untrained proposed model against the
    baseline trained on the whole corpus.
    """
    config = config or LearningConfig()
    report = ComparisonReport(horizon)
    prior = build_prior_topology(cost_map, destinations, tau, epsilon_itm)
    goals = GoalSet.from_topology(prior, config.dwell_threshold)
    proposed0 = init_model_from_topology(prior, cost_map, goals, config)
    proposed0.topology_id = prior.snapshot_id()
    base_topo = build_destination_topology([g.point for _, g in sorted(goals.goals.items())], tau,
                                           epsilon_itm, bounds=cost_map.extent)
    base_goals = GoalSet.from_topology(base_topo, config.dwell_threshold)
    baseline0 = make_baseline(base_topo, base_goals, config=config, cost_map=cost_map)

    trained: dict[tuple[str, int], list[ErrorSeries]] = {}

    def series(kind: str, n: int) -> list[ErrorSeries]:
        if (kind, n) not in trained:
            if kind == "proposed":
                m, t = train(proposed0, prior, corpus[:n], cost_map) if n else (proposed0, prior)
            else:
                m, t = train(baseline0, base_topo, corpus[:n], cost_map) if n else (baseline0, base_topo)
            trained[(kind, n)] = evaluate(m, t, test, horizon)
        return trained[(kind, n)]

    try:
        for preset, n_prop, n_base in _presets(sizes, len(corpus), zero_full):
            sp_ = series("proposed", n_prop)
            sb = series("baseline", n_base)
            for cls in CLASSES:
                ps, ep, eb = [], [], []
                for a, b in zip(sp_, sb):
                    if a.cls != cls or len(a) < 2:
                        continue
                    p = paired_test(a, b)
                    ps.append(p)
                    ep.append(a.errors)
                    eb.append(b.errors)
                    report.trajectory_pvalues.append((preset, a.trajectory_id, cls, p))
                    for name, s in (("proposed", a), ("baseline", b)):
                        report.curves.extend((preset, name, s.trajectory_id, cls, k, float(e))
                                             for k, e in enumerate(s.errors))
                if not ps:
                    continue
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    comb = combine_pvalues(ps)
                report.rows.append(ComparisonRow(
                    preset, cls, n_prop, n_base, len(ps), comb,
                    float(np.concatenate(ep).mean()), float(np.concatenate(eb).mean())))
    except (ModelError, TopologyError, NumericalUnderflowError) as exc:
        report.failed = f"{type(exc).__name__}: {exc}"
        log.error("comparison aborted: %s", report.failed)
    return report
