"""Command-line front end.

Subcommands: ``build-map``, ``train``, ``predict``, ``evaluate``,
``compare`` and ``synth`` (writes a synthetic scene and corpus). Options
may come from a JSON file given with ``--config``; flags override it.
Exit status is 0 on success, 1 on bad input and 2 on numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from . import __version__
from .eval import (DEFAULT_SIZES, TrajectoryError, assign_goal, evaluate, export_report,
                   load_trajectories, run_comparison, save_trajectories, train)
from .ghmm import (GoalSet, LearningConfig, ModelError, NumericalUnderflowError, init_model_from_topology,
                   load_model, make_baseline, save_model, sequence_loglik, dump_model_text,
                   ObservationSequence)
from .inference import (DegenerateBeliefError, filter_update, initial_belief, position_marginal,
                        predict, prediction_error)
from .scene import (SceneError, compute_potential_map, export_cost_map_csv, list_destinations,
                    load_cost_map, load_scene, save_cost_map, save_scene)
from .topology import TopologyError, build_destination_topology, build_prior_topology, save_topology

log = logging.getLogger("pedghmm")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2

PREDICT_HEADER = ["step", "t", "obs_x", "obs_y", "mode_node", "mode_x", "mode_y",
                  "pred_x", "pred_y", "truth_x", "truth_y", "error", "map_goal"]


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    scene: str | None = None
    cost_map: str | None = None
    trajectories: str | None = None
    test: str | None = None
    model: str | None = None
    output_dir: str | None = None
    resolution: float = 0.5
    time: int = 0
    tau: float = 2.0
    epsilon: float = 0.05
    epsilon_itm: float = 0.05
    sigma_obs: float | None = None
    bw_learning_rate: float = 0.1
    dwell_threshold: int = 50
    horizon: int = 75
    pi0: float = 0.5
    a0: float = 0.5
    sizes: tuple[int, ...] = DEFAULT_SIZES

    def validate(self) -> None:
        def positive(name):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be > 0, got {v!r}")
        for name in ("resolution", "tau", "epsilon", "horizon", "pi0", "a0", "dwell_threshold"):
            positive(name)
        if self.sigma_obs is not None:
            positive("sigma_obs")
        if not 0 < self.bw_learning_rate <= 1:
            raise ConfigError(f"bw_learning_rate must lie in (0, 1], got {self.bw_learning_rate}")
        if not 0 <= self.epsilon_itm <= 1:
            raise ConfigError(f"epsilon_itm must lie in [0, 1], got {self.epsilon_itm}")
        if self.time < 0:
            raise ConfigError("time must be >= 0")
        if any(s < 0 for s in self.sizes):
            raise ConfigError("training sizes must be >= 0")

    def learning(self) -> LearningConfig:
        return LearningConfig(
            epsilon=self.epsilon,
            sigma_obs=self.sigma_obs if self.sigma_obs is not None else self.tau / 2,
            dwell_threshold=self.dwell_threshold,
            bw_learning_rate=self.bw_learning_rate,
            pi0=self.pi0,
            a0=self.a0,
        )

    def need(self, *names: str) -> None:
        for name in names:
            if getattr(self, name) is None:
                raise ConfigError(f"--{name.replace('_', '-')} is required")


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        try:
            values = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        known = {f.name for f in fields(RunConfig)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    if "sizes" in values:
        values["sizes"] = tuple(int(s) for s in values["sizes"])
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def _outdir(cfg: RunConfig) -> Path:
    cfg.need("output_dir")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands -----------------------------------------------------------------------

def cmd_build_map(cfg: RunConfig) -> int:
    cfg.need("scene", "output_dir")
    scene = load_scene(cfg.scene)
    cmap = compute_potential_map(scene, cfg.resolution, cfg.time)
    out = _outdir(cfg)
    save_cost_map(cmap, out / "costmap.bin")
    export_cost_map_csv(cmap, out / "costmap.csv")
    print(f"cost map {cmap.width}x{cmap.height} at {cfg.resolution} m -> {out / 'costmap.bin'}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, baseline: bool = False) -> int:
    cfg.need("scene", "trajectories", "output_dir")
    scene = load_scene(cfg.scene)
    cmap = load_cost_map(cfg.cost_map) if cfg.cost_map else compute_potential_map(scene, cfg.resolution)
    corpus = load_trajectories(cfg.trajectories)
    lc = cfg.learning()
    dests = list_destinations(scene)
    if baseline:
        topo = build_destination_topology(dests, cfg.tau, cfg.epsilon_itm, bounds=cmap.extent)
        model = make_baseline(topo, GoalSet.from_topology(topo, lc.dwell_threshold), config=lc, cost_map=cmap)
    else:
        topo = build_prior_topology(cmap, dests, cfg.tau, cfg.epsilon_itm)
        model = init_model_from_topology(topo, cmap, GoalSet.from_topology(topo, lc.dwell_threshold), lc)
    out = _outdir(cfg)

    def progress(step):
        status = f"loglik {step.loglik:.3f}" if step.ok else f"skipped: {step.message}"
        print(f"[{step.index + 1}/{len(corpus)}] {step.trajectory_id} {status}")

    model, topo = train(model, topo, corpus, cmap, progress)
    total = 0.0
    for tr in corpus:
        total += sequence_loglik(model, ObservationSequence(tr.positions, assign_goal(model, tr.positions)))
    save_model(model, out / "model.ghmm")
    save_topology(topo, out / "topology.txt")
    (out / "model.txt").write_text(dump_model_text(model), encoding="utf-8")
    print(f"states {model.n_states}, nodes {len(topo.nodes)}, goals {len(model.goals)}, "
          f"final corpus log-likelihood {total:.6f}")
    return EXIT_OK


def cmd_predict(cfg: RunConfig, traj_id: str) -> int:
    cfg.need("model", "trajectories", "output_dir")
    model = load_model(cfg.model)
    trajs = {t.id: t for t in load_trajectories(cfg.trajectories)}
    if traj_id not in trajs:
        raise TrajectoryError(f"no trajectory with id {traj_id!r}")
    tr = trajs[traj_id]
    out = _outdir(cfg)
    path = out / f"predict_{traj_id}.csv"
    H = cfg.horizon
    belief = initial_belief(model)
    rows = [PREDICT_HEADER]
    for k in range(len(tr)):
        obs = tr.positions[k]
        belief = filter_update(model, belief, obs)
        mode = position_marginal(model, belief).mode()
        mx, my = model.node_pos[mode]
        res = predict(model, belief, H)
        px, py = res.expected_position
        row = [str(k), str(int(tr.t[k])), repr(float(obs[0])), repr(float(obs[1])), str(mode),
               repr(mx), repr(my), repr(px), repr(py)]
        if k + H < len(tr):
            gt = tr.positions[k + H]
            row += [repr(float(gt[0])), repr(float(gt[1])), repr(prediction_error((px, py), gt))]
        else:
            row += ["", "", ""]
        rows.append(row + [str(res.map_goal)])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    print(f"{len(tr)} rows -> {path}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig) -> int:
    cfg.need("model", "trajectories", "output_dir")
    model = load_model(cfg.model)
    test = load_trajectories(cfg.trajectories)
    out = _outdir(cfg)
    series = evaluate(model, None, test, cfg.horizon)
    rows = [["trajectory", "class", "step", "error"]]
    for s in series:
        rows.extend([s.trajectory_id, s.cls, str(k), repr(float(e))] for k, e in enumerate(s.errors))
        print(f"{s.trajectory_id} ({s.cls}): {len(s)} predictions, mean error {s.mean:.4f} m")
    with open(out / "errors.csv", "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    return EXIT_OK


def cmd_compare(cfg: RunConfig) -> int:
    cfg.need("scene", "trajectories", "test", "output_dir")
    scene = load_scene(cfg.scene)
    cmap = load_cost_map(cfg.cost_map) if cfg.cost_map else compute_potential_map(scene, cfg.resolution)
    corpus = load_trajectories(cfg.trajectories)
    test = load_trajectories(cfg.test)
    out = _outdir(cfg)
    report = run_comparison(cmap, list_destinations(scene), corpus, test, tau=cfg.tau,
                            horizon=cfg.horizon, config=cfg.learning(), sizes=cfg.sizes,
                            epsilon_itm=cfg.epsilon_itm)
    export_report(report, out)
    for r in report.rows:
        print(f"{r.preset:>7} {r.cls:<8} p = {r.combined_p:.4g}  mean error proposed "
              f"{r.mean_error_proposed:.3f} m, baseline {r.mean_error_baseline:.3f} m")
    if report.failed:
        print(f"comparison incomplete: {report.failed}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_synth(kind: str, out_dir: str, n_train: int, n_test: int, seed: int, tau: float) -> int:
    from . import synthetic

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if kind == "crossing":
        save_scene(synthetic.crossing_scene(), out / "scene.txt")
        tr, te = synthetic.crossing_corpus(n_train, n_test, seed)
        save_trajectories(tr, out / "train.csv")
        save_trajectories(te, out / "test.csv")
    else:
        save_scene(synthetic.corridor_scene(), out / "scene.txt")
        save_trajectories(synthetic.corridor_corpus(n_train, tau, seed), out / "train.csv")
        save_trajectories(synthetic.corridor_corpus(n_test, tau, seed + 1), out / "test.csv")
    print(f"wrote {kind} scene and corpus to {out}")
    return EXIT_OK


# -- argument parsing --------------------------------------------------------------

def _common(p: argparse.ArgumentParser, *names: str) -> None:
    p.add_argument("--config", help="JSON file with default option values")
    opts = {
        "scene": dict(help="scene description file"),
        "cost_map": dict(help="cost map binary (default: computed from the scene)"),
        "trajectories": dict(help="trajectory CSV"),
        "test": dict(help="test trajectory CSV"),
        "model": dict(help="model file"),
        "output_dir": dict(help="directory for outputs"),
        "resolution": dict(type=float, help="cost map cell size in metres"),
        "time": dict(type=int, help="timestep for obstacle activity"),
        "tau": dict(type=float, help="ITM insertion threshold and prior grid spacing (m)"),
        "epsilon": dict(type=float, help="cost difference threshold for transition seeding"),
        "epsilon_itm": dict(type=float, help="ITM adaptation rate"),
        "sigma_obs": dict(type=float, help="observation std-dev in metres (default tau/2)"),
        "bw_learning_rate": dict(type=float, help="Baum-Welch blending rate in (0, 1]"),
        "dwell_threshold": dict(type=int, help="dwell steps before a node becomes a goal"),
        "horizon": dict(type=int, help="prediction horizon in timesteps"),
        "pi0": dict(type=float, help="baseline prior weight"),
        "a0": dict(type=float, help="baseline transition weight"),
        "sizes": dict(type=int, nargs="+", help="training sizes to compare"),
    }
    for name in names:
        p.add_argument("--" + name.replace("_", "-"), dest=name, default=None, **opts[name])


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pedghmm", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    learn = ("tau", "epsilon", "epsilon_itm", "sigma_obs", "bw_learning_rate", "dwell_threshold",
             "pi0", "a0")

    p = sub.add_parser("build-map", help="compute the potential cost map of a scene")
    _common(p, "scene", "output_dir", "resolution", "time")

    p = sub.add_parser("train", help="build the prior topology and train on a corpus")
    _common(p, "scene", "cost_map", "trajectories", "output_dir", "resolution", *learn)
    p.add_argument("--baseline", action="store_true", help="train the preset-prior baseline instead")

    p = sub.add_parser("predict", help="filter one trajectory and write its prediction trace")
    _common(p, "model", "trajectories", "output_dir", "horizon")
    p.add_argument("--id", required=True, dest="traj_id", help="trajectory id")

    p = sub.add_parser("evaluate", help="prediction errors of a trained model on a test set")
    _common(p, "model", "trajectories", "output_dir", "horizon")

    p = sub.add_parser("compare", help="proposed model vs baseline over training sizes")
    _common(p, "scene", "cost_map", "trajectories", "test", "output_dir", "resolution", "horizon",
            "sizes", *learn)

    p = sub.add_parser("synth", help="write a synthetic scene with train and test corpora")
    p.add_argument("--kind", choices=("crossing", "corridor"), default="crossing")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--n-train", type=int, default=50)
    p.add_argument("--n-test", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tau", type=float, default=2.0)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            return cmd_synth(args.kind, args.output_dir, args.n_train, args.n_test, args.seed, args.tau)
        cfg = _config_from_args(args)
        if args.command == "build-map":
            return cmd_build_map(cfg)
        if args.command == "train":
            return cmd_train(cfg, baseline=args.baseline)
        if args.command == "predict":
            return cmd_predict(cfg, args.traj_id)
        if args.command == "evaluate":
            return cmd_evaluate(cfg)
        return cmd_compare(cfg)
    except (NumericalUnderflowError, DegenerateBeliefError) as exc:
        print(f"pedghmm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, SceneError, TrajectoryError, TopologyError, ModelError, OSError) as exc:
        print(f"pedghmm: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
