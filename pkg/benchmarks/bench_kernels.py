"""Time the compiled kernels against the NumPy fallback.

Run with ``python benchmarks/bench_kernels.py``. The model is the
cost-seeded GHMM on the synthetic crossing scene, so the sizes match a
realistic training run.
"""
import argparse
import timeit

import numpy as np

from pedghmm import _pykernels
from pedghmm.ghmm import GoalSet, LearningConfig, init_model_from_topology
from pedghmm.scene import compute_potential_map, list_destinations
from pedghmm.synthetic import crossing_scene
from pedghmm.topology import build_prior_topology

try:
    from pedghmm import _ckernels
except ImportError:
    _ckernels = None


def setup(tau: float, T: int):
    scene = crossing_scene()
    cmap = compute_potential_map(scene, 0.5)
    topo = build_prior_topology(cmap, list_destinations(scene), tau)
    model = init_model_from_topology(topo, cmap, GoalSet.from_topology(topo), LearningConfig(sigma_obs=tau / 2))
    rng = np.random.default_rng(0)
    obs = np.column_stack([np.linspace(2, 38, T), 5 + rng.normal(0, 0.3, T)])
    logb = model.log_likelihoods(obs)
    B = np.ascontiguousarray(np.exp(logb - logb.max(axis=1, keepdims=True)))
    pos, _ = topo.positions()
    return model, B, pos


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--tau", type=float, default=1.0)
    ap.add_argument("--T", type=int, default=300)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    model, B, pos = setup(args.tau, args.T)
    indptr, indices, data = model.csr()
    pi = model.prior
    w = np.ascontiguousarray(pi)
    lik = np.ascontiguousarray(B[0])
    cases = {
        "nearest_two": lambda k: k.nearest_two(pos, 20.0, 10.0),
        "filter_step": lambda k: k.filter_step(indptr, indices, data, w, lik),
        "propagate(H=75)": lambda k: k.propagate(indptr, indices, data, w, 75),
        "forward_loglik": lambda k: k.forward_loglik(indptr, indices, data, pi, B),
        "forward_backward": lambda k: k.forward_backward(indptr, indices, data, pi, B),
    }
    print(f"{len(model.states)} states, {len(data)} transitions, {len(pos)} nodes, T = {args.T}")
    print(f"{'kernel':<18}{'python (ms)':>14}{'cython (ms)':>14}{'speed-up':>10}")
    for name, fn in cases.items():
        n = 20 if name.startswith("forward") else 200
        tp = min(timeit.repeat(lambda: fn(_pykernels), number=n, repeat=args.repeat)) / n * 1e3
        if _ckernels is None:
            print(f"{name:<18}{tp:>14.4f}{'n/a':>14}{'':>10}")
            continue
        tc = min(timeit.repeat(lambda: fn(_ckernels), number=n, repeat=args.repeat)) / n * 1e3
        print(f"{name:<18}{tp:>14.4f}{tc:>14.4f}{tp / tc:>9.1f}x")


if __name__ == "__main__":
    main()
