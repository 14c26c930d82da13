import importlib
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import toy_model
from pedghmm import _pykernels, kernels

ck = pytest.importorskip("pedghmm._ckernels")


def random_case(seed, n_nodes, n_goals, T):
    rng = np.random.default_rng(seed)
    m = toy_model(rng, n_nodes, n_goals)
    obs = rng.uniform(0, 10, (T, 2))
    logb = m.log_likelihoods(obs)
    B = np.ascontiguousarray(np.exp(logb - logb.max(axis=1, keepdims=True)))
    return m, B, rng


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 8), st.integers(1, 3), st.integers(1, 12))
def test_backends_agree(seed, n_nodes, n_goals, T):
    n_goals = min(n_goals, n_nodes)
    m, B, rng = random_case(seed, n_nodes, n_goals, T)
    indptr, indices, data = m.csr()
    pi = m.prior
    w = rng.dirichlet(np.ones(len(pi)))
    for H in (0, 1, 7):
        np.testing.assert_allclose(ck.propagate(indptr, indices, data, w, H),
                                   _pykernels.propagate(indptr, indices, data, w, H), rtol=1e-12, atol=1e-15)
    oc, tc = ck.filter_step(indptr, indices, data, w, B[0])
    op, tp = _pykernels.filter_step(indptr, indices, data, w, B[0])
    np.testing.assert_allclose(oc, op, rtol=1e-12, atol=1e-300)
    assert tc == pytest.approx(tp, rel=1e-12)
    llc, fc = ck.forward_loglik(indptr, indices, data, pi, B)
    llp, fp = _pykernels.forward_loglik(indptr, indices, data, pi, B)
    assert fc == fp
    if fc < 0:
        assert llc == pytest.approx(llp, rel=1e-12, abs=1e-12)
    rc = ck.forward_backward(indptr, indices, data, pi, B)
    rp = _pykernels.forward_backward(indptr, indices, data, pi, B)
    assert rc[4] == rp[4]
    if rc[4] < 0:
        assert rc[0] == pytest.approx(rp[0], rel=1e-12, abs=1e-12)
        for a, b in zip(rc[1:4], rp[1:4]):
            np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-14)


def test_nearest_two_ties_pick_lowest_index():
    pos = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [5.0, 5.0]])
    assert ck.nearest_two(pos, 0.0, 0.0)[:2] == (0, 1)
    assert _pykernels.nearest_two(pos, 0.0, 0.0)[:2] == (0, 1)
    one = np.array([[2.0, 2.0]])
    assert ck.nearest_two(one, 0, 0)[:2] == _pykernels.nearest_two(one, 0, 0)[:2] == (0, -1)


def test_zero_mass_reports_failing_step():
    m, B, _ = random_case(1, 3, 1, 4)
    B = B.copy()
    B[2] = 0.0
    indptr, indices, data = m.csr()
    for k in (ck, _pykernels):
        assert k.forward_loglik(indptr, indices, data, m.prior, B)[1] == 2
        assert k.forward_backward(indptr, indices, data, m.prior, B)[4] == 2


def test_env_forces_python_backend():
    env = dict(os.environ, PEDGHMM_BACKEND="python")
    out = subprocess.run([sys.executable, "-c", "from pedghmm import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
    assert importlib.reload(kernels).BACKEND in ("cython", "python")
