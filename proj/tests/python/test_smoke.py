import json

import numpy as np
import pytest

import sublaplace as sl


def test_gradient_matches_finite_differences():
    m = sl.Mlp.initialize([3, 5, 1], seed=2)
    x = np.array([0.3, -0.7, 1.1])
    g = m.param_gradient(x)
    theta = m.theta
    fd = np.empty_like(theta)
    h = 1e-6
    for j in range(len(theta)):
        e = np.zeros_like(theta)
        e[j] = h
        fd[j] = (m.with_theta(theta + e).forward(x) - m.with_theta(theta - e).forward(x)) / (2 * h)
    assert m.num_params == sl.Mlp.count_params([3, 5, 1]) == 26
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)


def test_variance_against_numpy_inverse():
    rng = np.random.default_rng(0)
    g = rng.normal(size=(8, 12))
    prior = rng.uniform(0.5, 2.0, size=12)
    sys = sl.system_from_gradients(g, np.zeros(8), sl.Likelihood.Regression, 0.3, prior)
    omega = g.T @ g / 0.3 + np.diag(prior)
    q = rng.normal(size=12)
    ref = q @ np.linalg.solve(omega, q)
    full = sl.FullPosterior(sys)
    assert full.variance(q)["epistemic"] == pytest.approx(ref, rel=1e-9)
    assert full.variance(q)["total"] == pytest.approx(ref + 0.3, rel=1e-9)
    s = [0, 3, 7]
    sub = q[s] @ np.linalg.solve(omega[np.ix_(s, s)], q[s])
    assert sys.subset_variance(s, q)["epistemic"] == pytest.approx(sub, rel=1e-9)


def test_selectors_return_k_indices():
    rng = np.random.default_rng(1)
    g = rng.normal(size=(10, 20))
    sys = sl.system_from_gradients(g, np.zeros(10), sl.Likelihood.Regression, 1.0, np.ones(20))
    assert len(sl.select_gradient_laplace(g, 4)) == 4
    assert len(sl.select_greedy_laplace(sys, 4)) == 4
    diag = sys.diag_precision()
    chosen = sl.select_subnet_diagonal(diag, 3)
    assert sorted(chosen) == sorted(np.argsort(diag, kind="stable")[:3].tolist())


def test_ipv_and_theorem_check():
    inst = sl.IpvInstance(np.eye(3), np.ones(3), 1.0, 2.0)
    # Each identity coordinate contributes c / (1 + c) with c = 1/2.
    assert sl.ipv(inst, [0, 2]) == pytest.approx(2 * 0.5 / 1.5)
    assert sl.verify_theorem1(inst)["passed"]
    with pytest.raises(sl.Error):
        sl.ipv(inst, [5])


def test_wheel_and_config_errors(tmp_path):
    x = sl.wheel_context(3, 10)
    assert np.linalg.norm(x) <= 1.0
    assert np.array_equal(x, sl.wheel_context(3, 10))
    with pytest.raises(sl.ConfigError):
        sl.config_hash(json.dumps({"experiment": "theory", "seeds": [0], "bogus": 1}))
    cfg = {"experiment": "theory", "seeds": [0],
           "theory": {"theorem1": {"instances": 2}, "theorem2": {"instances": 2}, "theorem3": {"instances": 2}}}
    out = sl.run_experiment(json.dumps(cfg), str(tmp_path))
    assert out["exit_code"] == 0
    assert (tmp_path / "theory_summary.json").exists()
