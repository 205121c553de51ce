import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from armkit import theory as th
from armkit.arm import ArmConfig
from armkit.model import ModelConfig, init_weights
from armkit.tensor import RngStream, rmsnorm


# -- Jacobian ---------------------------------------------------------------------

def test_jacobian_at_origin():
    g = np.array([1.0, 2.0, 0.5])
    assert np.allclose(th.rmsnorm_jacobian(np.zeros(3), g, 1e-4), np.diag(g) / math.sqrt(1e-4))


@given(st.integers(1, 16), st.integers(0, 2**32))
def test_jacobian_matches_finite_differences(d, seed):
    r = RngStream(seed)
    x = r.uniform_array(-2, 2, d)
    g = r.uniform_array(0.5, 1.5, d)
    if np.mean(x * x) < 1e-2:
        return
    assert th.jacobian_check(x, g).max_abs_error < 1e-6


@pytest.mark.parametrize("eps", [1e-2, 1e-4, 1e-6, 1e-8])
def test_jacobian_times_x_vanishes_with_eps(eps):
    x = np.array([0.3, -1.2, 0.8, 2.0])
    jx = th.rmsnorm_jacobian(x, None, eps) @ x
    # 0-homogeneous map: J x = eps * x / r^3 exactly
    r = math.sqrt(np.mean(x * x) + eps)
    assert np.allclose(jx, eps * x / r**3, atol=1e-15)
    assert np.linalg.norm(jx) <= 10 * eps


def test_jvp_matches_dense_jacobian():
    r = RngStream(3)
    x = r.uniform_array(-1, 1, 24).reshape(3, 8)
    v = r.uniform_array(-1, 1, 24).reshape(3, 8)
    g = np.linspace(0.5, 1.5, 8)
    want = np.stack([th.rmsnorm_jacobian(x[i], g) @ v[i] for i in range(3)])
    assert np.allclose(th._rms_jvp(x, v, g, 1e-6), want, atol=1e-13)


# -- scaling ------------------------------------------------------------------------

def test_scaling_zero_step():
    p = th.make_scaling_pipeline(2000, seed=1)
    r = th.scaling_report(p, 1.0, 0.0)
    assert r.predicted == 0.0 and r.empirical == 0.0


def test_scaling_linear_exact():
    p = th.make_scaling_pipeline(50_000, seed=2, linear=True)
    r = th.scaling_report(p, 1.0, 0.3)
    assert r.relative_error < 1e-10


def test_scaling_zero_cov_monte_carlo():
    rng = RngStream(5)
    n = 10**6
    z = rng.uniform_array(-1, 1, n)
    g = rng.uniform_array(-math.sqrt(3), math.sqrt(3), n)
    r = th.variance_change_scaling(z, g, 0.2, z + 0.2 * g)
    assert r.predicted == pytest.approx(0.04, rel=0.01)
    assert r.relative_error < 0.05


def test_scaling_errors():
    with pytest.raises(ValueError):
        th.variance_change_scaling([1.0], [1.0], 0.1)
    with pytest.raises(ValueError):
        th.variance_change_scaling([1.0, 2.0], [1.0], 0.1)


@pytest.mark.parametrize("seed", range(8))
def test_scaling_error_shrinks_with_step(seed):
    p = th.make_scaling_pipeline(100_000, seed=seed)
    errs = [th.scaling_report(p, 1.0, 0.1 / 2**i).relative_error for i in range(4)]
    assert max(b / a for a, b in zip(errs, errs[1:])) <= 0.6


def test_admissible_interval_examples():
    assert th.admissible_dlambda(0.0, 1.0, 1.0)[0] == 0.0
    assert th.admissible_dlambda(0.1, 1.0, 1.0) == pytest.approx((0.2, 3.0))
    assert th.admissible_dlambda(0.1, 0.1, 100.0) is None
    with pytest.raises(ValueError):
        th.admissible_dlambda(0.1, 0.0, 1.0)
    with pytest.raises(ValueError):
        th.admissible_dlambda(0.1, 1.0, -1.0)


def test_estimate_k_zero_for_linear_pipeline():
    # linear case: Var is quadratic in lambda, third derivative is 0
    p = th.make_scaling_pipeline(5000, seed=0, linear=True)
    assert th.estimate_k(p, 1.0, 0.1) < 1e-3


# -- bias -------------------------------------------------------------------------

def test_bias_zero_noise():
    x0 = np.array([0.5, -1.0, 2.0])
    r = th.variance_change_bias(x0, np.eye(3), np.zeros((3, 3)), np.ones(3), n_samples=1000)
    assert r.predicted == 0.0 and r.empirical == pytest.approx(0.0, abs=1e-25)


def test_bias_iso_small_noise():
    r = RngStream(8)
    x0 = 0.5 + r.uniform_array(-1, 1, 8)
    W = r.uniform_array(-0.4, 0.4, 48).reshape(8, 6)
    w = r.uniform_array(-0.35, 0.35, 8)
    rep = th.variance_change_bias(x0, W, 1e-6 * np.eye(6), w, n_samples=10**6, seed=9)
    assert rep.predicted > 0
    assert rep.relative_error < 0.05


def test_bias_error_shrinks_with_noise():
    r = RngStream(12)
    x0 = 0.5 + r.uniform_array(-1, 1, 6)
    W = r.uniform_array(-0.5, 0.5, 24).reshape(6, 4)
    w = r.uniform_array(-0.4, 0.4, 6)
    errs = [th.variance_change_bias(x0, W, s2 * np.eye(4), w, n_samples=200_000,
                                    seed=1).relative_error for s2 in (1e-1, 1e-6)]
    assert errs[1] < errs[0]


def test_bias_rejects_non_psd():
    with pytest.raises(ValueError):
        th.variance_change_bias(np.ones(2), np.eye(2), np.array([[1.0, 0], [0, -1.0]]),
                                np.ones(2), n_samples=10)
    with pytest.raises(ValueError):
        th.variance_change_bias(np.ones(2), np.eye(3), np.eye(3), np.ones(2), n_samples=10)


def test_bounded_noise_covariance():
    C = np.array([[2.0, 0.5], [0.5, 1.0]])
    s = th.bounded_noise(C, 400_000, RngStream(0))
    assert np.allclose(np.cov(s.T), C, atol=0.02)
    bound = np.abs(th._psd_sqrt(C)).sum(axis=1) * math.sqrt(3)
    assert np.all(np.abs(s) <= bound + 1e-12)


# -- Taylor moments ---------------------------------------------------------------

def test_taylor_examples():
    for kind in ("silu", "gelu"):
        assert th.taylor_moments(kind, 0.7, 0.0)[1] == 0.0
    m, v = th.taylor_moments("silu", 0.0, 0.04)
    assert m == pytest.approx(0.25 * 0.04, abs=1e-16) and v == pytest.approx(0.25 * 0.04)
    with pytest.raises(ValueError):
        th.taylor_moments("silu", 0.0, -1.0)


@pytest.mark.parametrize("kind", ["silu", "gelu"])
@pytest.mark.parametrize("mu", th.TAYLOR_MUS)
def test_taylor_variance_ratio(kind, mu):
    tc = th.taylor_check(kind, mu, 0.01, 200_000, seed=2)
    assert 0.9 <= tc.var_ratio <= 1.1
    assert tc.mean_error < tc.zeroth_error
    assert abs(tc.first_order_term) < 1e-12


@pytest.mark.parametrize("kind", ["silu", "gelu"])
def test_taylor_two_scale_decay(kind):
    a = th.taylor_check(kind, 0.3, 0.01, 200_000, seed=4)
    b = th.taylor_check(kind, 0.3, 0.005, 200_000, seed=4)
    assert b.mean_error <= (0.25 + 0.05) * a.mean_error


def test_symmetric_stratified_is_zero_mean_and_bounded():
    s = th.symmetric_stratified(RngStream(1), 1000, 0.5)
    assert s.size == 1000 and abs(s.mean()) < 1e-15
    assert np.all(np.abs(s) <= 0.5)


# -- combined -----------------------------------------------------------------------

def test_combined_examples():
    assert th.combined_variance(0, 0) == 0
    assert th.combined_variance(0.02, 0.04) == pytest.approx(0.06)
    with pytest.raises(ValueError):
        th.combined_variance(-1e-3, 0.1)


@pytest.mark.parametrize("seed", range(6))
def test_joint_simulation_additive(seed):
    p = th.make_scaling_pipeline(200_000, seed=seed)
    W = RngStream(seed + 100).uniform_array(-0.5, 0.5, 32).reshape(8, 4)
    sim = th.joint_simulation(p, 1.0, th.JOINT_DELTA, W, th.JOINT_NOISE_VAR * np.eye(4), seed=5)
    # components are signed; measure the non-additive remainder against their scale
    scale = abs(sim["bias"]) + abs(sim["scaling"])
    assert abs(sim["joint"] - sim["bias"] - sim["scaling"]) <= 0.1 * scale


def test_joint_simulation_linear_is_exactly_additive():
    p = th.make_scaling_pipeline(20_000, seed=3, linear=True)
    W = np.eye(8)[:, :3]
    sim = th.joint_simulation(p, 1.0, 0.2, W, 1e-2 * np.eye(3), seed=1)
    assert sim["bias"] > 0 and sim["scaling"] > 0
    assert sim["joint"] == pytest.approx(sim["bias"] + sim["scaling"], rel=0.05)


# -- model-level experiments ----------------------------------------------------------

@pytest.fixture(scope="module")
def toy():
    cfg = ModelConfig(n_layers=1, d_model=64, d_ff=256, n_heads=4, vocab_size=128)
    return init_weights(cfg, 0), cfg


def test_identity_redistribution(toy):
    w, cfg = toy
    r = th.redistribution_experiment(w, cfg, list(range(20)), lam=1.0, bias_scale=0.0)
    assert r.before == r.after
    assert r.counts_before.sum() == r.counts_after.sum() == 20 * cfg.d_ff


def test_redistribution_direction_seed_averaged():
    deltas = []
    for seed in range(20):
        cfg = ModelConfig(n_layers=1, d_model=64, d_ff=256, n_heads=4, vocab_size=128)
        w = init_weights(cfg, seed)
        prompt = [int(t) for t in np.random.default_rng(seed).integers(0, 128, 24)]
        r = th.redistribution_experiment(w, cfg, prompt, lam=0.9, bias_scale=0.01, seed=seed)
        deltas.append([r.after.relative_sparsity - r.before.relative_sparsity,
                       r.after.l1 - r.before.l1, r.after.l2 - r.before.l2])
    rs, l1, l2 = np.mean(deltas, axis=0)
    assert rs < 0 and l1 > 0 and l2 > 0


def test_redistribution_parallel_matches_serial(toy):
    w, cfg = toy
    a = th.redistribution_experiment(w, cfg, list(range(16)), n_trials=4, seed=2)
    b = th.redistribution_experiment(w, cfg, list(range(16)), n_trials=4, seed=2, parallel=3)
    assert a.after == b.after
    assert np.array_equal(a.counts_after, b.counts_after)


def test_arm_redistribution(toy):
    w, cfg = toy
    r = th.arm_redistribution(w, cfg, list(range(30)), ArmConfig(seed=1))
    assert r.after.l1 > r.before.l1
    assert r.after.relative_sparsity < r.before.relative_sparsity


# -- suite --------------------------------------------------------------------------

def test_verify_all_small_run_is_deterministic():
    a = th.verify_all(seed=0, n_samples=20_000, jacobian_points=5)
    b = th.verify_all(seed=0, n_samples=20_000, jacobian_points=5)
    assert th.checks_to_json(a) == th.checks_to_json(b)
    d = json.loads(th.checks_to_json(a))[0]
    assert set(d) == {"check_name", "predicted", "empirical", "rel_error", "tol", "pass"}


def test_verify_all_zero_tolerance_fails():
    checks = th.verify_all(seed=0, n_samples=20_000, tol=0.0, jacobian_points=3)
    assert not all(c.passed for c in checks)
