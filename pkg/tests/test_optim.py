import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from specdyn import dynamics, kernels, model, optim

finite = st.floats(-10.0, 10.0, allow_nan=False, allow_infinity=False)


def test_sign_svd_diagonal():
    np.testing.assert_allclose(optim.sign_svd(np.diag([2.0, -3.0])), np.diag([1.0, -1.0]), atol=1e-14)


def test_sign_svd_fixes_orthogonal():
    q = model.haar_orthogonal(6, model.stream(0, "q"))
    np.testing.assert_allclose(optim.sign_svd(q), q, atol=1e-12)
    np.testing.assert_allclose(optim.sign_svd(q, method="gram"), q, atol=1e-12)


def test_sign_svd_unit_singular_values():
    g = model.stream(1, "g").standard_normal((8, 8))
    s = np.linalg.svd(optim.sign_svd(g), compute_uv=False)
    np.testing.assert_allclose(s, 1.0, atol=1e-10)


def test_gram_polar_matches_svd():
    rng = model.stream(2, "g")
    for shape in ((12, 12), (12, 5), (5, 12)):
        g = rng.standard_normal(shape)
        np.testing.assert_allclose(optim.sign_svd(g, method="gram"), optim.sign_svd(g), atol=1e-9)


def test_rank_deficient_polar_is_partial_isometry():
    rng = model.stream(3, "g")
    g = rng.standard_normal((10, 3)) @ rng.standard_normal((3, 10))
    for method in ("svd", "gram"):
        p = optim.sign_svd(g, method=method)
        assert np.trace(p @ p.T) == pytest.approx(3.0, abs=1e-8)


@settings(max_examples=40, deadline=None)
@given(g=arrays(float, (6, 4), elements=finite), c=st.floats(0.01, 100.0))
def test_sign_svd_idempotent_and_scale_invariant(g, c):
    p = optim.sign_svd(g)
    np.testing.assert_allclose(optim.sign_svd(p), p, atol=1e-8)
    np.testing.assert_allclose(optim.sign_svd(c * g), p, atol=1e-7)


@settings(max_examples=40, deadline=None)
@given(g=arrays(float, (5, 7), elements=finite))
def test_projection_trace_is_rank(g):
    p = optim.sign_svd(g)
    s = np.linalg.svd(g, compute_uv=False)
    rank = int(np.sum(s > optim.RANK_RTOL * s[0])) if s[0] > 0 else 0
    assert np.trace(p @ p.T) == pytest.approx(rank, abs=1e-8)


def test_newton_schulz_on_orthogonal_input():
    q = model.haar_orthogonal(32, model.stream(4, "q"))
    out = optim.newton_schulz_polar(q, 5)
    c = np.sum(out * q) / np.sum(q * q)
    assert abs(c - 1.0) < 0.02
    assert np.linalg.norm(out - q) / np.linalg.norm(q) < 0.05


def test_newton_schulz_rms_error_against_svd():
    errs = []
    for k in range(20):
        g = model.stream(5, "g", k).standard_normal((64, 64))
        errs.append(np.linalg.norm(optim.newton_schulz_polar(g, 5) - optim.sign_svd(g)) / 64.0)
    assert np.median(errs) < 0.15


@pytest.mark.xfail(strict=True, reason="quintic NS-5 leaves ~0.21 Frobenius error/sqrt(64) on Gaussian inputs")
def test_newton_schulz_frobenius_over_sqrt_n():
    g = model.stream(5, "g", 0).standard_normal((64, 64))
    assert np.linalg.norm(optim.newton_schulz_polar(g, 5) - optim.sign_svd(g)) / np.sqrt(64) < 0.15


def test_newton_schulz_rejects_zero_iterations():
    with pytest.raises(ValueError):
        optim.newton_schulz_polar(np.eye(3), 0)
    with pytest.raises(ValueError):
        optim.OptimizerSpec("muon", ns_iterations=0).validate()


def test_sign_entrywise_values():
    np.testing.assert_array_equal(optim.sign_entrywise(np.array([[0.5, -2.0], [-0.1, 3.0]])), [[1, -1], [-1, 1]])
    np.testing.assert_array_equal(optim.sign_entrywise(np.zeros((2, 3))), np.zeros((2, 3)))


@given(g=arrays(float, (4, 5), elements=finite))
def test_sign_entrywise_entries(g):
    assert set(np.unique(optim.sign_entrywise(g))) <= {-1.0, 0.0, 1.0}


def test_sign_entrywise_gaussian_nonzero():
    assert np.all(optim.sign_entrywise(model.stream(6, "g").standard_normal((30, 30))) != 0)


def test_sgd_step():
    w, _ = optim.step(optim.OptimizerSpec("sgd"), optim.OptimizerState(), np.zeros((2, 2)), np.eye(2), 0.1)
    np.testing.assert_allclose(w, -0.1 * np.eye(2))


def test_muon_without_momentum_tracks_sign_svd():
    g = model.stream(7, "g").standard_normal((64, 64))
    w, _ = optim.step(optim.OptimizerSpec("muon"), optim.OptimizerState(), np.zeros_like(g), g, 1.0)
    rms = np.sqrt(np.mean((-w - optim.sign_svd(g)) ** 2))
    assert rms < 0.15


def test_momentum_buffer_recursion():
    spec = optim.OptimizerSpec("muon", momentum=0.9)
    state = optim.OptimizerState()
    w = np.zeros((2, 2))
    for _ in range(2):
        w, state = optim.step(spec, state, w, np.eye(2), 0.0)
    np.testing.assert_allclose(state.buffer, 1.9 * np.eye(2))


def test_momentum_only_for_muon():
    with pytest.raises(ValueError):
        optim.OptimizerSpec("sign_svd", momentum=0.5).validate()


def test_zero_rate_keeps_risk():
    prob = model.square_problem(12, 12, alpha=1.0, beta=0.5, seed=1)
    tr = optim.run_trajectory(prob, optim.OptimizerSpec("sign_svd"), 10, 2, optim.ConstantRate(0.0))
    np.testing.assert_array_equal(tr.risks, tr.risks[:, :1].repeat(11, axis=1))


def test_single_trial_band_collapses():
    prob = model.square_problem(10, 10, seed=2)
    tr = optim.run_trajectory(prob, optim.OptimizerSpec("sign_sgd"), 8, 1, optim.ConstantRate(0.01))
    np.testing.assert_array_equal(tr.risk_lo, tr.risk_mean)
    np.testing.assert_array_equal(tr.risk_hi, tr.risk_mean)


def test_trajectory_independent_of_workers():
    prob = model.square_problem(12, 12, alpha=1.0, beta=0.5, seed=3)
    opt = optim.OptimizerSpec("muon", momentum=0.5)
    a = optim.run_trajectory(prob, opt, 6, 3, optim.ConstantRate(0.01), workers=1)
    b = optim.run_trajectory(prob, opt, 6, 3, optim.ConstantRate(0.01), workers=2)
    np.testing.assert_array_equal(a.risks, b.risks)
    assert a.fingerprint == b.fingerprint


def test_isotropic_greedy_mean_risk_decreases():
    prob = model.square_problem(128, 128, seed=4)
    table = kernels.iso_kernels("sign_svd", 128, 128)
    sched = dynamics.greedy_rate(table)
    tr = optim.run_trajectory(prob, optim.OptimizerSpec("sign_svd"), 60, 4, sched)
    assert np.all(np.diff(tr.risk_mean[5:]) < 0)
    th = dynamics.evolve(table, np.ones(128), sched, 60).risk
    assert np.max(np.abs(tr.risk_mean / th - 1.0)) < 0.05
