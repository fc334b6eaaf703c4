"""Particle-flow update: step schedule, ensemble moments, drift
coefficients (hand-derived affine cases), and convergence of the Euler
integration to the exact Gaussian posterior."""

import numpy as np
import pytest

from flowcast import flow as flow_mod
from flowcast.errors import FlowDivergedError, FlowSolveError
from flowcast.flow import (
    FlowConfig,
    GaussianBelief,
    LinearizedMeasurement,
    edh_coefficients,
    ensemble_moments,
    flow_update_measurement,
    step_schedule,
)
from flowcast.ssm import StateEnsemble


# ---------------------------------------------------------------------------
# step schedule
# ---------------------------------------------------------------------------


def test_schedule_sums_to_one():
    for n, q in [(29, 1.2), (8, 1.5), (100, 1.01)]:
        eps = step_schedule(n, q)
        assert eps.shape == (n,)
        np.testing.assert_allclose(eps.sum(), 1.0, rtol=1e-12)


def test_schedule_unit_ratio_is_uniform():
    eps = step_schedule(10, 1.0)
    np.testing.assert_allclose(eps, np.full(10, 0.1), rtol=1e-12)


def test_schedule_growth_ratio_between_consecutive_steps():
    eps = step_schedule(29, 1.2)
    np.testing.assert_allclose(eps[1:] / eps[:-1], np.full(28, 1.2), rtol=1e-12)


def test_schedule_last_over_first_is_ratio_power():
    eps = step_schedule(29, 1.2)
    np.testing.assert_allclose(eps[-1] / eps[0], 1.2**28, rtol=1e-12)
    # numerically that power is ~164.84, a factor the default schedule
    # concentrates into the late pseudo-time steps
    assert 164.0 < eps[-1] / eps[0] < 165.0


def test_schedule_first_step_closed_form():
    q, n = 1.2, 29
    eps = step_schedule(n, q)
    np.testing.assert_allclose(eps[0], (q - 1) / (q**n - 1), rtol=1e-12)


def test_schedule_rejects_bad_arguments():
    with pytest.raises(ValueError):
        step_schedule(0, 1.2)
    with pytest.raises(ValueError):
        step_schedule(5, 0.0)


# ---------------------------------------------------------------------------
# ensemble moments
# ---------------------------------------------------------------------------


def test_moments_two_point_ensemble():
    ens = np.array([[0.0], [2.0]])
    belief = ensemble_moments(StateEnsemble(ens), jitter=0.0)
    np.testing.assert_allclose(belief.mean, [1.0])
    np.testing.assert_allclose(belief.cov, [[1.0]])  # population covariance


def test_moments_jitter_inflates_diagonal():
    ens = np.array([[0.0, 0.0], [2.0, 0.0]])
    belief = ensemble_moments(StateEnsemble(ens), jitter=0.01)
    np.testing.assert_allclose(np.diag(belief.cov), [1.01, 0.01], rtol=1e-12)


def test_moments_single_particle_uses_prior_scale():
    ens = np.array([[3.0, -1.0]])
    belief = ensemble_moments(StateEnsemble(ens), jitter=0.5, single_particle_scale=2.0)
    np.testing.assert_allclose(belief.mean, [3.0, -1.0])
    np.testing.assert_allclose(belief.cov, 2.0 * np.eye(2))  # no jitter on top


def test_moments_covariance_is_symmetric(rng):
    ens = rng.standard_normal((40, 6))
    belief = ensemble_moments(StateEnsemble(ens))
    np.testing.assert_array_equal(belief.cov, belief.cov.T)


def test_moments_match_numpy_population_covariance(rng):
    ens = rng.standard_normal((25, 4))
    belief = ensemble_moments(StateEnsemble(ens), jitter=0.0)
    np.testing.assert_allclose(belief.mean, ens.mean(axis=0), rtol=1e-12)
    np.testing.assert_allclose(belief.cov, np.cov(ens.T, bias=True), rtol=1e-10, atol=1e-12)


# ---------------------------------------------------------------------------
# drift coefficients: scalar cases solvable by hand
# ---------------------------------------------------------------------------


def _scalar_case(lam):
    # prior N(1, 1), observation y = 1 with unit noise, H = 1
    belief = GaussianBelief(mean=np.array([1.0]), cov=np.array([[1.0]]))
    return edh_coefficients(belief, np.array([[1.0]]), np.array([1.0]), np.array([1.0]), lam)


def test_coefficients_at_lambda_zero():
    a, b = _scalar_case(0.0)
    # A = -1/2 * P H (H P H + R)^-1 H = -1/2 * 1/1 ... wait, lam=0 -> S = R = 1
    np.testing.assert_allclose(a, [[-0.5]], rtol=1e-12)
    # b = (I + 0)[(I + 0) P H R^-1 y + A mean] = 1*1*1*1 - 0.5*1 = 0.5
    np.testing.assert_allclose(b, [0.5], rtol=1e-12)


def test_coefficients_at_lambda_one():
    a, b = _scalar_case(1.0)
    # S = 1*1 + 1 = 2, A = -1/2 * 1/2 = -1/4
    np.testing.assert_allclose(a, [[-0.25]], rtol=1e-12)
    # b = (1 - 1/2) [ (1 - 1/4)*1 - 1/4 ] = 0.5 * 0.5 = 0.25
    np.testing.assert_allclose(b, [0.25], rtol=1e-12)


def test_coefficients_informative_observation_pulls_towards_it():
    belief = GaussianBelief(mean=np.array([0.0]), cov=np.array([[1.0]]))
    a, b = edh_coefficients(belief, np.array([[1.0]]), np.array([0.01]), np.array([5.0]), 0.0)
    # tiny measurement noise: drift near y/(2 r) * ... dominated by data pull
    assert b[0] > 0  # towards the positive observation
    assert a[0, 0] < 0  # contraction


def test_coefficients_singular_noise_raises():
    belief = GaussianBelief(mean=np.array([0.0]), cov=np.array([[1.0]]))
    with pytest.raises(FlowSolveError):
        edh_coefficients(belief, np.array([[1.0]]), np.array([-1.0]), np.array([0.0]), 0.5)


# ---------------------------------------------------------------------------
# full flow vs exact Gaussian posterior
# ---------------------------------------------------------------------------


def _constant_measurement(h, r_diag):
    return LinearizedMeasurement(
        mean_fn=lambda m: h @ m,
        jac_fn=lambda m: h,
        var_fn=lambda m: np.broadcast_to(r_diag, (h.shape[0],)).astype(float),
    )


def _kalman_posterior(mean0, cov0, h, r_diag, y):
    s = h @ cov0 @ h.T + np.diag(r_diag)
    k = cov0 @ h.T @ np.linalg.inv(s)
    mean = mean0 + k @ (y - h @ mean0)
    cov = cov0 - k @ h @ cov0
    return mean, cov


def test_flow_recovers_scalar_conjugate_posterior(rng):
    # prior N(0, 1), y = 1, r = 1 -> posterior N(0.5, 0.5).  A uniform
    # pseudo-time grid converges to the exact affine transport, so the
    # landing point is the Kalman update of the *sample* moments.
    particles = rng.standard_normal((20000, 1))
    m0, p0 = particles.mean(), particles.var()
    ens = flow_update_measurement(
        StateEnsemble(particles.copy()),
        np.array([1.0]),
        _constant_measurement(np.eye(1), np.array([1.0])),
        FlowConfig(n_lambda=512, ratio=1.0, jitter=0.0),
    )
    want_mean = m0 + p0 / (p0 + 1.0) * (1.0 - m0)
    want_var = p0 / (p0 + 1.0)
    assert abs(ens.particles.mean() - want_mean) < 2e-3
    assert abs(ens.particles.var() - want_var) < 2e-3
    assert abs(ens.particles.mean() - 0.5) < 0.02
    assert abs(ens.particles.var() - 0.5) < 0.02


def test_flow_default_schedule_lands_near_posterior(rng):
    # The default geometric grid keeps its last steps coarse, so the Euler
    # endpoint carries a small fixed bias; it must stay within a few percent.
    particles = rng.standard_normal((20000, 1))
    m0, p0 = particles.mean(), particles.var()
    ens = flow_update_measurement(
        StateEnsemble(particles.copy()),
        np.array([1.0]),
        _constant_measurement(np.eye(1), np.array([1.0])),
        FlowConfig(n_lambda=29, jitter=0.0),
    )
    want_mean = m0 + p0 / (p0 + 1.0) * (1.0 - m0)
    assert abs(ens.particles.mean() - want_mean) < 0.05


def test_flow_matches_kalman_moments_multivariate(rng):
    d = 4
    mean0 = rng.standard_normal(d)
    sqrt_c = rng.standard_normal((d, d)) * 0.4
    cov0 = sqrt_c @ sqrt_c.T + 0.5 * np.eye(d)
    h = rng.standard_normal((2, d))
    r_diag = np.array([0.5, 0.8])
    y = rng.standard_normal(2)

    particles = mean0 + rng.standard_normal((40000, d)) @ np.linalg.cholesky(cov0).T
    ens = flow_update_measurement(
        StateEnsemble(particles), y, _constant_measurement(h, r_diag), FlowConfig(n_lambda=1024, ratio=1.0, jitter=0.0)
    )
    # oracle: what the exact posterior does to the *sample* moments
    m_hat = particles.mean(axis=0)
    p_hat = np.cov(particles.T, bias=True)
    want_mean, want_cov = _kalman_posterior(m_hat, p_hat, h, r_diag, y)
    got_mean = ens.particles.mean(axis=0)
    got_cov = np.cov(ens.particles.T, bias=True)
    np.testing.assert_allclose(got_mean, want_mean, atol=0.01)
    np.testing.assert_allclose(got_cov, want_cov, atol=0.02)


def test_flow_euler_error_shrinks_with_more_uniform_steps(rng):
    d = 3
    mean0 = rng.standard_normal(d)
    cov0 = np.diag([1.0, 2.0, 0.5])
    h = np.eye(d)
    r_diag = np.full(d, 0.7)
    y = rng.standard_normal(d)
    particles = mean0 + rng.standard_normal((5000, d)) * np.sqrt(np.diag(cov0))
    m_hat = particles.mean(axis=0)
    p_hat = np.cov(particles.T, bias=True)
    want_mean, _ = _kalman_posterior(m_hat, p_hat, h, r_diag, y)

    errs = []
    for n_lambda in (8, 64, 512):
        ens = flow_update_measurement(
            StateEnsemble(particles.copy()),
            y,
            _constant_measurement(h, r_diag),
            FlowConfig(n_lambda=n_lambda, ratio=1.0, jitter=0.0),
        )
        errs.append(np.linalg.norm(ens.particles.mean(axis=0) - want_mean))
    assert errs[2] < errs[1] < errs[0]
    assert errs[2] < 0.01


def test_flow_zero_jacobian_leaves_particles_nearly_alone(rng):
    # H = 0: the observation carries no information, A = 0 and the drift
    # collapses to zero, so particles stay put.
    particles = rng.standard_normal((50, 2))
    ens = flow_update_measurement(
        StateEnsemble(particles.copy()),
        np.array([3.0]),
        _constant_measurement(np.zeros((1, 2)), np.array([1.0])),
        FlowConfig(n_lambda=8, jitter=0.0),
    )
    np.testing.assert_allclose(ens.particles, particles, atol=1e-12)


def test_flow_trace_records_full_schedule(rng):
    particles = rng.standard_normal((30, 2))
    cfg = FlowConfig(n_lambda=8)
    ens, trace = flow_update_measurement(
        StateEnsemble(particles),
        np.array([0.5, -0.5]),
        _constant_measurement(np.eye(2), np.array([1.0, 1.0])),
        cfg,
        return_trace=True,
    )
    assert len(trace) == 8
    eps = step_schedule(8, cfg.ratio)
    lam = 0.0
    for k, rec in enumerate(trace):
        np.testing.assert_allclose(rec.lam, lam, rtol=1e-12)  # coefficients use pre-step lambda
        np.testing.assert_allclose(rec.eps, eps[k], rtol=1e-12)
        assert rec.a.shape == (2, 2) and rec.b.shape == (2,)
        lam += eps[k]


def test_nonfinite_particles_are_rejected_at_construction():
    from flowcast.errors import NumericError

    with pytest.raises(NumericError):
        StateEnsemble(np.array([[np.inf, 0.0]]))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_flow_divergence_error_names_the_step(rng):
    # an explosive linearization: gigantic drift makes particles overflow
    particles = rng.standard_normal((10, 1)) * 1e150
    bad = LinearizedMeasurement(
        mean_fn=lambda m: m * 1e150,
        jac_fn=lambda m: np.array([[1e150]]),
        var_fn=lambda m: np.array([1e-300]),
    )
    with pytest.raises((FlowDivergedError, FlowSolveError)):
        flow_update_measurement(StateEnsemble(particles), np.array([1.0]), bad, FlowConfig(n_lambda=4, jitter=0.0))


def test_flow_config_validation():
    with pytest.raises(ValueError):
        FlowConfig(n_lambda=0)
    with pytest.raises(ValueError):
        FlowConfig(ratio=-1.0)
    with pytest.raises(ValueError):
        FlowConfig(jitter=-0.1)


def test_gaussian_belief_validation(rng):
    with pytest.raises(Exception):
        GaussianBelief(mean=np.zeros(2), cov=np.array([[1.0, 0.5], [0.4, 1.0]])).validate()
    GaussianBelief(mean=np.zeros(2), cov=np.eye(2)).validate()
