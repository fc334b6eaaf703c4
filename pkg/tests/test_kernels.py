"""Kernel twins: the numba and numpy implementations must agree, and the
numpy reference must match brute-force oracles."""

import numpy as np
import pytest

from flowcast import kernels
from flowcast._accel import HAVE_NUMBA


def _twin_pairs():
    pairs = []
    for name, (np_fn, nb_fn) in kernels.IMPLEMENTATIONS.items():
        if nb_fn is not None:
            pairs.append(pytest.param(np_fn, nb_fn, id=name))
    return pairs


def _case_for(name, rng):
    if name == "systematic_resample_indices":
        w = rng.dirichlet(np.ones(17))
        return (np.cumsum(w), 0.4321)
    if name == "forward_fill_array":
        vals = rng.standard_normal((11, 3))
        miss = rng.uniform(size=(11, 3)) < 0.3
        miss[0] = False
        vals[miss] = 0.0
        return (vals, miss)
    if name == "crps_batch":
        return (np.sort(rng.standard_normal((6, 9)), axis=1), rng.standard_normal(6))
    if name == "diag_gauss_loglik":
        return (rng.standard_normal((8, 4)), rng.uniform(0.5, 2.0, (8, 4)), rng.standard_normal(4))
    if name == "flow_apply":
        return (rng.standard_normal((10, 5)), rng.standard_normal((5, 5)), rng.standard_normal(5), 0.07)
    raise AssertionError(f"no twin test case defined for kernel {name}")


@pytest.mark.skipif(not HAVE_NUMBA, reason="numba unavailable")
@pytest.mark.parametrize("np_fn,nb_fn", _twin_pairs())
def test_twin_implementations_agree(np_fn, nb_fn, rng):
    name = next(k for k, v in kernels.IMPLEMENTATIONS.items() if v[0] is np_fn)
    args = _case_for(name, rng)
    a = np_fn(*(x.copy() if isinstance(x, np.ndarray) else x for x in args))
    b = nb_fn(*(x.copy() if isinstance(x, np.ndarray) else x for x in args))
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_every_kernel_has_a_twin_case(rng):
    for name in kernels.IMPLEMENTATIONS:
        _case_for(name, rng)


# ---------------------------------------------------------------------------
# systematic resampling
# ---------------------------------------------------------------------------


def test_resample_uniform_weights_is_identity():
    w = np.full(5, 0.2)
    idx = kernels.systematic_resample_indices(np.cumsum(w), 0.5)
    np.testing.assert_array_equal(idx, [0, 1, 2, 3, 4])


def test_resample_point_mass_duplicates_winner():
    w = np.array([0.0, 1.0, 0.0])
    idx = kernels.systematic_resample_indices(np.cumsum(w), 0.123)
    np.testing.assert_array_equal(idx, [1, 1, 1])


def test_resample_counts_are_unbiased(rng):
    # E[#copies of particle i] = n * w_i; systematic resampling guarantees
    # the count is within 1 of that target for every draw of u.
    w = rng.dirichlet(np.ones(6))
    n = len(w)
    for u in np.linspace(0.0, 0.999, 25):
        idx = kernels.systematic_resample_indices(np.cumsum(w), float(u))
        counts = np.bincount(idx, minlength=n)
        assert np.all(np.abs(counts - n * w) < 1.0 + 1e-12)


def test_resample_indices_are_sorted(rng):
    w = rng.dirichlet(np.ones(9))
    idx = kernels.systematic_resample_indices(np.cumsum(w), 0.77)
    assert np.all(np.diff(idx) >= 0)


# ---------------------------------------------------------------------------
# forward fill
# ---------------------------------------------------------------------------


def test_forward_fill_copies_last_observed_value():
    vals = np.array([[1.0, 10.0], [0.0, 20.0], [3.0, 0.0], [0.0, 0.0]])
    miss = np.array([[False, False], [True, False], [False, True], [True, True]])
    out = kernels.forward_fill_array(vals.copy(), miss)
    np.testing.assert_array_equal(out[:, 0], [1.0, 1.0, 3.0, 3.0])
    np.testing.assert_array_equal(out[:, 1], [10.0, 20.0, 20.0, 20.0])


def test_forward_fill_no_missing_is_identity(rng):
    vals = rng.standard_normal((7, 2))
    out = kernels.forward_fill_array(vals.copy(), np.zeros((7, 2), dtype=bool))
    np.testing.assert_array_equal(out, vals)


# ---------------------------------------------------------------------------
# batched empirical CRPS
# ---------------------------------------------------------------------------


def _crps_brute(samples, y):
    n = len(samples)
    term1 = np.mean(np.abs(samples - y))
    term2 = np.mean(np.abs(samples[:, None] - samples[None, :])) / 2.0
    return term1 - term2


def test_crps_batch_matches_pairwise_bruteforce(rng):
    samples = np.sort(rng.standard_normal((5, 13)), axis=1)
    targets = rng.standard_normal(5)
    got = kernels.crps_batch(samples, targets)
    want = [_crps_brute(samples[i], targets[i]) for i in range(5)]
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_crps_batch_two_point_example():
    # samples {0, 2} vs target 1: mean|x-y| = 1, spread term = 1/2.
    got = kernels.crps_batch(np.array([[0.0, 2.0]]), np.array([1.0]))
    np.testing.assert_allclose(got, [0.5], rtol=1e-15)


def test_crps_degenerate_ensemble_is_absolute_error():
    got = kernels.crps_batch(np.full((1, 4), 2.5), np.array([1.0]))
    np.testing.assert_allclose(got, [1.5], rtol=1e-15)


# ---------------------------------------------------------------------------
# diagonal Gaussian log-likelihood
# ---------------------------------------------------------------------------


def test_diag_gauss_loglik_standard_normal_at_zero():
    got = kernels.diag_gauss_loglik(np.zeros((1, 3)), np.ones((1, 3)), np.zeros(3))
    np.testing.assert_allclose(got, [-1.5 * np.log(2 * np.pi)], rtol=1e-14)


def test_diag_gauss_loglik_matches_scipy(rng):
    from scipy import stats

    means = rng.standard_normal((6, 4))
    stds = rng.uniform(0.3, 2.0, (6, 4))
    y = rng.standard_normal(4)
    got = kernels.diag_gauss_loglik(means, stds, y)
    want = [stats.norm.logpdf(y, means[i], stds[i]).sum() for i in range(6)]
    np.testing.assert_allclose(got, want, rtol=1e-12)


# ---------------------------------------------------------------------------
# flow Euler step
# ---------------------------------------------------------------------------


def test_flow_apply_matches_affine_formula(rng):
    x = rng.standard_normal((4, 3))
    a = rng.standard_normal((3, 3))
    b = rng.standard_normal(3)
    got = kernels.flow_apply(x, a, b, 0.25)
    np.testing.assert_allclose(got, x + 0.25 * (x @ a.T + b), rtol=1e-14)


def test_flow_apply_zero_eps_is_identity(rng):
    x = rng.standard_normal((4, 3))
    got = kernels.flow_apply(x, rng.standard_normal((3, 3)), rng.standard_normal(3), 0.0)
    np.testing.assert_array_equal(got, x)
