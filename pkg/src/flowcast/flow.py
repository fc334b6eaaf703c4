"""Particle-flow measurement update.

Instead of reweighting, particles are transported through a pseudo-time
ODE whose drift is affine in the state, ``d eta / d lambda = A eta + b``,
with coefficients chosen so that at ``lambda = 1`` the ensemble matches
the Gaussian posterior implied by the current linearization:

    A(l) = -1/2 P H^T (l H P H^T + R)^(-1) H
    b(l) = (I + 2 l A) [ (I + l A) P H^T R^(-1) y + A eta_bar ]

``P`` and ``eta_bar`` are the predictive ensemble moments, estimated once
from the incoming particles and frozen across pseudo-time; ``H``, the
offset ``e = h(mean) - H mean`` and the noise variances ``R`` are
re-linearized at the running particle mean each Euler step.  Steps follow
a geometric schedule, with coefficients evaluated at the pre-increment
pseudo-time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
import scipy.linalg

from . import ssm as ssm_mod
from .errors import DataError, FlowDivergedError, FlowSolveError
from .kernels import flow_apply


@dataclass(frozen=True)
class FlowConfig:
    """Knobs of the flow integrator."""

    n_lambda: int = 29
    ratio: float = 1.2
    jitter: float = 1e-2
    single_particle_prior_scale: float = 1.0
    relinearize_every_step: bool = True

    def __post_init__(self):
        if self.n_lambda < 1:
            raise DataError("n_lambda must be >= 1")
        if self.ratio <= 0:
            raise DataError("ratio must be positive")
        if self.jitter < 0:
            raise DataError("jitter must be non-negative")
        if self.single_particle_prior_scale <= 0:
            raise DataError("single_particle_prior_scale must be positive")


@dataclass
class GaussianBelief:
    """A Gaussian summary of an ensemble: mean and covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if self.mean.ndim != 1:
            raise DataError("belief mean must be a vector")
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise DataError("belief covariance must be (D, D)")

    def validate(self, sym_tol: float = 1e-10, eig_floor: float = -1e-8) -> None:
        if not np.allclose(self.cov, self.cov.T, atol=sym_tol):
            raise DataError("belief covariance is not symmetric")
        if np.min(np.linalg.eigvalsh(self.cov)) < eig_floor:
            raise DataError("belief covariance has a significantly negative eigenvalue")


@dataclass
class LinearizedMeasurement:
    """Callables describing a (possibly state-dependent) measurement model.

    ``mean_fn(x) -> (N,)`` observation mean at state x, ``jac_fn(x) ->
    (N, D)`` its Jacobian, ``var_fn(x) -> (N,)`` diagonal noise variances.
    """

    mean_fn: Callable[[np.ndarray], np.ndarray]
    jac_fn: Callable[[np.ndarray], np.ndarray]
    var_fn: Callable[[np.ndarray], np.ndarray]


@dataclass
class FlowStepRecord:
    """One Euler step of the flow: frozen affine coefficients."""

    lam: float
    eps: float
    a: np.ndarray
    b: np.ndarray


# ---------------------------------------------------------------------------
# schedule and moments
# ---------------------------------------------------------------------------


def step_schedule(n_lambda: int, ratio: float) -> np.ndarray:
    """Geometric Euler step sizes eps_m = eps_1 * ratio^(m-1), summing to one."""
    if n_lambda < 1:
        raise DataError("n_lambda must be >= 1")
    if ratio <= 0:
        raise DataError("ratio must be positive")
    if ratio == 1.0:
        return np.full(n_lambda, 1.0 / n_lambda)
    eps_1 = (ratio - 1.0) / (ratio**n_lambda - 1.0)
    return eps_1 * ratio ** np.arange(n_lambda)


def ensemble_moments(
    ensemble,
    jitter: float = 1e-2,
    single_particle_scale: float = 1.0,
) -> GaussianBelief:
    """Mean and regularized population covariance of an ensemble.

    Covariance uses the 1/N_p normalization plus ``jitter * I``.  A single
    particle falls back to the isotropic prior ``single_particle_scale * I``
    (no jitter term in that branch).
    """
    particles = ensemble.particles if isinstance(ensemble, ssm_mod.StateEnsemble) else np.asarray(ensemble, dtype=np.float64)
    if particles.ndim != 2:
        raise DataError("ensemble must be a (n_particles, D) array")
    n_p, d = particles.shape
    mean = particles.mean(axis=0)
    if n_p == 1:
        cov = single_particle_scale * np.eye(d)
    else:
        centered = particles - mean
        cov = centered.T @ centered / n_p
        cov = 0.5 * (cov + cov.T) + jitter * np.eye(d)
    return GaussianBelief(mean=mean, cov=cov)


# ---------------------------------------------------------------------------
# flow coefficients
# ---------------------------------------------------------------------------


def edh_coefficients(
    belief: GaussianBelief,
    h_mat: np.ndarray,
    r_diag: np.ndarray,
    y_eff: np.ndarray,
    lam: float,
) -> tuple:
    """Affine drift coefficients (A, b) at pseudo-time ``lam``.

    ``h_mat`` is the (N, D) linearized observation matrix, ``r_diag`` the
    diagonal observation noise variances, ``y_eff`` the effective
    observation (already offset-corrected).  The inner (N, N) system is
    solved as an SPD system, never inverted explicitly.
    """
    p = belief.cov
    h_mat = np.asarray(h_mat, dtype=np.float64)
    r_diag = np.asarray(r_diag, dtype=np.float64)
    y_eff = np.asarray(y_eff, dtype=np.float64)
    d = p.shape[0]
    pht = p @ h_mat.T  # (D, N)
    s = lam * (h_mat @ pht) + np.diag(r_diag)
    try:
        cho = scipy.linalg.cho_factor(s, lower=True, check_finite=False)
        s_inv_h = scipy.linalg.cho_solve(cho, h_mat, check_finite=False)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError) as exc:
        raise FlowSolveError(f"SPD solve failed at pseudo-time lambda={lam:.6g}: {exc}") from exc
    a = -0.5 * pht @ s_inv_h
    eye = np.eye(d)
    rhs = (eye + lam * a) @ (pht @ (y_eff / r_diag)) + a @ belief.mean
    b = (eye + 2.0 * lam * a) @ rhs
    return a, b


# ---------------------------------------------------------------------------
# the flow update
# ---------------------------------------------------------------------------


def flow_update_measurement(
    ensemble: ssm_mod.StateEnsemble,
    y_t: np.ndarray,
    measurement: LinearizedMeasurement,
    config: FlowConfig = FlowConfig(),
    return_trace: bool = False,
):
    """Transport an ensemble through the measurement update for ``y_t``.

    Generic core: works for any linearized measurement model.  Returns the
    updated ensemble, plus the per-step coefficient records when
    ``return_trace`` is true.
    """
    y_t = np.asarray(y_t, dtype=np.float64)
    particles = np.array(ensemble.particles, dtype=np.float64)
    belief = ensemble_moments(particles, jitter=config.jitter, single_particle_scale=config.single_particle_prior_scale)
    eps = step_schedule(config.n_lambda, config.ratio)

    h_mat = e_off = r_diag = None
    lam = 0.0
    trace: List[FlowStepRecord] = []
    for m in range(config.n_lambda):
        if m == 0 or config.relinearize_every_step:
            mean_now = particles.mean(axis=0)
            h_mat = measurement.jac_fn(mean_now)
            e_off = measurement.mean_fn(mean_now) - h_mat @ mean_now
            r_diag = measurement.var_fn(mean_now)
        a, b = edh_coefficients(belief, h_mat, r_diag, y_t - e_off, lam)
        particles = flow_apply(particles, a, b, float(eps[m]))
        if not np.all(np.isfinite(particles)):
            bad = int(np.argwhere(~np.isfinite(particles))[0][0])
            raise FlowDivergedError(
                f"particle {bad} became non-finite at pseudo-time step {m + 1}/{config.n_lambda} (lambda={lam:.6g})"
            )
        if return_trace:
            trace.append(FlowStepRecord(lam=lam, eps=float(eps[m]), a=a, b=b))
        lam += float(eps[m])

    out = ssm_mod.StateEnsemble(particles=particles, time_index=ensemble.time_index)
    if return_trace:
        return out, trace
    return out


def model_measurement(model: ssm_mod.ModelTheta, z_t=None) -> LinearizedMeasurement:
    """The shipped model's emission as a linearized measurement.

    The emission mean is linear (W_phi x, covariates do not enter), so the
    Jacobian is constant; only the noise variances depend on the state.
    """
    w_phi = model.W_phi
    c_gamma = model.C_gamma

    def mean_fn(x):
        return w_phi @ x

    def jac_fn(x):
        return w_phi

    def var_fn(x):
        std = np.logaddexp(0.0, c_gamma @ x)
        return std * std

    return LinearizedMeasurement(mean_fn=mean_fn, jac_fn=jac_fn, var_fn=var_fn)


def flow_update(
    ensemble: ssm_mod.StateEnsemble,
    y_t: np.ndarray,
    z_t,
    model: ssm_mod.ModelTheta,
    config: FlowConfig = FlowConfig(),
    return_trace: bool = False,
):
    """Measurement update of a predictive ensemble against observation ``y_t``."""
    if np.asarray(y_t).shape != (model.n_series,):
        raise DataError(f"y_t must have shape ({model.n_series},)")
    return flow_update_measurement(ensemble, y_t, model_measurement(model, z_t), config, return_trace)
