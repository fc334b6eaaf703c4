"""Training: losses, reverse-mode gradients, and the SGD fit loop.

The gradient path records one tape over a whole minibatch (windows
stacked on a leading axis) and differentiates the sampled forecast
pipeline end to end — through transitions, emissions, the sampled decoder
feedback and the flow's affine updates.  The flow *coefficients* (A, b,
ensemble moments, linearization, noise variances) are treated as
constants: gradients do not flow into them, and the recorded coefficient
trace can be replayed so finite-difference checks differentiate exactly
the same function.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import flow as flow_mod
from . import ssm as ssm_mod
from .data import Window
from .errors import DataError, NumericError
from .forecast import ForecastDistribution

_LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Optimization knobs."""

    loss: str = "mae"
    lr: float = 0.01
    milestones: tuple = (20, 30, 40, 50)
    lr_factor: float = 0.1
    clip_norm: float = 5.0
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    n_particles_train: int = 1
    n_particles_eval: int = 10
    scheduled_sampling_tau: float = 2000.0
    seed: int = 0
    learn_rho_sigma: bool = False
    flow: flow_mod.FlowConfig = field(default_factory=flow_mod.FlowConfig)

    def __post_init__(self):
        if self.loss not in ("mae", "nll"):
            raise DataError("loss must be 'mae' or 'nll'")
        if self.lr < 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise DataError("lr must be non-negative; batch_size and max_epochs positive")
        if self.n_particles_train < 1 or self.n_particles_eval < 1:
            raise DataError("particle counts must be >= 1")


@dataclass
class TrainData:
    """Windows the fit loop consumes (already standardized)."""

    train_windows: List[Window]
    val_windows: List[Window]
    graph: Optional[ssm_mod.Graph] = None


@dataclass
class TrainResult:
    model: ssm_mod.ModelTheta
    log: List[dict]
    best_epoch: int
    best_val: float
    stopped_early: bool = False
    diverged: bool = False


# ---------------------------------------------------------------------------
# parameter plumbing
# ---------------------------------------------------------------------------


def param_names(model: ssm_mod.ModelTheta) -> List[str]:
    return ["rho", "sigma", *sorted(model.dyn_params), "W_phi", "C_gamma"]


def get_param(model: ssm_mod.ModelTheta, name: str) -> np.ndarray:
    if name == "rho":
        return np.asarray(model.rho, dtype=np.float64)
    if name == "sigma":
        return np.asarray(model.sigma, dtype=np.float64)
    if name == "W_phi":
        return model.W_phi
    if name == "C_gamma":
        return model.C_gamma
    return model.dyn_params[name]


def model_with_params(model: ssm_mod.ModelTheta, values: Dict[str, np.ndarray]) -> ssm_mod.ModelTheta:
    dyn = {k: np.array(values[k]) for k in model.dyn_params}
    return ssm_mod.ModelTheta(
        rho=float(values["rho"]),
        sigma=float(values["sigma"]),
        dyn_params=dyn,
        W_phi=np.array(values["W_phi"]),
        C_gamma=np.array(values["C_gamma"]),
        hyper=dict(model.hyper),
    )


def flatten_params(model: ssm_mod.ModelTheta, values: Optional[Dict[str, np.ndarray]] = None) -> np.ndarray:
    vecs = []
    for name in param_names(model):
        arr = values[name] if values is not None else get_param(model, name)
        vecs.append(np.asarray(arr, dtype=np.float64).ravel())
    return np.concatenate(vecs)


def unflatten_params(model: ssm_mod.ModelTheta, vector: np.ndarray) -> Dict[str, np.ndarray]:
    out = {}
    pos = 0
    for name in param_names(model):
        ref = get_param(model, name)
        size = ref.size
        out[name] = vector[pos : pos + size].reshape(ref.shape).copy()
        pos += size
    if pos != vector.size:
        raise DataError("flat parameter vector has the wrong length")
    return out


# ---------------------------------------------------------------------------
# batched window stacks
# ---------------------------------------------------------------------------


@dataclass
class BatchArrays:
    """One minibatch, stacked: histories, targets, covariates, noise."""

    y_hist: np.ndarray  # (B, P, N)
    y_future: np.ndarray  # (B, Q, N)
    z: Optional[np.ndarray]  # (B, P+Q, d_z) or None
    window_ids: List[int]
    init: np.ndarray  # (B, n_p, D)
    dyn: np.ndarray  # (P+Q-1, B, n_p, D)
    meas: np.ndarray  # (Q, B, n_p, N)

    @property
    def sizes(self):
        b, p, n = self.y_hist.shape
        return b, p, self.y_future.shape[1], n


def stack_batch(windows: Sequence[Window], model: ssm_mod.ModelTheta, n_particles: int, seed_key) -> BatchArrays:
    """Stack windows and pre-draw every noise tensor (one child seed per window)."""
    y_hist = np.stack([np.asarray(w.y_past, dtype=np.float64) for w in windows])
    if any(w.y_future is None for w in windows):
        raise DataError("training windows need target rows")
    y_future = np.stack([np.asarray(w.y_future, dtype=np.float64) for w in windows])
    z = None
    if windows[0].z is not None:
        z = np.stack([np.asarray(w.z, dtype=np.float64) for w in windows])
    b, p, n = y_hist.shape
    q = y_future.shape[1]
    noises = [
        ssm_mod.make_window_noise(seed_key, w.window_id, n_particles, model, p, q)
        for w in windows
    ]
    init = np.stack([nz.init for nz in noises])
    dyn = np.stack([nz.dyn for nz in noises]).transpose(1, 0, 2, 3) if p + q > 1 else np.zeros((0, b, n_particles, model.state_dim))
    meas = np.stack([nz.meas for nz in noises]).transpose(1, 0, 2, 3) if q else np.zeros((0, b, n_particles, n))
    return BatchArrays(
        y_hist=y_hist,
        y_future=y_future,
        z=z,
        window_ids=[w.window_id for w in windows],
        init=init,
        dyn=dyn,
        meas=meas,
    )


# ---------------------------------------------------------------------------
# batched flow coefficients (plain numpy, frozen by contract)
# ---------------------------------------------------------------------------


def _batched_moments(xv: np.ndarray, cfg: flow_mod.FlowConfig):
    """Per-window ensemble moments; xv is (B, n_p, D)."""
    b, n_p, d = xv.shape
    mean = xv.mean(axis=1)
    if n_p == 1:
        cov = np.broadcast_to(cfg.single_particle_prior_scale * np.eye(d), (b, d, d)).copy()
    else:
        centered = xv - mean[:, None, :]
        cov = np.einsum("bpi,bpj->bij", centered, centered) / n_p
        cov = 0.5 * (cov + cov.transpose(0, 2, 1)) + cfg.jitter * np.eye(d)
    return mean, cov


def _batched_coefficients(mean0, pht, h_mat, r_diag, y_obs, lam):
    """(A, b) per window, all plain arrays.

    mean0: (B, D) frozen predictive means; pht: (B, D, N) frozen P H^T;
    h_mat: (N, D); r_diag: (B, N); y_obs: (B, N).
    """
    b_sz, d, n = pht.shape
    s = lam * np.einsum("nd,bdm->bnm", h_mat, pht)
    idx = np.arange(n)
    s[:, idx, idx] += r_diag
    try:
        s_inv_h = np.linalg.solve(s, np.broadcast_to(h_mat, (b_sz, n, d)))
    except np.linalg.LinAlgError as exc:
        raise flow_mod.FlowSolveError(f"batched SPD solve failed at lambda={lam:.6g}: {exc}") from exc
    a = -0.5 * np.einsum("bdn,bne->bde", pht, s_inv_h)
    ph_ry = np.einsum("bdn,bn->bd", pht, y_obs / r_diag)
    rhs = ph_ry + lam * np.einsum("bde,be->bd", a, ph_ry) + np.einsum("bde,be->bd", a, mean0)
    b_vec = rhs + 2.0 * lam * np.einsum("bde,be->bd", a, rhs)
    return a, b_vec


# ---------------------------------------------------------------------------
# the batched forward pass (tape-transparent)
# ---------------------------------------------------------------------------


def batch_forward(
    params: Dict[str, object],
    model: ssm_mod.ModelTheta,
    batch: BatchArrays,
    config: TrainConfig,
    graph: Optional[ssm_mod.Graph] = None,
    ss_mask: Optional[np.ndarray] = None,
    frozen_trace: Optional[list] = None,
    collect_trace: bool = False,
    noiseless: bool = False,
):
    """Run the assimilate-then-rollout pipeline for a stacked batch.

    ``params`` maps parameter names to Vars (training) or arrays
    (inference).  Returns (loss, aux) where aux carries the per-step
    samples, the flow coefficient trace, and the point forecast values.
    """
    hyper = model.hyper
    b_sz, p_steps, q_steps, n = batch.sizes
    n_p = batch.init.shape[1]
    d = model.state_dim
    flow_cfg = config.flow
    eps = flow_mod.step_schedule(flow_cfg.n_lambda, flow_cfg.ratio)
    w_phi_t = ad.transpose2(params["W_phi"])
    c_gamma_t = ad.transpose2(params["C_gamma"])
    w_phi_val = ad.val(params["W_phi"])
    c_gamma_val = ad.val(params["C_gamma"])
    mixing = None
    if hyper["kind"] == "graph_gru":
        mixing = ssm_mod.build_mixing(params, hyper, graph)

    def rows(y_bn):  # (B, N) constant -> (B*n_p, N)
        return np.broadcast_to(np.asarray(y_bn, dtype=np.float64)[:, None, :], (b_sz, n_p, n)).reshape(b_sz * n_p, n)

    def z_rows(t_index):  # covariates for 1-based time t, per particle-row
        if batch.z is None:
            return None
        zt = batch.z[:, t_index - 1, :]  # (B, d_z)
        d_z = zt.shape[1]
        return np.broadcast_to(zt[:, None, :], (b_sz, n_p, d_z)).reshape(b_sz * n_p, d_z)

    def step_transition(x2, y_prev, t_index, dyn_noise):
        out = ssm_mod.transition_core(params, hyper, x2, y_prev, z_rows(t_index), mixing=mixing)
        return ad.add(out, ad.mul(params["sigma"], dyn_noise.reshape(b_sz * n_p, d)))

    # ---- encoder: assimilate the history -------------------------------
    x3 = ad.mul(params["rho"], batch.init)  # (B, n_p, D)
    trace: List[list] = []
    for t in range(1, p_steps + 1):
        if t > 1:
            x2 = ad.reshape(x3, (b_sz * n_p, d))
            x2 = step_transition(x2, rows(batch.y_hist[:, t - 2, :]), t, batch.dyn[t - 2])
            x3 = ad.reshape(x2, (b_sz, n_p, d))
        y_t = batch.y_hist[:, t - 1, :]
        step_records = []
        if frozen_trace is None:
            xv = ad.val(x3)
            mean0, cov = _batched_moments(xv, flow_cfg)
            pht = np.einsum("bij,nj->bin", cov, w_phi_val)
            lam = 0.0
            r_diag = None
            for m in range(flow_cfg.n_lambda):
                if m == 0 or flow_cfg.relinearize_every_step:
                    means_now = ad.val(x3).mean(axis=1)
                    std_now = np.logaddexp(0.0, means_now @ c_gamma_val.T)
                    r_diag = std_now * std_now
                a_stack, b_stack = _batched_coefficients(mean0, pht, w_phi_val, r_diag, y_t, lam)
                x3 = ad.flow_step(x3, a_stack, b_stack, float(eps[m]))
                step_records.append((lam, float(eps[m]), a_stack, b_stack))
                lam += float(eps[m])
        else:
            for lam, eps_m, a_stack, b_stack in frozen_trace[t - 1]:
                x3 = ad.flow_step(x3, a_stack, b_stack, eps_m)
                step_records.append((lam, eps_m, a_stack, b_stack))
        if not np.all(np.isfinite(ad.val(x3))):
            raise flow_mod.FlowDivergedError(f"particles became non-finite during the flow at encoder step {t}")
        if collect_trace or frozen_trace is not None:
            trace.append(step_records)

    # ---- decoder: sampled rollout ---------------------------------------
    sample_steps = []
    mean_steps = []
    std_steps = []
    y_prev_sample = None
    for k in range(1, q_steps + 1):
        t = p_steps + k
        if k == 1:
            y_in = rows(batch.y_hist[:, p_steps - 1, :])
        else:
            y_in = ad.reshape(y_prev_sample, (b_sz * n_p, n))
            if ss_mask is not None:
                truth = rows(batch.y_future[:, k - 2, :])
                mask = np.repeat(ss_mask[:, k - 2].astype(np.float64), n_p)[:, None]  # (B*n_p, 1)
                y_in = ad.add(mask * truth, ad.mul(1.0 - mask, y_in))
        x2 = ad.reshape(x3, (b_sz * n_p, d))
        x2 = step_transition(x2, y_in, t, batch.dyn[t - 2])
        x3 = ad.reshape(x2, (b_sz, n_p, d))
        mean2 = ad.matmul(x2, w_phi_t)
        std2 = ad.softplus(ad.matmul(x2, c_gamma_t))
        mean3 = ad.reshape(mean2, (b_sz, n_p, n))
        std3 = ad.reshape(std2, (b_sz, n_p, n))
        if noiseless:
            y_samp = mean3
        else:
            y_samp = ad.add(mean3, ad.mul(std3, batch.meas[k - 1]))
        sample_steps.append(y_samp)
        mean_steps.append(mean3)
        std_steps.append(std3)
        y_prev_sample = y_samp

    samples = ad.stack(sample_steps, axis=2) if q_steps else np.zeros((b_sz, n_p, 0, n))

    # ---- loss ------------------------------------------------------------
    if config.loss == "mae":
        point = _particle_median(samples)
        loss = ad.mean_(ad.abs_(ad.sub(point, batch.y_future)))
    else:
        per_window = None
        for k in range(q_steps):
            y_t = batch.y_future[:, k, :][:, None, :]  # (B, 1, N)
            diff = ad.sub(y_t, mean_steps[k])
            zsc = ad.div(diff, std_steps[k])
            quad = ad.add(ad.mul(0.5, ad.square(zsc)), ad.log(std_steps[k]))
            ll = ad.sub(ad.neg(ad.sum_(quad, axis=2)), 0.5 * n * _LOG_2PI)  # (B, n_p)
            lme = ad.sub(ad.logsumexp(ll, axis=1), math.log(n_p))  # (B,)
            per_window = lme if per_window is None else ad.add(per_window, lme)
        loss = ad.neg(ad.mean_(per_window))

    aux = {
        "samples": samples,
        "trace": trace,
        "means": mean_steps,
        "stds": std_steps,
        "states": None,
    }
    return loss, aux


def _particle_median(samples):
    """Median over the particle axis (axis 1) as a tape op."""
    vals = ad.val(samples)
    n_p = vals.shape[1]
    order = np.argsort(vals, axis=1, kind="stable")
    mid = n_p // 2
    if n_p % 2 == 1:
        idx = order[:, mid : mid + 1]
        picked = ad.gather(samples, idx, axis=1)
    else:
        lo = ad.gather(samples, order[:, mid - 1 : mid], axis=1)
        hi = ad.gather(samples, order[:, mid : mid + 1], axis=1)
        picked = ad.mul(0.5, ad.add(lo, hi))
    shape = vals.shape[:1] + vals.shape[2:]
    return ad.reshape(picked, shape)


# ---------------------------------------------------------------------------
# public per-window losses
# ---------------------------------------------------------------------------


def mae_loss(dist: ForecastDistribution, target: np.ndarray) -> float:
    """Mean absolute error of the point forecast, averaged over all cells."""
    target = np.asarray(target, dtype=np.float64)
    point = dist.point if dist.point is not None else np.median(dist.samples, axis=0)
    if point.shape != target.shape:
        raise DataError("forecast and target shapes differ")
    return float(np.mean(np.abs(point - target)))


def nll_loss(dist: ForecastDistribution, target: np.ndarray, model: ssm_mod.ModelTheta) -> float:
    """Negative log marginal likelihood of the target under the sample mixture.

    Per horizon step: -log mean_j exp( sum_i log N(y_i; mean_ij, std_ij^2) ).
    """
    target = np.asarray(target, dtype=np.float64)
    n_p, q, _ = dist.state_particles.shape
    total = 0.0
    for k in range(q):
        mean, std = ssm_mod.measurement_moments(model, dist.state_particles[:, k, :])
        z = (target[k][None, :] - mean) / std
        ll = -0.5 * np.sum(z * z + _LOG_2PI, axis=1) - np.sum(np.log(std), axis=1)
        m = np.max(ll)
        total += float(m + np.log(np.mean(np.exp(ll - m))))
    return -total


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def gradients(
    model: ssm_mod.ModelTheta,
    batch: Sequence[Window] | BatchArrays,
    config: TrainConfig,
    graph: Optional[ssm_mod.Graph] = None,
    seed_key=None,
    ss_mask: Optional[np.ndarray] = None,
    frozen_trace: Optional[list] = None,
):
    """Loss and named parameter gradients for one minibatch.

    Flow coefficients are computed from parameter *values* and held
    constant; everything else (transitions, emissions, sampled feedback,
    the affine flow updates, the loss) is differentiated exactly.
    Returns (loss value, dict of gradients, coefficient trace).
    """
    if not isinstance(batch, BatchArrays):
        batch = stack_batch(batch, model, config.n_particles_train, seed_key if seed_key is not None else config.seed)
    params = {name: ad.Var(get_param(model, name)) for name in param_names(model)}
    loss, aux = batch_forward(
        params,
        model,
        batch,
        config,
        graph=graph,
        ss_mask=ss_mask,
        frozen_trace=frozen_trace,
        collect_trace=True,
    )
    ad.backward(loss)
    grads = {}
    for name, var in params.items():
        grads[name] = var.grad if var.grad is not None else np.zeros_like(var.value)
    return float(ad.val(loss)), grads, aux["trace"]


def batch_loss(
    model: ssm_mod.ModelTheta,
    batch: BatchArrays,
    config: TrainConfig,
    graph: Optional[ssm_mod.Graph] = None,
    values: Optional[Dict[str, np.ndarray]] = None,
    ss_mask: Optional[np.ndarray] = None,
    frozen_trace: Optional[list] = None,
) -> float:
    """Plain (un-taped) batch loss, optionally at replaced parameter values."""
    params = {name: (values[name] if values is not None else get_param(model, name)) for name in param_names(model)}
    loss, _ = batch_forward(params, model, batch, config, graph=graph, ss_mask=ss_mask, frozen_trace=frozen_trace)
    return float(ad.val(loss))


# ---------------------------------------------------------------------------
# optimizer and fit loop
# ---------------------------------------------------------------------------


class _Adam:
    def __init__(self, shapes: Dict[str, tuple], beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, values: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        correction = math.sqrt(1.0 - b2**self.t) / (1.0 - b1**self.t)
        for k in self.m:
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            values[k] = values[k] - lr * correction * self.m[k] / (np.sqrt(self.v[k]) + self.eps)
        return values


def clip_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> Dict[str, np.ndarray]:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        return {k: g * scale for k, g in grads.items()}
    return grads


def truth_probability(iteration: int, tau: float) -> float:
    """Scheduled-sampling probability of feeding ground truth to the decoder."""
    if tau <= 0:
        return 0.0
    exponent = min(iteration / tau, 700.0)
    return tau / (tau + math.exp(exponent))


def evaluate_loss(
    model: ssm_mod.ModelTheta,
    windows: Sequence[Window],
    config: TrainConfig,
    graph: Optional[ssm_mod.Graph] = None,
    n_particles: Optional[int] = None,
    seed_key=None,
    batch_size: int = 256,
) -> float:
    """Dataset loss without gradients (eval particle count, no teacher forcing)."""
    if not windows:
        raise DataError("no windows to evaluate")
    n_p = config.n_particles_eval if n_particles is None else n_particles
    seed_key = seed_key if seed_key is not None else (config.seed, 9)
    total = 0.0
    count = 0
    for lo in range(0, len(windows), batch_size):
        chunk = windows[lo : lo + batch_size]
        batch = stack_batch(chunk, model, n_p, seed_key)
        total += batch_loss(model, batch, config, graph=graph) * len(chunk)
        count += len(chunk)
    return total / count


def fit(dataset: TrainData, model_init: ssm_mod.ModelTheta, config: TrainConfig) -> TrainResult:
    """Minibatch Adam with milestone lr decay, clipping, early stopping.

    Returns the best-validation checkpoint.  A non-finite loss aborts and
    returns the last good checkpoint (flagged in the result and the log).
    """
    if not dataset.train_windows:
        raise DataError("the training split has no windows")
    if not dataset.val_windows:
        raise DataError("the validation split has no windows")
    rng = np.random.default_rng(np.random.SeedSequence((int(config.seed), 7)))
    values = {name: np.array(get_param(model_init, name)) for name in param_names(model_init)}
    trainable = [n for n in values if config.learn_rho_sigma or n not in ("rho", "sigma")]
    adam = _Adam({n: values[n].shape for n in trainable})
    model = model_with_params(model_init, values)
    graph = dataset.graph

    best_val = math.inf
    best_values = {k: v.copy() for k, v in values.items()}
    best_epoch = 0
    log: List[dict] = []
    iteration = 0
    stale = 0
    diverged = False
    stopped_early = False

    n_train = len(dataset.train_windows)
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        lr = config.lr * config.lr_factor ** sum(1 for m in config.milestones if m < epoch)
        order = rng.permutation(n_train)
        epoch_losses = []
        for lo in range(0, n_train, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            windows = [dataset.train_windows[i] for i in idx]
            q_steps = windows[0].y_future.shape[0]
            p_truth = truth_probability(iteration, config.scheduled_sampling_tau)
            ss_mask = None
            if q_steps > 1:
                ss_mask = rng.uniform(size=(len(windows), q_steps - 1)) < p_truth
            batch = stack_batch(windows, model, config.n_particles_train, (config.seed, 3, iteration))
            try:
                loss, grads, _ = gradients(model, batch, config, graph=graph, ss_mask=ss_mask)
            except NumericError:
                # A singular flow solve or non-finite intermediate means the
                # parameters have left the numerically stable region; treat it
                # like a non-finite loss and fall back to the best checkpoint.
                diverged = True
                break
            if not math.isfinite(loss):
                diverged = True
                break
            grads = clip_global_norm({n: grads[n] for n in trainable}, config.clip_norm)
            values = adam.step(values, grads, lr)
            model = model_with_params(model, values)
            epoch_losses.append(loss)
            iteration += 1
        if diverged:
            log.append(
                {"epoch": epoch, "train_loss": math.nan, "val_loss": math.nan, "lr": lr, "seconds": time.perf_counter() - t0, "note": "diverged"}
            )
            break
        val_loss = evaluate_loss(model, dataset.val_windows, config, graph=graph)
        seconds = time.perf_counter() - t0
        note = ""
        if math.isfinite(val_loss) and val_loss < best_val:
            best_val = val_loss
            best_values = {k: v.copy() for k, v in values.items()}
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
        if not math.isfinite(val_loss):
            diverged = True
            note = "diverged"
        log.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(epoch_losses)) if epoch_losses else math.nan,
                "val_loss": val_loss,
                "lr": lr,
                "seconds": seconds,
                "note": note,
            }
        )
        if diverged:
            break
        if stale >= config.patience:
            stopped_early = True
            break

    best_model = model_with_params(model_init, best_values)
    return TrainResult(
        model=best_model,
        log=log,
        best_epoch=best_epoch,
        best_val=best_val,
        stopped_early=stopped_early,
        diverged=diverged,
    )


def write_training_log(path, result: TrainResult) -> None:
    """CSV log: epoch, train_loss, val_loss, lr, seconds (+ end marker)."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "lr", "seconds"])
        for row in result.log:
            writer.writerow(
                [
                    row["epoch"],
                    repr(float(row["train_loss"])),
                    repr(float(row["val_loss"])),
                    repr(float(row["lr"])),
                    f"{row['seconds']:.3f}",
                ]
            )
        if result.stopped_early:
            fh.write(f"# early_stop best_epoch={result.best_epoch}\n")
        if result.diverged:
            fh.write(f"# diverged best_epoch={result.best_epoch}\n")
