"""
Update rules for the simulated cluster.

All methods share the same skeleton per step t:

    lookahead point(s)  ->  per-worker batch gradients  ->  fixed-order
    reduction  ->  buffer/parameter update

- sgd:          x <- x - gamma * g(x)
- nesterov:     x_half = x + u v;  v <- u v - gamma g(x_half);  x <- x + v
- extrap_sgd:   per worker, x_quarter^k = x - gamma_hat * past_grad[k], then
                the nesterov lines evaluated at x_half^k = x_quarter^k + u v.
                past_grad[k] is the batch-mean gradient the worker computed at
                its previous half point (stored, never recomputed), so the
                extrapolation costs no extra gradient evaluations.  The
                extrapolation is skipped at t = 0 (past_grad = 0).
- extrap_noise: extrapolation direction replaced by a noise draw zeta^k
                (isotropic gaussian/uniform, optionally filter-scaled;
                a shared draw; or centered past stochastic gradients).
- adam /        moment-based updates without bias correction; extrap_adam
  extrap_adam:  extrapolates per worker through the stored moments and past
                gradient before the shared moment update.
- post_local:   synchronized extrap_sgd until step t0, then per-worker local
                extrap updates with model averaging every H steps.

Weight decay (when nonzero) enters as +lambda*x at every gradient evaluation,
identically across methods.  LARS (when trust > 0) rescales each block of the
reduced gradient before the main update.

Step functions mutate `state` in place and return it; per-step quantities
needed by the theory checks (mean half point, reduced gradient, mean
extrapolation direction, worker deviation) are left in `state.last_info`.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .cluster import map_workers, reduce_mean
from .objectives import ParamVector, batch_gradient

NOISE_NONE = "none"
ISO_GAUSSIAN = "isotropic_gaussian"
ISO_UNIFORM = "isotropic_uniform"
SMOOTHOUT_SHARED = "smoothout_shared"
ANISO_STOCHASTIC = "anisotropic_stochastic"
NOISE_KINDS = (NOISE_NONE, ISO_GAUSSIAN, ISO_UNIFORM, SMOOTHOUT_SHARED, ANISO_STOCHASTIC)

CONSTANT = "constant"
WARMUP_CONSTANT = "warmup_constant"
WARMUP_STEP_DECAY = "warmup_step_decay"
INVERSE_SQRT = "inverse_sqrt"
SCHEDULE_KINDS = (CONSTANT, WARMUP_CONSTANT, WARMUP_STEP_DECAY, INVERSE_SQRT)


class NumericAbort(RuntimeError):
    """A gradient or iterate went non-finite; the run stops with a record."""

    def __init__(self, step, detail):
        super().__init__(f"non-finite value at step {step}: {detail}")
        self.step = step
        self.detail = detail


@dataclass
class HyperParams:
    lr_gamma: float = 0.1
    inner_lr_gamma_hat: float = None   # None -> gamma / K at use time
    momentum_u: float = 0.0
    lars_trust: float = 0.0            # 0 disables LARS
    weight_decay: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    extrap_denominator_sqrt: bool = False   # literal update has no sqrt there
    reset_local_momentum: bool = False      # post-local: zero v^k at t0 instead of copying v

    def validate(self):
        # 0 is allowed as the degenerate no-op stepsize (x provably unchanged)
        if self.lr_gamma < 0:
            raise ValueError("lr_gamma must be >= 0")
        if self.inner_lr_gamma_hat is not None and self.inner_lr_gamma_hat < 0:
            raise ValueError("inner_lr_gamma_hat must be >= 0")
        if not 0.0 <= self.momentum_u < 1.0:
            raise ValueError("momentum_u must lie in [0, 1)")
        if self.lars_trust < 0:
            raise ValueError("lars_trust must be >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0.0 <= self.adam_beta1 < 1.0:
            raise ValueError("adam_beta1 must lie in [0, 1)")
        if not 0.0 <= self.adam_beta2 < 1.0:
            raise ValueError("adam_beta2 must lie in [0, 1)")
        if not self.adam_eps > 0:
            raise ValueError("adam_eps must be > 0")
        return self


def effective_gamma_hat(hp, workers_K):
    """gamma_hat, defaulting to gamma / K when unset."""
    if hp.inner_lr_gamma_hat is None:
        return hp.lr_gamma / workers_K
    return hp.inner_lr_gamma_hat


@dataclass
class NoiseSpec:
    kind: str = NOISE_NONE
    filter_scaled: bool = False
    raw_scale: float = 1.0
    noise_sigma_hat2: float = 0.0   # 0 -> derived by noise_second_moment

    def validate(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.raw_scale < 0:
            raise ValueError("raw_scale must be >= 0")
        if self.filter_scaled and self.kind == ANISO_STOCHASTIC:
            raise ValueError("filter_scaled applies to isotropic/shared noise only")
        return self


def noise_second_moment(noise, x):
    """E||zeta^k||^2 for the IID kinds (the sigma_hat^2 of the theory).

    Returns the configured value if set; otherwise derives it from the raw
    distribution (d s^2 gaussian, d s^2/3 uniform).  Filter-scaled noise has
    ||zeta_block|| == ||x_block||, so its second moment tracks the iterate
    and is not a constant: None unless configured explicitly.  Anisotropic
    past-gradient noise is not IID: also None.
    """
    if noise.noise_sigma_hat2 > 0:
        return noise.noise_sigma_hat2
    if noise.kind == ANISO_STOCHASTIC or noise.filter_scaled:
        return None
    d = x.dim
    if noise.kind == ISO_GAUSSIAN:
        return d * noise.raw_scale ** 2
    return d * noise.raw_scale ** 2 / 3.0   # uniform half-width raw_scale


@dataclass
class Schedule:
    kind: str = CONSTANT
    base_lr: float = 0.1           # small-batch gamma
    scale_factor: float = 1.0      # K for linear scaling
    warmup_epochs: int = 5
    decay_milestones: tuple = (0.5, 0.75)   # fractions of total training samples
    decay_factor: float = 10.0
    warmup_steps_inverse_sqrt: int = 1000
    total_steps: int = 0           # filled by the harness when 0

    def validate(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not self.base_lr > 0:
            raise ValueError("base_lr must be > 0")
        ms = tuple(self.decay_milestones)
        if any(not 0 < m < 1 for m in ms) or list(ms) != sorted(set(ms)):
            raise ValueError("decay_milestones must be strictly increasing in (0, 1)")
        return self


@dataclass
class PostLocalConfig:
    transition_step_t0: int = 0
    local_steps_H: int = 1

    def validate(self):
        if self.transition_step_t0 < 0:
            raise ValueError("transition_step_t0 must be >= 0")
        if self.local_steps_H < 1:
            raise ValueError("local_steps_H must be >= 1")
        return self


@dataclass
class OptimizerState:
    x: ParamVector
    v: np.ndarray                 # momentum buffer v_t
    past_grad: list               # K stored local batch-mean gradients
    adam_m: np.ndarray
    adam_v: np.ndarray
    local_x: list = None          # post-local phase only
    local_v: list = None
    step_t: int = 0
    last_info: dict = field(default_factory=dict, repr=False)


def init_state(x0, workers_K):
    d = x0.dim
    return OptimizerState(
        x=x0.copy(), v=np.zeros(d),
        past_grad=[np.zeros(d) for _ in range(workers_K)],
        adam_m=np.zeros(d), adam_v=np.zeros(d),
    )


# ---------------------------------------------------------------------------
# shared pieces
# ---------------------------------------------------------------------------

def _batch_grad(obj, values, indices, hp):
    g = batch_gradient(obj, values, indices)
    if hp.weight_decay != 0.0:
        g = g + hp.weight_decay * values
    return g


def lars_scale(grad_block, x_block, hp):
    """Trust-ratio rescaling of one gradient block; direction unchanged.

    scale = trust * ||x_j|| / (||g_j|| + lambda ||x_j||); zero-weight or
    zero-denominator blocks get scale 0 (block update suppressed).
    """
    x_norm = float(np.linalg.norm(x_block))
    denom = float(np.linalg.norm(grad_block)) + hp.weight_decay * x_norm
    if x_norm == 0.0 or denom == 0.0:
        return np.zeros_like(grad_block)
    return (hp.lars_trust * x_norm / denom) * grad_block


def apply_lars(grad, x_values, partition, hp):
    out = np.empty_like(grad)
    for start, stop in partition:
        out[start:stop] = lars_scale(grad[start:stop], x_values[start:stop], hp)
    return out


def _check_finite(step, name, *arrays):
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise NumericAbort(step, name)


def _momentum_update(v, u, gamma, g):
    # u == 0 skips the no-op multiply so sgd/nesterov iterates agree bitwise
    if u != 0.0:
        return u * v - gamma * g
    return -(gamma * g)


def _worker_dev2(halves):
    if len(halves) == 1:
        return 0.0
    stack = np.stack(halves)
    dev = stack - reduce_mean(halves)
    return float(np.mean(np.sum(dev * dev, axis=1)))


# ---------------------------------------------------------------------------
# step functions
# ---------------------------------------------------------------------------

def step_minibatch_sgd(state, obj, batches, hp, threads=1):
    """Plain mini-batch SGD: x <- x - gamma * mean_k mean_i grad f_i(x)."""
    x = state.x.values
    grads = map_workers(lambda bt: _batch_grad(obj, x, bt.indices, hp), batches, threads)
    g = reduce_mean(grads)
    _check_finite(state.step_t, "reduced gradient", g)
    g_used = apply_lars(g, x, state.x.partition, hp) if hp.lars_trust > 0 else g
    x_new = x - hp.lr_gamma * g_used
    _check_finite(state.step_t, "iterate", x_new)
    state.x.values = x_new
    state.step_t += 1
    state.last_info = {
        "x_half_bar": x.copy(), "g_bar": g, "xi_bar": np.zeros_like(g),
        "worker_dev2": 0.0, "worker_dispersion": 0.0, "eval_point": "x_t",
    }
    return state


def step_nesterov(state, obj, batches, hp, threads=1):
    """Three-line Nesterov recurrence, gradient at the shared lookahead."""
    x, v, u = state.x.values, state.v, hp.momentum_u
    x_half = x + u * v if u != 0.0 else x
    grads = map_workers(lambda bt: _batch_grad(obj, x_half, bt.indices, hp), batches, threads)
    g = reduce_mean(grads)
    _check_finite(state.step_t, "reduced gradient", g)
    g_used = apply_lars(g, x, state.x.partition, hp) if hp.lars_trust > 0 else g
    v_new = _momentum_update(v, u, hp.lr_gamma, g_used)
    x_new = x + v_new
    _check_finite(state.step_t, "iterate", x_new)
    state.v = v_new
    state.x.values = x_new
    state.step_t += 1
    state.last_info = {
        "x_half_bar": x_half.copy(), "g_bar": g, "xi_bar": np.zeros_like(g),
        "worker_dev2": 0.0, "worker_dispersion": 0.0, "eval_point": "x_half",
    }
    return state


def _extrap_core(state, obj, batches, hp, directions, threads, extrap_b):
    """Common body of the extrapolated variants.

    `directions` is the list of per-worker extrapolation directions (already
    zero/None when extrapolation is skipped).  Stores fresh past gradients.
    """
    x, v, u = state.x.values, state.v, hp.momentum_u
    n_workers = len(batches)
    ghat = effective_gamma_hat(hp, n_workers)
    if directions is None:
        quarters = [x] * n_workers
    else:
        quarters = [x - ghat * z for z in directions]
    if u != 0.0:
        momentum_term = u * v
        halves = [q + momentum_term for q in quarters]
    else:
        halves = quarters
    grads = map_workers(
        lambda k: _batch_grad(obj, halves[k], batches[k].indices, hp),
        range(n_workers), threads)
    g = reduce_mean(grads)
    _check_finite(state.step_t, "reduced gradient", g)
    g_used = apply_lars(g, x, state.x.partition, hp) if hp.lars_trust > 0 else g
    v_new = _momentum_update(v, u, hp.lr_gamma, g_used)
    x_new = x + v_new
    _check_finite(state.step_t, "iterate", x_new)

    b = extrap_b if extrap_b is not None else batches[0].indices.size
    if b == batches[0].indices.size:
        new_past = list(grads)   # reuse: extrapolation stays evaluation-free
    else:
        new_past = [
            _batch_grad(obj, halves[k], batches[k].indices[:b], hp)
            for k in range(n_workers)
        ]
    xi_bar = reduce_mean(directions) if directions is not None else np.zeros_like(g)
    state.v = v_new
    state.x.values = x_new
    state.past_grad = new_past
    state.step_t += 1
    state.last_info = {
        "x_half_bar": reduce_mean(halves), "g_bar": g, "xi_bar": xi_bar,
        "worker_dev2": _worker_dev2(halves), "worker_dispersion": 0.0,
        "eval_point": "x_half_bar",
    }
    return state


def step_extrap_sgd(state, obj, batches, hp, threads=1, extrap_b=None):
    """Gradient extrapolation from the stored past local batch gradients."""
    ghat = effective_gamma_hat(hp, len(batches))
    if ghat != 0.0 and state.step_t > 0:
        directions = state.past_grad
    else:
        directions = None   # skipped at t=0 or with gamma_hat = 0
    return _extrap_core(state, obj, batches, hp, directions, threads, extrap_b)


def step_extrapolated_noise(state, obj, batches, hp, noise, rng, threads=1, extrap_b=None):
    """Extrapolation along a noise direction zeta^k instead of past gradients."""
    noise.validate()
    if noise.kind == NOISE_NONE:
        raise ValueError("noise.kind must not be 'none' for step_extrapolated_noise")
    ghat = effective_gamma_hat(hp, len(batches))
    if ghat != 0.0 and state.step_t > 0:
        directions = draw_noise_directions(noise, state, rng, len(batches))
    else:
        directions = None
    return _extrap_core(state, obj, batches, hp, directions, threads, extrap_b)


def draw_noise_directions(noise, state, rng, n_workers):
    """The K extrapolation directions for one step, drawn in ascending worker
    order (the shared kind draws once)."""
    d = state.x.dim
    if noise.kind == ANISO_STOCHASTIC:
        center = reduce_mean(state.past_grad)
        return [pg - center for pg in state.past_grad]
    if noise.kind == SMOOTHOUT_SHARED:
        shared = rng.uniform(-noise.raw_scale, noise.raw_scale, d)
        raw = [shared] * n_workers
    elif noise.kind == ISO_GAUSSIAN:
        raw = [noise.raw_scale * rng.standard_normal(d) for _ in range(n_workers)]
    else:  # ISO_UNIFORM
        raw = [rng.uniform(-noise.raw_scale, noise.raw_scale, d) for _ in range(n_workers)]
    if not noise.filter_scaled:
        return raw
    return [_filter_scale(z, state.x) for z in raw]


def _filter_scale(zeta, x):
    """Per block: ||x_block|| * zeta_block / ||zeta_block||; zero-norm blocks
    (either side) produce zero noise for that block."""
    out = np.zeros_like(zeta)
    for start, stop in x.partition:
        x_norm = np.linalg.norm(x.values[start:stop])
        z_norm = np.linalg.norm(zeta[start:stop])
        if x_norm > 0.0 and z_norm > 0.0:
            out[start:stop] = (x_norm / z_norm) * zeta[start:stop]
    return out


def step_adam(state, obj, batches, hp, threads=1):
    """Reference Adam without bias correction (the gamma_hat = 0 baseline)."""
    x = state.x.values
    grads = map_workers(lambda bt: _batch_grad(obj, x, bt.indices, hp), batches, threads)
    g = reduce_mean(grads)
    _check_finite(state.step_t, "reduced gradient", g)
    g_used = apply_lars(g, x, state.x.partition, hp) if hp.lars_trust > 0 else g
    m_new = hp.adam_beta1 * state.adam_m + (1.0 - hp.adam_beta1) * g_used
    v_new = hp.adam_beta2 * state.adam_v + (1.0 - hp.adam_beta2) * g_used * g_used
    x_new = x - hp.lr_gamma * m_new / (np.sqrt(v_new) + hp.adam_eps)
    _check_finite(state.step_t, "iterate", x_new)
    state.adam_m, state.adam_v = m_new, v_new
    state.x.values = x_new
    state.step_t += 1
    state.last_info = {
        "x_half_bar": x.copy(), "g_bar": g, "xi_bar": np.zeros_like(g),
        "worker_dev2": 0.0, "worker_dispersion": 0.0, "eval_point": "x_t",
    }
    return state


def step_extrap_adam(state, obj, batches, hp, threads=1, extrap_b=None):
    """Adam with a per-worker moment-preconditioned extrapolation step.

    The extrapolation denominator is beta2*v + (1-beta2)*g_past^2 + eps,
    literally without a square root; set hp.extrap_denominator_sqrt for the
    sqrt variant.  Moments are shared, updated from the reduced gradient,
    without bias correction.  Extrapolation is skipped at t = 0.
    """
    x = state.x.values
    n_workers = len(batches)
    ghat = effective_gamma_hat(hp, n_workers)
    if ghat != 0.0 and state.step_t > 0:
        halves = []
        for pg in state.past_grad:
            num = hp.adam_beta1 * state.adam_m + (1.0 - hp.adam_beta1) * pg
            den = hp.adam_beta2 * state.adam_v + (1.0 - hp.adam_beta2) * pg * pg + hp.adam_eps
            if hp.extrap_denominator_sqrt:
                den = np.sqrt(den)
            halves.append(x - ghat * num / den)
    else:
        halves = [x] * n_workers
    grads = map_workers(
        lambda k: _batch_grad(obj, halves[k], batches[k].indices, hp),
        range(n_workers), threads)
    g = reduce_mean(grads)
    _check_finite(state.step_t, "reduced gradient", g)
    g_used = apply_lars(g, x, state.x.partition, hp) if hp.lars_trust > 0 else g
    m_new = hp.adam_beta1 * state.adam_m + (1.0 - hp.adam_beta1) * g_used
    v_new = hp.adam_beta2 * state.adam_v + (1.0 - hp.adam_beta2) * g_used * g_used
    x_new = x - hp.lr_gamma * m_new / (np.sqrt(v_new) + hp.adam_eps)
    _check_finite(state.step_t, "iterate", x_new)

    b = extrap_b if extrap_b is not None else batches[0].indices.size
    if b == batches[0].indices.size:
        new_past = list(grads)
    else:
        new_past = [
            _batch_grad(obj, halves[k], batches[k].indices[:b], hp)
            for k in range(n_workers)
        ]
    state.adam_m, state.adam_v = m_new, v_new
    state.x.values = x_new
    state.past_grad = new_past
    state.step_t += 1
    state.last_info = {
        "x_half_bar": reduce_mean(halves), "g_bar": g, "xi_bar": np.zeros_like(g),
        "worker_dev2": _worker_dev2(halves), "worker_dispersion": 0.0,
        "eval_point": "x_half_bar",
    }
    return state


def step_post_local(state, obj, batches, hp, plc, threads=1, extrap_b=None):
    """Synchronized extrap_sgd until t0, then local updates with averaging.

    For t > t0 each worker runs the extrap update on its own (x^k, v^k) with
    local gradients only; whenever t mod H == 0, the post-update x^k are all
    replaced by their mean (momentum buffers stay local).  At the transition
    the workers inherit the global momentum buffer (or zeros when
    hp.reset_local_momentum is set).
    """
    plc.validate()
    t = state.step_t
    if t <= plc.transition_step_t0:
        return step_extrap_sgd(state, obj, batches, hp, threads=threads, extrap_b=extrap_b)

    n_workers = len(batches)
    if state.local_x is None:
        state.local_x = [state.x.values.copy() for _ in range(n_workers)]
        if hp.reset_local_momentum:
            state.local_v = [np.zeros_like(state.v) for _ in range(n_workers)]
        else:
            state.local_v = [state.v.copy() for _ in range(n_workers)]

    u = hp.momentum_u
    ghat = effective_gamma_hat(hp, n_workers)
    halves = []
    for k in range(n_workers):
        xk = state.local_x[k]
        quarter = xk - ghat * state.past_grad[k] if ghat != 0.0 else xk
        halves.append(quarter + u * state.local_v[k] if u != 0.0 else quarter)
    grads = map_workers(
        lambda k: _batch_grad(obj, halves[k], batches[k].indices, hp),
        range(n_workers), threads)
    _check_finite(t, "local gradients", *grads)

    b = extrap_b if extrap_b is not None else batches[0].indices.size
    for k in range(n_workers):
        gk = grads[k]
        if hp.lars_trust > 0:
            gk = apply_lars(gk, state.local_x[k], state.x.partition, hp)
        vk = _momentum_update(state.local_v[k], u, hp.lr_gamma, gk)
        state.local_v[k] = vk
        state.local_x[k] = state.local_x[k] + vk
        if b == batches[k].indices.size:
            state.past_grad[k] = grads[k]
        else:
            state.past_grad[k] = _batch_grad(obj, halves[k], batches[k].indices[:b], hp)

    if t % plc.local_steps_H == 0:
        mean_x = reduce_mean(state.local_x)
        state.local_x = [mean_x.copy() for _ in range(n_workers)]
    else:
        mean_x = reduce_mean(state.local_x)
    _check_finite(t, "iterate", mean_x)
    dispersion = max(
        float(np.linalg.norm(xk - mean_x)) for xk in state.local_x)
    state.x.values = mean_x
    state.step_t += 1
    state.last_info = {
        "x_half_bar": reduce_mean(halves), "g_bar": reduce_mean(grads),
        "xi_bar": np.zeros_like(mean_x), "worker_dev2": _worker_dev2(halves),
        "worker_dispersion": dispersion, "eval_point": "x_half_bar",
    }
    return state


# ---------------------------------------------------------------------------
# learning-rate schedules
# ---------------------------------------------------------------------------

def warmup_increment(sched, cluster, obj):
    """Per-iteration lr increment (K gamma - gamma) / (H_w N / (KB))."""
    peak = sched.base_lr * sched.scale_factor
    steps = sched.warmup_epochs * obj.sample_count / (cluster.workers_K * cluster.local_batch_B)
    if steps <= 0:
        return 0.0
    return (peak - sched.base_lr) / steps


def lr_at(sched, t, cluster, obj):
    """Learning rate at step t under `sched`."""
    if t < 0:
        raise ValueError("step t must be >= 0")
    sched.validate()
    peak = sched.base_lr * sched.scale_factor
    if sched.kind == CONSTANT:
        return peak
    if sched.kind == INVERSE_SQRT:
        w = max(1, sched.warmup_steps_inverse_sqrt)
        step = t + 1
        return peak * min(step / w, math.sqrt(w / step))
    lr = min(sched.base_lr + t * warmup_increment(sched, cluster, obj), peak)
    if sched.kind == WARMUP_STEP_DECAY and sched.total_steps > 0:
        passed = sum(1 for m in sched.decay_milestones if t >= m * sched.total_steps)
        lr = lr / sched.decay_factor ** passed
    return lr
