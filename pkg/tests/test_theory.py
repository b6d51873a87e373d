import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from exsgd.cluster import ClusterConfig, draw_batches, reduce_mean
from exsgd.objectives import TheoryConstants, initial_point, make_quadratic
from exsgd.optimizers import (HyperParams, effective_gamma_hat, init_state,
                              step_extrap_sgd, step_nesterov)
from exsgd.theory import (EXTRAP_NOISE, EXTRAP_SGD, NESTEROV, POST_LOCAL, SGD,
                          build_virtual_sequence, check_descent_identity,
                          check_proximity_inequalities, critical_batch_size,
                          epsilon_horizon, finish_report, rate_bound,
                          smoothness_estimate, stepsize_cap, tune_stepsize,
                          tuned_hyperparams)

# one shared problem scale for the closed-form oracles below
CONSTS = TheoryConstants(lipschitz_L=2.0, variance_sigma2=8.0, f_star=0.0,
                         r0=1.0, horizon_T=1000)
CLUSTER = ClusterConfig(workers_K=2, local_batch_B=4)      # KB = 8


# ---------------------------------------------------------------------------
# closed-form bounds, hand-computed oracles
# ---------------------------------------------------------------------------

def test_sgd_bound_hand_value():
    # 2 r0/(gamma T) + gamma L sigma^2/(KB) = 0.2 + 0.2
    rep = rate_bound(SGD, CONSTS, HyperParams(lr_gamma=0.1), CLUSTER, 100)
    assert_allclose(rep.bound_value, 0.4, rtol=1e-12)
    assert rep.stepsize_cap == 0.5
    assert rep.holds is None                   # nothing measured yet


def test_nesterov_bound_hand_value():
    # bracket = 0.5/10 + 0.1*2/(2*0.25) = 0.45; prefactor 1/(1 - 0.45)
    hp = HyperParams(lr_gamma=0.1, momentum_u=0.5)
    rep = rate_bound(NESTEROV, CONSTS, hp, CLUSTER, 100)
    assert_allclose(rep.bound_value, 0.45 / 0.55, rtol=1e-12)
    assert_allclose(rep.stepsize_cap, 2.0 * 0.25 / (2.0 * 1.125), rtol=1e-15)


def test_nesterov_bound_is_infinite_at_the_cap():
    cap = stepsize_cap(NESTEROV, CONSTS, 0.5)
    rep = rate_bound(NESTEROV, CONSTS,
                     HyperParams(lr_gamma=cap, momentum_u=0.5), CLUSTER, 100)
    assert math.isinf(rep.bound_value)


def test_extrap_bound_hand_value():
    # 0.25 + (4*0.02^2*4/4 + 0.04*2*2.5/(0.25*8)) * 8 = 0.25 + 0.8128
    hp = HyperParams(lr_gamma=0.04, momentum_u=0.5)    # gamma_hat -> 0.02
    rep = rate_bound(EXTRAP_SGD, CONSTS, hp, CLUSTER, 100)
    assert_allclose(rep.bound_value, 1.0628, rtol=1e-12)
    assert rep.constants_used["gamma_hat"] == 0.02
    assert rep.constants_used["b"] == 4


def test_noise_bound_hand_value():
    # 0.25 + 0.48 + (4 + 0.5/0.01) * 2*0.02^2*100*0.5 = 0.25 + 0.48 + 2.16
    hp = HyperParams(lr_gamma=0.04, inner_lr_gamma_hat=0.02, momentum_u=0.5)
    rep = rate_bound(EXTRAP_NOISE, CONSTS, hp, CLUSTER, 100, sigma_hat2=0.5)
    assert_allclose(rep.bound_value, 2.89, rtol=1e-12)


def test_bound_validity_caps_are_enforced():
    with pytest.raises(ValueError):
        rate_bound(SGD, CONSTS, HyperParams(lr_gamma=0.6), CLUSTER, 100)
    with pytest.raises(ValueError):
        rate_bound(SGD, CONSTS, HyperParams(lr_gamma=0.0), CLUSTER, 100)
    with pytest.raises(ValueError):
        rate_bound(SGD, CONSTS, HyperParams(lr_gamma=0.1), CLUSTER, 0)
    with pytest.raises(ValueError):     # gamma_hat above u^2 gamma/(1-u)^2
        rate_bound(EXTRAP_SGD, CONSTS,
                   HyperParams(lr_gamma=0.04, inner_lr_gamma_hat=0.05,
                               momentum_u=0.5), CLUSTER, 100)
    with pytest.raises(ValueError):     # noise variant is momentum-only
        rate_bound(EXTRAP_NOISE, CONSTS,
                   HyperParams(lr_gamma=0.04, inner_lr_gamma_hat=0.01),
                   CLUSTER, 100, sigma_hat2=0.5)
    with pytest.raises(ValueError):     # missing noise second moment
        rate_bound(EXTRAP_NOISE, CONSTS,
                   HyperParams(lr_gamma=0.04, inner_lr_gamma_hat=0.01,
                               momentum_u=0.5), CLUSTER, 100)
    with pytest.raises(ValueError):
        rate_bound("adam", CONSTS, HyperParams(lr_gamma=0.01), CLUSTER, 100)


def test_post_local_shares_the_extrap_bound():
    hp = HyperParams(lr_gamma=0.04, momentum_u=0.5)
    a = rate_bound(EXTRAP_SGD, CONSTS, hp, CLUSTER, 100)
    b = rate_bound(POST_LOCAL, CONSTS, hp, CLUSTER, 100)
    assert a.bound_value == b.bound_value


def test_finish_report_fills_measurements():
    rep = rate_bound(SGD, CONSTS, HyperParams(lr_gamma=0.1), CLUSTER, 100)
    finish_report(rep, [0.5, 0.3, 0.2])
    assert rep.measured_min_grad_norm2 == 0.2
    assert_allclose(rep.measured_avg_grad_norm2, 1.0 / 3.0, rtol=1e-15)
    assert rep.holds is True            # 1/3 <= 0.4
    rep2 = rate_bound(SGD, CONSTS, HyperParams(lr_gamma=0.1), CLUSTER, 100)
    finish_report(rep2, [0.5, 0.6])
    assert rep2.holds is False


# ---------------------------------------------------------------------------
# stepsize tuning and batch-size limits
# ---------------------------------------------------------------------------

def test_tuned_stepsize_two_case_rule():
    # statistics-dominated: candidate sqrt(2 r0 KB/(L sigma^2 T)) = 0.1 < cap
    got = tune_stepsize(SGD, CONSTS, CLUSTER, 100)
    assert_allclose(got, math.sqrt(2.0 * 8.0 / (2.0 * 8.0 * 100)), rtol=1e-15)
    # optimization-dominated: tiny horizon clips at the cap 1/L
    assert tune_stepsize(SGD, CONSTS, CLUSTER, 1) == 0.5
    noiseless = TheoryConstants(lipschitz_L=2.0, variance_sigma2=0.0,
                                f_star=0.0, r0=1.0)
    assert tune_stepsize(SGD, noiseless, CLUSTER, 100) == 0.5


def test_tuned_stepsize_momentum_variants():
    u = 0.5
    scale = 2.0 * 1.0 * 8.0 / (2.0 * 8.0 * 400)
    assert_allclose(tune_stepsize(NESTEROV, CONSTS, CLUSTER, 400, u),
                    math.sqrt(scale * 0.5 ** 3), rtol=1e-15)
    assert_allclose(
        tune_stepsize(EXTRAP_SGD, CONSTS, CLUSTER, 400, u),
        math.sqrt(scale * (0.125 + 1.5 + 1.0) * 0.5 ** 3 / 10.5), rtol=1e-15)
    assert_allclose(tune_stepsize(EXTRAP_NOISE, CONSTS, CLUSTER, 400, u),
                    math.sqrt(scale * 0.5 ** 3 / 1.5), rtol=1e-15)


def test_tuned_hyperparams_pick_admissible_gamma_hat():
    hp = tuned_hyperparams(EXTRAP_SGD, CONSTS, CLUSTER, 400, momentum_u=0.5)
    # u^2/(1-u)^2 = 1 at u = 0.5, so gamma/K = gamma/2 is the tighter cap
    assert hp.inner_lr_gamma_hat == hp.lr_gamma / 2.0
    assert tuned_hyperparams(EXTRAP_SGD, CONSTS, CLUSTER, 400).inner_lr_gamma_hat == 0.0
    assert tuned_hyperparams(NESTEROV, CONSTS, CLUSTER, 400, 0.5).inner_lr_gamma_hat is None
    # the tuned pair must evaluate without tripping the validity caps
    rate_bound(EXTRAP_SGD, CONSTS, hp, CLUSTER, 400)


def test_critical_batch_size_hand_values():
    # base = sigma^2 T/(L r0) = 8 * 1000 / 2 = 4000
    assert_allclose(critical_batch_size(SGD, CONSTS), 4000.0, rtol=1e-12)
    assert_allclose(critical_batch_size(NESTEROV, CONSTS, 0.5),
                    4000.0 * 0.5 / 1.125 ** 2, rtol=1e-12)
    assert_allclose(critical_batch_size(EXTRAP_SGD, CONSTS, 0.5),
                    4000.0 * 10.5 * 0.5 / 2.625 ** 3, rtol=1e-12)
    no_horizon = TheoryConstants(lipschitz_L=2.0, variance_sigma2=8.0,
                                 f_star=0.0, r0=1.0)
    with pytest.raises(ValueError):
        critical_batch_size(SGD, no_horizon)


def test_epsilon_horizon_boundary():
    # tuned sgd bound is 4/sqrt(T) here, so eps = 0.1 needs T ~ 1600
    t_star = epsilon_horizon(SGD, CONSTS, CLUSTER, 0.1)
    assert abs(t_star - 1600) <= 1

    def bound_at(T):
        hp = tuned_hyperparams(SGD, CONSTS, CLUSTER, T)
        return rate_bound(SGD, CONSTS, hp, CLUSTER, T).bound_value

    assert bound_at(t_star) <= 0.1 < bound_at(t_star - 1)
    with pytest.raises(ValueError):
        epsilon_horizon(SGD, CONSTS, CLUSTER, 0.0)


def test_epsilon_horizon_scaling_with_batch():
    # below the critical batch size the tuned bound is ~1/sqrt(KB T), so
    # quadrupling KB at fixed eps divides the horizon by four
    small = epsilon_horizon(SGD, CONSTS, ClusterConfig(workers_K=1, local_batch_B=4), 0.25)
    big = epsilon_horizon(SGD, CONSTS, ClusterConfig(workers_K=4, local_batch_B=4), 0.25)
    assert small == pytest.approx(4 * big, rel=0.01)


# ---------------------------------------------------------------------------
# virtual sequence and proximity checks
# ---------------------------------------------------------------------------

def _record_sync_run(step_fn, obj, hp, cfg, steps, gamma_hat):
    """Run a synchronized optimizer and assemble the trajectory arrays."""
    st = init_state(initial_point(obj), cfg.workers_K)
    xs, vs, halves, gs, xis, dev2 = [], [], [], [], [], []
    for t in range(steps):
        xs.append(st.x.values.copy())
        vs.append(st.v.copy())
        step_fn(st, obj, draw_batches(cfg, obj, t), hp)
        info = st.last_info
        halves.append(info["x_half_bar"])
        gs.append(info["g_bar"])
        xis.append(info["xi_bar"])
        dev2.append(info["worker_dev2"])
    xs.append(st.x.values.copy())
    vs.append(st.v.copy())
    # terminal lookahead from stored state only: no fresh gradient needed
    xi_term = reduce_mean(st.past_grad) if gamma_hat != 0.0 else np.zeros_like(st.v)
    xis.append(xi_term)
    halves.append(st.x.values - gamma_hat * xi_term + hp.momentum_u * st.v)
    vseq = build_virtual_sequence(np.stack(xs), np.stack(vs), np.stack(halves),
                                  np.stack(gs), np.stack(xis), hp.lr_gamma,
                                  gamma_hat, hp.momentum_u)
    return vseq, dev2


def test_descent_identity_nesterov_roundoff_only():
    obj = make_quadratic(4, 32, generator_seed=1, diag=[0.5, 1.0, 2.0, 4.0])
    cfg = ClusterConfig(workers_K=2, local_batch_B=4, master_seed=3)
    hp = HyperParams(lr_gamma=0.1, momentum_u=0.8)
    vseq, _ = _record_sync_run(step_nesterov, obj, hp, cfg, 200, gamma_hat=0.0)
    resid = check_descent_identity(vseq)
    assert resid.shape == (200,)
    assert resid.max() < 1e-12


def test_descent_identity_extrap_roundoff_only():
    obj = make_quadratic(4, 32, generator_seed=2)
    cfg = ClusterConfig(workers_K=2, local_batch_B=4, master_seed=4)
    hp = HyperParams(lr_gamma=0.1, momentum_u=0.6)
    ghat = effective_gamma_hat(hp, 2)
    vseq, _ = _record_sync_run(step_extrap_sgd, obj, hp, cfg, 200, gamma_hat=ghat)
    assert check_descent_identity(vseq).max() < 1e-12


def test_descent_identity_flags_corrupted_trajectory():
    obj = make_quadratic(3, 16, generator_seed=5)
    cfg = ClusterConfig(workers_K=1, local_batch_B=4, master_seed=5)
    hp = HyperParams(lr_gamma=0.1, momentum_u=0.5)
    vseq, _ = _record_sync_run(step_nesterov, obj, hp, cfg, 50, gamma_hat=0.0)
    bad = build_virtual_sequence(vseq.x, vseq.v, vseq.x_bar_half,
                                 vseq.g_bar_half + 0.01, vseq.xi_bar,
                                 vseq.gamma, vseq.gamma_hat, vseq.momentum_u)
    assert check_descent_identity(bad).max() > 1e-4


def test_proximity_inequalities_hold_on_recorded_run():
    obj = make_quadratic(4, 64, generator_seed=6, shift_spread=2.0)
    cfg = ClusterConfig(workers_K=4, local_batch_B=8, master_seed=6)
    hp = HyperParams(lr_gamma=0.05, momentum_u=0.7)
    ghat = effective_gamma_hat(hp, 4)
    assert ghat <= 0.7 ** 2 * 0.05 / 0.3 ** 2        # precondition by design
    vseq, dev2 = _record_sync_run(step_extrap_sgd, obj, hp, cfg, 300, gamma_hat=ghat)
    checks = check_proximity_inequalities(
        vseq, worker_dev2=dev2, sigma2=64.0, extrap_batch_b=8,
        uses_past_gradients=True)
    assert checks["momentum_energy"]["holds"] is True
    assert checks["lookahead_proximity"]["holds"] is True
    assert checks["worker_deviation"]["holds"] is True


def test_proximity_missing_inputs_are_reported_not_guessed():
    obj = make_quadratic(2, 16, generator_seed=7)
    cfg = ClusterConfig(workers_K=2, local_batch_B=4, master_seed=7)
    hp = HyperParams(lr_gamma=0.05, momentum_u=0.5)
    vseq, dev2 = _record_sync_run(step_extrap_sgd, obj, hp, cfg, 20,
                                  gamma_hat=effective_gamma_hat(hp, 2))
    checks = check_proximity_inequalities(vseq, worker_dev2=dev2, sigma2=None,
                                          extrap_batch_b=4)
    assert checks["worker_deviation"]["holds"] is None
    assert checks["worker_deviation"]["precondition_ok"] is False
    no_dev = check_proximity_inequalities(vseq)
    assert "worker_deviation" not in no_dev


def test_worker_deviation_iid_branch_uses_noise_moment():
    obj = make_quadratic(2, 16, generator_seed=8)
    cfg = ClusterConfig(workers_K=2, local_batch_B=4, master_seed=8)
    hp = HyperParams(lr_gamma=0.05, inner_lr_gamma_hat=0.02, momentum_u=0.5)
    vseq, _ = _record_sync_run(step_extrap_sgd, obj, hp, cfg, 20, gamma_hat=0.02)
    checks = check_proximity_inequalities(
        vseq, worker_dev2=[1e-3] * 20, sigma_hat2=0.5, uses_past_gradients=False)
    rhs = 2.0 * 0.02 ** 2 * 0.5
    assert_allclose(checks["worker_deviation"]["rhs"], rhs, rtol=1e-15)
    assert checks["worker_deviation"]["holds"] is False      # 1e-3 > 4e-4


def test_virtual_sequence_shape_validation():
    with pytest.raises(ValueError):
        build_virtual_sequence(np.zeros((3, 2)), np.zeros((4, 2)),
                               np.zeros((4, 2)), np.zeros((3, 2)),
                               np.zeros((4, 2)), 0.1, 0.0, 0.5)


def test_virtual_sequence_reduces_to_iterates_without_momentum():
    obj = make_quadratic(3, 16, generator_seed=9)
    cfg = ClusterConfig(workers_K=1, local_batch_B=4, master_seed=9)
    hp = HyperParams(lr_gamma=0.1, momentum_u=0.0)
    vseq, _ = _record_sync_run(step_nesterov, obj, hp, cfg, 10, gamma_hat=0.0)
    assert_array_equal(vseq.y_bar[1:], vseq.x_bar_half[1:])
    assert_array_equal(vseq.y_bar[0], vseq.x[0])


# ---------------------------------------------------------------------------
# smoothness probing
# ---------------------------------------------------------------------------

def test_smoothness_along_eigendirections():
    obj = make_quadratic(2, 2, diag=[1.0, 4.0], shifts=[[0.0, 0.0], [0.0, 0.0]])
    x = np.zeros(2)
    assert smoothness_estimate(obj, x, np.array([0.0, 1.0])) == 4.0
    assert smoothness_estimate(obj, x, np.array([1.0, 0.0])) == 1.0
    mixed = smoothness_estimate(obj, x, np.array([1.0, 1.0]))
    assert 1.0 < mixed < 4.0


def test_smoothness_handles_zero_update():
    obj = make_quadratic(2, 2, diag=[1.0, 4.0])
    assert smoothness_estimate(obj, np.zeros(2), np.zeros(2)) == 0.0
