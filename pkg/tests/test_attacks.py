import cvxpy as cp
import numpy as np
import pytest

from test_problem import central_diff, rel_err
from evdmao.attacks import (
    BatteryDamage,
    DualFull,
    DualPowerBalance,
    SmoothCharging,
    Stealthy,
    TimeTuning,
    activation_round_from_trace,
    attack_goals,
    attack_label,
    balance_weights,
    battery_damage_matrix,
    dual_full_gradient,
    dual_injection_full,
    goal_target_profile,
    power_balance_falsification,
    primal_injection,
    rush_charging_theta,
    time_tuning_matrix,
    validate_attack,
)
from evdmao.comms import RoundLog
from evdmao.datagen import toy_coupled_problem
from evdmao.exceptions import ConfigurationError
from evdmao.reference import reference_solve
from evdmao.spds import SpdsConfig, run


def test_reshape_matrices():
    np.testing.assert_array_equal(time_tuning_matrix([2, 3], 0.5, 9.0, T=4).diag, [9, 0.5, 0.5, 9])
    np.testing.assert_array_equal(battery_damage_matrix(2, 0.5, 9.0, T=5).diag, [9, 0.5, 9, 0.5, 9])
    for bad in (lambda: time_tuning_matrix([0], T=4), lambda: time_tuning_matrix([], T=4),
                lambda: battery_damage_matrix(1.5, T=4), lambda: time_tuning_matrix([1], 2.0, 1.0, T=4)):
        with pytest.raises(ConfigurationError):
            bad()


@pytest.mark.parametrize("spec", [SmoothCharging(0, 0.7), TimeTuning(0, (2, 3), 1.3, 0.2, 4.0),
                                  BatteryDamage((0,), 2.0, 2, 0.3, 3.0)])
def test_primal_injection_is_goal_gradient(spec):
    rng = np.random.default_rng(0)
    A = spec.reshape(6)
    for _ in range(20):
        c = rng.uniform(0, 1, 6)
        fd = central_diff(lambda x: spec.omega * A.value(x), c)
        assert rel_err(primal_injection(spec, c), fd) <= 1e-6
        assert rel_err(primal_injection(Stealthy(spec, 1e-3), c), fd) <= 1e-6


def test_dual_full_injection_reproduces_goal_gradient():
    prob = toy_coupled_problem(0.1, equality=True)
    goals = attack_goals(SmoothCharging(0, 1.5), prob)
    rng = np.random.default_rng(2)
    for _ in range(10):
        C = rng.uniform(0, 1, (prob.s, prob.T))
        lam = rng.normal(size=(prob.T, 1))
        # lam^T Phi(C, lam) = G(C) whenever lam != 0
        assert np.sum(lam * dual_injection_full(C, lam, goals)) == pytest.approx(1.5 * goals[0].value(C))
        fd = central_diff(lambda X: np.sum(lam * dual_injection_full(X, lam, goals)), C)
        assert rel_err(dual_full_gradient(C, lam, goals), fd) <= 1e-6
    assert not dual_injection_full(C, np.zeros_like(lam), goals).any()


def test_power_balance_term_is_victim_gradient():
    rng = np.random.default_rng(5)
    rho, cbar = np.array([0.4, 1.7]), rng.normal(size=5)
    for _ in range(10):
        V = rng.normal(size=(2, 5))
        fd = central_diff(lambda X: 0.3 * np.sum((cbar - rho @ X) ** 2), V)
        assert rel_err(power_balance_falsification(0.3, rho, cbar, V), fd) <= 1e-6


def test_balance_weights_follow_coupling_columns():
    prob = toy_coupled_problem(0.1, equality=True)
    np.testing.assert_allclose(balance_weights(prob, 0, [1, 2]), [0.2, 0.3])
    prob = toy_coupled_problem(0.1, equality=False)
    np.testing.assert_allclose(balance_weights(prob, 0, [2]), [0.3])


def test_goal_target_profile_matches_convex_solver():
    rng = np.random.default_rng(9)
    for _ in range(5):
        T = 8
        A = time_tuning_matrix([3, 4, 5], 0.2, 5.0, T=T)
        lo, up = np.zeros(T), rng.uniform(0.5, 1.0, T)
        a = rng.uniform(0.5, 1.5, T)
        b = 0.4 * a @ up
        x = cp.Variable(T)
        cp.Problem(cp.Minimize(cp.sum_squares(cp.multiply(A.diag, x))), [x >= lo, x <= up, a @ x == b]).solve()
        np.testing.assert_allclose(goal_target_profile(A, lo, up, a, b), x.value, atol=1e-6)


def test_rush_charging_prefix():
    assert rush_charging_theta(np.ones(6), 2.5) == (1, 2, 3)
    assert rush_charging_theta(np.ones(6), 3.0) == (1, 2, 3)
    assert rush_charging_theta(np.ones(6), 2.0, upper=[0, 1, 1, 1, 1, 1]) == (1, 2, 3)
    with pytest.raises(ConfigurationError):
        rush_charging_theta(np.ones(3), 4.0)


def test_validation():
    prob = toy_coupled_problem(0.1, equality=False)
    with pytest.raises(ConfigurationError):
        validate_attack(SmoothCharging(7, 1.0), prob)
    with pytest.raises(ConfigurationError):
        validate_attack(DualFull(0, SmoothCharging(0, 1.0)), prob)  # no equality row to falsify
    with pytest.raises(ConfigurationError):
        validate_attack(Stealthy(DualPowerBalance(0, (1,)), 1e-3), prob)
    with pytest.raises(ConfigurationError):
        SmoothCharging(0, -1.0)
    assert attack_label(BatteryDamage((1, 2), 1.0, 2)) == "battery_damage"
    assert attack_label(SmoothCharging(3, 1.0)) == "smooth_3"


def test_victims_must_share_the_attacker_bus(toy3bus_problem):
    prob = toy3bus_problem
    with pytest.raises(ConfigurationError, match="bus"):
        validate_attack(DualPowerBalance(prob.ids[0], (prob.ids[1],)), prob)
    validate_attack(DualPowerBalance(prob.ids[1], (prob.ids[2],)), prob)


@pytest.mark.parametrize("spec", [Stealthy(SmoothCharging(0, 1.0), 1e-3),
                                  Stealthy(TimeTuning(0, tuple(range(5, 12)), 1.0, 0.2, 5.0), 1e-3),
                                  DualPowerBalance(0, (1, 2), 1.0, eps_s=1e-3)])
def test_stealth_gate_replay(spec):
    prob = toy_coupled_problem(0.1, equality=True)
    res = run(prob, SpdsConfig(eps=1e-8), [spec])
    label = next(iter(res.trace.injection))
    inj = np.array(res.trace.injection[label])
    act = res.trace.activation[label]
    assert act == activation_round_from_trace(res.trace.residual, 1e-3)
    assert not inj[: act + 1].any() and inj[act + 1:].all()
    assert not any(res.trace.gate[label][: act + 1]) and all(res.trace.gate[label][act + 1:])


def test_dual_attacks_reproduce_primal_goal_on_equality_toy():
    prob = toy_coupled_problem(0.1, equality=True)
    cfg = SpdsConfig(eps=1e-9, max_iter=100_000)
    primal = run(prob, cfg, [SmoothCharging(0, 1.0)]).C
    full = run(prob, cfg, [DualFull(0, SmoothCharging(0, 1.0), 1.0)]).C
    bal = run(prob, cfg, [DualPowerBalance(0, (1, 2), 1.0, cbar="snapshot")]).C
    assert np.linalg.norm(full - primal) / np.linalg.norm(primal) <= 1e-5
    assert np.linalg.norm(bal - primal) / np.linalg.norm(primal) <= 1e-4


def test_toy_injection_is_balance_gradient_into_victims():
    # inequality toy c_1 + 0.2 c_2 + 0.3 c_3 <= b; victims 2 and 3 receive grad of 0.7 ||cbar - 0.2 c_2 - 0.3 c_3||^2
    prob = toy_coupled_problem(0.1, equality=False)
    cbar = np.linspace(0.3, 0.6, prob.T)
    res = run(prob, SpdsConfig(eps=1e-8, max_iter=30), [DualPowerBalance(0, (1, 2), 0.7, eps_s=np.inf, cbar=cbar)],
              log=RoundLog("messages", payloads=True))
    muts = res.log.mutations()
    assert muts and {m.recipient for m in muts} == {1, 2}
    for m in muts:
        reports = {r.sender: r.post_payload["c"] for r in res.log.for_round(m.round) if r.kind == "primal_report"}
        V = np.vstack([reports[1], reports[2]])
        fd = central_diff(lambda X: 0.7 * np.sum((cbar - 0.2 * X[0] - 0.3 * X[1]) ** 2), V)
        delta = m.post_payload["grad"] - m.pre_payload["grad"]
        np.testing.assert_allclose(delta, fd[m.recipient - 1], atol=1e-6)
    assert not any(m.recipient == 0 for m in muts)


def test_stealth_limits():
    prob = toy_coupled_problem(0.1, equality=True)
    cfg = SpdsConfig(eps=1e-8)
    free = run(prob, cfg)
    latched = run(prob, cfg, [Stealthy(SmoothCharging(0, 1.0), 0.0)])
    assert np.array_equal(free.C, latched.C) and free.trace.residual == latched.trace.residual
    eager = run(prob, cfg, [Stealthy(SmoothCharging(0, 1.0), np.inf)])
    inj = eager.trace.injection["stealthy_smooth_0"]
    assert eager.trace.activation["stealthy_smooth_0"] == 0 and inj[0] == 0 and all(inj[1:])


def test_smooth_attack_optimum_is_flat_on_toy():
    prob = toy_coupled_problem(0.1, equality=False)
    goals = attack_goals(SmoothCharging(0, 1e3), prob)
    C = reference_solve(prob.with_goals(goals)).C
    assert np.std(C[0]) / np.mean(C[0]) <= 1e-3
    free = reference_solve(prob).C
    assert np.std(free[0]) / np.mean(free[0]) > 0.1
