import numpy as np
import pytest

from conftest import random_problem
from evdmao.exceptions import ConfigurationError
from evdmao.problem import (
    QuadraticGoal,
    ValleyFillingProblem,
    hessian_norm_estimate,
    lagrangian_grad_dual,
    lagrangian_grad_primal,
    strong_convexity_modulus,
)


def central_diff(f, X, h=1e-6):
    G = np.zeros_like(X)
    for idx in np.ndindex(X.shape):
        E = np.zeros_like(X)
        E[idx] = h
        G[idx] = (f(X + E) - f(X - E)) / (2 * h)
    return G


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(1.0, np.linalg.norm(b))


def test_gradients_match_finite_differences_on_100_points():
    prob = random_problem(seed=11, with_eq=True)
    rng = np.random.default_rng(0)
    for _ in range(100):
        C = rng.uniform(-0.5, 1.5, (prob.s, prob.T))
        mu = rng.uniform(0, 2, (prob.T, prob.n))
        lam = rng.normal(0, 1, (prob.T, prob.n_eq))
        fd = central_diff(lambda X: prob.lagrangian(X, mu, lam), C)
        assert rel_err(prob.lagrangian_grad(C, mu, lam), fd) <= 1e-6
        for i in range(prob.s):
            assert rel_err(lagrangian_grad_primal(prob, C, mu, i, lam), fd[i]) <= 1e-6
        fd_mu = central_diff(lambda M: prob.lagrangian(C, M, lam), mu)
        assert rel_err(lagrangian_grad_dual(prob, C), fd_mu.ravel()) <= 1e-6
        fd_lam = central_diff(lambda Lm: prob.lagrangian(C, mu, Lm), lam)
        assert rel_err(prob.lagrangian_grad_lam(C), fd_lam.ravel()) <= 1e-6


def test_goal_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    g = QuadraticGoal((0, 2), rng.normal(size=(2, 5)), rng.normal(size=5), omega=2.0)
    for _ in range(20):
        C = rng.normal(size=(3, 5))
        assert rel_err(g.gradient(C), central_diff(g.value, C)) <= 1e-6


def test_dense_hessian_and_linear_term():
    prob = random_problem(seed=2)
    H, f = prob.hessian(), prob.linear_term()
    rng = np.random.default_rng(1)
    x0 = rng.normal(size=prob.s * prob.T)
    const = prob.total_objective(np.zeros((prob.s, prob.T)))
    for _ in range(5):
        x = rng.normal(size=x0.size)
        quad = 0.5 * x @ H @ x + f @ x + const
        assert prob.total_objective(x.reshape(prob.s, prob.T)) == pytest.approx(quad, rel=1e-10)
    lam_max = np.linalg.eigvalsh(H).max()
    assert hessian_norm_estimate(prob, iters=2000) == pytest.approx(lam_max, rel=1e-6)
    assert prob.hessian_norm() >= lam_max - 1e-9


def test_strong_convexity_modulus_is_certified():
    prob = random_problem(seed=3, delta=0.25, goals=False)
    lam_min = np.linalg.eigvalsh(prob.hessian()).min()
    assert strong_convexity_modulus(prob) == pytest.approx(0.25)
    assert strong_convexity_modulus(prob) <= lam_min + 1e-12


def test_objective_uses_power_base():
    prob = random_problem(seed=5, delta=0.0, goals=False)
    C = prob.initial_profile()
    load = prob.P_b + prob.p_max @ C
    assert prob.objective(C) == pytest.approx(0.5 * load @ load / 25.0)


def test_initial_profile_is_feasible():
    prob = random_problem(seed=6)
    C = prob.initial_profile()
    np.testing.assert_allclose(np.sum(prob.coeff * C, axis=1), prob.rhs)
    assert np.all(prob.coupling_residual(C) <= 0)


def test_dimension_checks():
    prob = random_problem()
    with pytest.raises(ConfigurationError):
        prob.objective(np.zeros((2, 2)))
    with pytest.raises(ConfigurationError):
        QuadraticGoal((0,), np.ones((1, 3)), np.zeros(3), omega=0.0)
    with pytest.raises(ConfigurationError):
        prob.with_delta(-1.0)


def summed_objective(prob, C):
    """Objective by explicit loops over slots and agents."""
    total = 0.0
    for t in range(prob.T):
        load = float(prob.P_b[t])
        for i in range(prob.s):
            load += float(prob.p_max[i]) * float(C[i, t])
        total += load * load
    reg = sum(float(C[i, t]) ** 2 for i in range(prob.s) for t in range(prob.T))
    return 0.5 * total / prob.power_base**2 + 0.5 * prob.delta * reg


def test_objective_matches_finite_sum():
    rng = np.random.default_rng(12)
    for seed in range(10):
        prob = random_problem(seed=seed, goals=False)
        C = rng.uniform(0, 1, (prob.s, prob.T))
        assert prob.objective(C) == pytest.approx(summed_objective(prob, C), rel=1e-10, abs=1e-10)


def test_objective_scalar_cases():
    prob = ValleyFillingProblem(p_max=[2.0], P_b=[1.0], lower=0.0, upper=1.0, coeff=[[1.0]], rhs=[0.5],
                                D=np.zeros((0, 1)), Y_b=np.zeros((1, 0)))
    assert prob.objective(np.array([[0.5]])) == pytest.approx(2.0)
    assert prob.objective(np.zeros((1, 1))) == pytest.approx(0.5)
