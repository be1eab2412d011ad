"""Shared fixtures: small random instances and the bundled toy problems."""

import numpy as np
import pytest

from evdmao.problem import QuadraticGoal, ValleyFillingProblem


def random_problem(seed=0, s=3, T=4, n=2, delta=0.1, with_eq=False, goals=True):
    """Small random instance with feasible local sets; coupling rows are loose."""
    rng = np.random.default_rng(seed)
    p_max = rng.uniform(3.0, 7.0, s)
    coeff = np.outer(rng.uniform(0.2, 0.5, s), np.ones(T))
    upper = np.ones((s, T))
    rhs = coeff.sum(axis=1) * rng.uniform(0.2, 0.7, s)
    D = -rng.uniform(0.1, 1.0, (n, s))
    Y_b = -rng.uniform(2.0, 3.0, (T, n))  # sum D_i c_i >= Y_b holds for c in [0, 1]
    kw = {}
    if with_eq:
        D_eq = rng.uniform(0.5, 1.0, (1, s))
        flat = rhs / coeff.sum(axis=1)  # a feasible point, so the balance is attainable
        kw = {"D_eq": D_eq, "b_eq": np.full((T, 1), float(D_eq[0] @ flat))}
    gl = ()
    if goals:
        gl = (
            QuadraticGoal.diagonal(0, rng.uniform(0.5, 2.0, T), omega=0.7, label="d0"),
            QuadraticGoal((1, 2), rng.uniform(-1, 1, (2, T)), rng.uniform(-1, 1, T), omega=0.3, label="mix"),
        )
    return ValleyFillingProblem(
        p_max=p_max, P_b=rng.uniform(10, 20, T), lower=np.zeros((s, T)), upper=upper, coeff=coeff,
        rhs=rhs, D=D, Y_b=Y_b, delta=delta, power_base=5.0, goals=gl, **kw,
    )


@pytest.fixture
def small_problem():
    return random_problem()


@pytest.fixture(scope="session")
def toy3bus_problem():
    from evdmao.scenario import build_problem, load_scenario

    return build_problem(load_scenario("toy3bus"))


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    lines = getattr(test_acceptance, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
