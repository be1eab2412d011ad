import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evdmao.analysis import (
    active_constraints,
    aggregate_bound,
    bounds_report,
    deviation_bound,
    energy_in_window,
    oscillation_score,
    profile_deviation,
    tangent_cone_projection,
    weak_sharp_check,
    write_json,
)
from evdmao.attacks import BatteryDamage, SmoothCharging, TimeTuning, attack_goals
from evdmao.datagen import bounds_instance, toy_coupled_problem
from evdmao.exceptions import ConfigurationError


def enumerate_cone_projection(sigma, E, A):
    """Try every subset of inequality rows as equalities; keep the closest feasible projection."""
    best, best_d = None, np.inf
    for k in range(A.shape[0] + 1):
        for S in itertools.combinations(range(A.shape[0]), k):
            M = np.vstack([E, A[list(S)]]) if (E.size or S) else np.zeros((0, sigma.size))
            if M.shape[0]:
                P = np.eye(sigma.size) - np.linalg.pinv(M) @ M
            else:
                P = np.eye(sigma.size)
            d = P @ sigma
            if A.shape[0] and np.any(A @ d > 1e-10):
                continue
            dist = np.linalg.norm(d - sigma)
            if dist < best_d - 1e-12:
                best, best_d = d, dist
    return best


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 100_000), st.integers(0, 1), st.integers(0, 4))
def test_cone_projection_matches_enumeration(seed, n_eq, n_ineq):
    rng = np.random.default_rng(seed)
    sigma = rng.normal(size=4)
    E = rng.normal(size=(n_eq, 4))
    A = rng.normal(size=(n_ineq, 4))
    got = tangent_cone_projection(sigma, E if n_eq else None, A if n_ineq else None)
    np.testing.assert_allclose(got, enumerate_cone_projection(sigma, E, A), atol=1e-8)
    # idempotent, and inside the cone
    np.testing.assert_allclose(tangent_cone_projection(got, E if n_eq else None, A if n_ineq else None), got,
                               atol=1e-8)


def test_cone_projection_of_a_face():
    # C* at the lower bound with sigma pushing further down: no feasible component
    assert np.linalg.norm(tangent_cone_projection([-1.0], None, [[-1.0]])) == 0
    np.testing.assert_allclose(tangent_cone_projection([1.0], None, [[-1.0]]), [1.0])


def test_active_constraints_band():
    prob = toy_coupled_problem(0.1, equality=False)
    C = prob.initial_profile().copy()
    act = active_constraints(prob, C, tau_act=1e-6, agents=[0])
    assert act.eq.shape[0] == 1 and act.sure.shape[0] == 0
    C[0, 0] = 5e-5  # slack inside (tau, 100 tau]
    C[0, 1] = 0.0
    act = active_constraints(prob, C, tau_act=1e-6, agents=[0])
    assert act.sure.shape[0] == 1 and act.ambiguous.shape[0] == 1


def test_bound_helpers():
    assert deviation_bound([1.0, 4.0], [3.0, 1.0], 2.0) == pytest.approx(np.sqrt(13) / 2)
    with pytest.raises(ConfigurationError):
        deviation_bound([1.0], [1.0], 0.0)
    prob = bounds_instance()
    goals = attack_goals(SmoothCharging(0, 2.0), prob)
    L = goals[0].gradient_bound()
    assert aggregate_bound(goals) == pytest.approx(np.sqrt(2.0) * L)
    assert aggregate_bound(goals, squared_weights=True) == pytest.approx(2.0 * L)


@pytest.mark.parametrize("spec", [SmoothCharging(0, 1.0), TimeTuning(1, tuple(range(5, 15)), 10.0, 0.2, 5.0),
                                  BatteryDamage((2, 3), 0.1, 2, 0.2, 5.0)])
def test_bounds_hold_on_regularized_instance(spec):
    prob = bounds_instance()
    rep = bounds_report(prob, attack_goals(spec, prob))
    assert rep.all_ok, {k: v for k, v in rep.slack.items() if not rep.bound_ok[k]}
    assert rep.tangent_proj <= rep.B + 1e-9
    d = rep.to_dict()
    assert d["all_ok"] and set(d["bound_ok"]) >= {"deviation_B", "gap_smooth", "gap_tangent"}


def test_weak_sharp_check_on_unregularized_toy():
    prob = toy_coupled_problem(0.0, equality=False)
    rep = weak_sharp_check(prob, attack_goals(SmoothCharging(0, 1.0), prob))
    assert rep.label == "empirical" and rep.alpha_est > 0
    assert rep.status == "holds" and rep.dist <= rep.bound_B


def test_metrics():
    assert oscillation_score([0, 1, 0, 1, 0, 1], 2) == 1.0
    assert oscillation_score([1, 0, 1, 0, 1, 0], 2) == 0.0
    assert oscillation_score([0.5] * 6, 2) == 0.0
    assert energy_in_window([1, 1, 0, 0], 2.0, [1, 2]) == 1.0
    assert energy_in_window([1, 1, 1, 1], 2.0, [4]) == 0.25
    assert profile_deviation([1, 1], [1, 1]) == (0.0, 0.0)
    m, l2 = profile_deviation([2, 0], [1, 1])
    assert m == 0.0 and l2 == pytest.approx(1.0)


def test_write_json_is_canonical(tmp_path):
    write_json({"b": float("nan"), "a": np.float64(1.5)}, tmp_path / "x.json")
    text = (tmp_path / "x.json").read_text()
    assert json.loads(text) == {"a": 1.5, "b": None}
    assert text.index('"a"') < text.index('"b"')
