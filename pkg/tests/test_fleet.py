import io
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evdmao.exceptions import ConfigurationError, InfeasibleError
from evdmao.fleet import (
    EvSpec,
    FeasibleSet,
    energy_requirement,
    generate_fleet,
    load_fleet,
    project_feasible,
    project_rows,
    stacked_energy_row,
    write_fleet,
)


def exhaustive_projection(z, lo, up, a, b):
    """Try every lower/upper/free labelling; keep the closest feasible face minimizer."""
    best, best_d = None, np.inf
    for labels in itertools.product((0, 1, 2), repeat=z.size):
        lab = np.array(labels)
        x = np.where(lab == 0, lo, np.where(lab == 1, up, z))
        free = lab == 2
        if free.any():
            # minimize ||x_F - z_F|| s.t. a.x = b: x_F = z_F + theta a_F
            theta = (b - a @ x) / (a[free] @ a[free])
            x = x.copy()
            x[free] = z[free] + theta * a[free]
        elif abs(a @ x - b) > 1e-12:
            continue
        if np.all(x >= lo - 1e-12) and np.all(x <= up + 1e-12) and abs(a @ x - b) <= 1e-10:
            d = np.linalg.norm(x - z)
            if d < best_d:
                best, best_d = x, d
    return best


def random_set(rng, T=6):
    lo = rng.uniform(0, 0.3, T) * (rng.random(T) < 0.5)
    up = lo + rng.uniform(0.1, 1.0, T)
    a = rng.uniform(0.2, 2.0, T)
    b = rng.uniform(a @ lo, a @ up)
    return lo, up, a, b


def test_projection_matches_exhaustive_oracle():
    rng = np.random.default_rng(7)
    for _ in range(40):
        lo, up, a, b = random_set(rng)
        z = rng.normal(0.4, 1.0, 6)
        x = project_feasible(z, FeasibleSet(lo, up, a, b))
        np.testing.assert_allclose(x, exhaustive_projection(z, lo, up, a, b), atol=1e-8)


def test_projection_is_idempotent_and_rowwise():
    rng = np.random.default_rng(3)
    sets = [random_set(rng) for _ in range(5)]
    Z = rng.normal(0.5, 1.0, (5, 6))
    L, U, A = (np.stack([s[k] for s in sets]) for k in range(3))
    b = np.array([s[3] for s in sets])
    X = project_rows(Z, L, U, A, b)
    np.testing.assert_allclose(project_rows(X, L, U, A, b), X, atol=1e-12)
    for i, s in enumerate(sets):
        np.testing.assert_allclose(X[i], project_feasible(Z[i], FeasibleSet(*s)), atol=1e-14)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3))
def test_projection_properties(seed, shift):
    rng = np.random.default_rng(seed)
    lo, up, a, b = random_set(rng, T=8)
    fs = FeasibleSet(lo, up, a, b)
    z = rng.normal(shift, 1.0, 8)
    x = project_feasible(z, fs)
    assert fs.contains(x, tol=1e-9)
    # variational inequality: (z - x).(y - x) <= 0 for feasible y
    for _ in range(5):
        y = project_feasible(rng.normal(0, 2, 8), fs)
        assert (z - x) @ (y - x) <= 1e-9


def test_zero_coefficient_slots_are_clipped():
    fs = FeasibleSet(np.zeros(3), np.ones(3), np.array([1.0, 0.0, 1.0]), 1.0)
    x = project_feasible(np.array([2.0, 5.0, 0.0]), fs)
    np.testing.assert_allclose(x, [1.0, 1.0, 0.0])


def test_empty_set_names_agent():
    with pytest.raises(InfeasibleError, match="agent 4"):
        project_rows(np.zeros((1, 2)), 0.0, 1.0, 1.0, [3.0], agents=[4])
    spec = EvSpec(9, 1, 1.0, 1.0, 100.0, 0.0, 1.0, 0.25)
    with pytest.raises(InfeasibleError, match="EV 9"):
        FeasibleSet.from_spec(spec, 4)


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        EvSpec(0, 1, 5.0, 0.9, 10.0, 0.8, 0.5)
    with pytest.raises(ConfigurationError):
        EvSpec(0, 1, -5.0, 0.9, 10.0, 0.2, 0.5)
    with pytest.raises(ConfigurationError):
        FeasibleSet(np.ones(2), np.zeros(2), np.ones(2), 1.0)


def test_energy_row_matches_stacked_matrices():
    fleet = [EvSpec(k, 1, 3.0 + k, 0.9, 5.0, 0.1, 0.2, 0.25) for k in range(3)]
    for i, ev in enumerate(fleet):
        fs = FeasibleSet.from_spec(ev, 5)
        np.testing.assert_allclose(stacked_energy_row(fleet, i, 5), -fs.eq_coeff)
        assert fs.eq_rhs == pytest.approx(energy_requirement(ev))


def test_plug_in_window_zeroes_upper():
    fs = FeasibleSet.from_spec(EvSpec(0, 1, 7.0, 0.9, 10.0, 0.5, 0.6, 0.25), 8, window=(2, 5))
    np.testing.assert_array_equal(fs.upper, [0, 0, 1, 1, 1, 0, 0, 0])


def test_fleet_csv_roundtrip_and_generator_determinism(tmp_path):
    a = generate_fleet(5, 20, [1, 2, 3])
    assert a == generate_fleet(5, 20, [1, 2, 3])
    assert a != generate_fleet(6, 20, [1, 2, 3])
    write_fleet(tmp_path / "f.csv", a)
    assert load_fleet(tmp_path / "f.csv") == a
    buf = io.StringIO()
    write_fleet(buf, a)
    assert buf.getvalue() == (tmp_path / "f.csv").read_text()


def test_attacker_request_gives_flat_rate_near_point_two():
    # E_req = 7720 and |B_1| = 675 only give 0.2 for a non-integer horizon (57.2); T = 57 lands within 1%
    T = 57
    fs = FeasibleSet(np.zeros(T), np.ones(T), np.full(T, 675.0), 7720.0)
    c = project_feasible(np.zeros(T), fs)
    np.testing.assert_allclose(c, c[0], rtol=0, atol=1e-12)
    assert c[0] == pytest.approx(0.2, rel=0.01)
