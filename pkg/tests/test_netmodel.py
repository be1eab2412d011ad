import json

import numpy as np
import pytest

from evdmao.datagen import feeder_document
from evdmao.exceptions import ConfigurationError, InfeasibleError
from evdmao.netmodel import (
    BaselineProfile,
    DistributionNetwork,
    aggregation_matrix,
    baseline_voltage_drop,
    build_injection_model,
    load_baseline,
    load_network,
    nodal_voltages,
    path_impedance_matrices,
    write_baseline,
)
from evdmao.fleet import EvSpec


def forward_sweep(n, lines, p, q, v0=1.0, scale=1.0):
    """LinDistFlow by branch recursion: flows are subtree sums, v drops along each line."""
    children = {b: [] for b in range(n)}
    for ln in lines:
        children[ln["from"]].append(ln)

    def subtree(b):
        out = {b}
        for ln in children[b]:
            out |= subtree(ln["to"])
        return out

    v = np.zeros(n)
    v[0] = v0**2
    stack = [0]
    while stack:
        a = stack.pop()
        for ln in children[a]:
            b = ln["to"]
            sub = list(subtree(b))
            v[b] = v[a] - 2 * scale * (ln["r_ohm"] * p[sub].sum() + ln["x_ohm"] * q[sub].sum())
            stack.append(b)
    return v


def test_impedance_matrices_match_branch_recursion():
    doc = feeder_document()
    n = doc["n"]
    R, X = path_impedance_matrices(n, doc["lines"])
    rng = np.random.default_rng(1)
    for _ in range(5):
        p, q = rng.uniform(0, 50, n), rng.uniform(0, 20, n)
        dense = 1.0 - 2 * (R @ p + X @ q)
        np.testing.assert_allclose(dense, forward_sweep(n, doc["lines"], p, q), rtol=0, atol=1e-12)


def test_impedance_matrices_are_shared_path_sums():
    lines = [{"from": 0, "to": 1, "r_ohm": 1.0, "x_ohm": 0.5},
             {"from": 1, "to": 2, "r_ohm": 2.0, "x_ohm": 0.25},
             {"from": 1, "to": 3, "r_ohm": 4.0, "x_ohm": 1.0}]
    R, X = path_impedance_matrices(4, lines)
    np.testing.assert_array_equal(R, [[0, 0, 0, 0], [0, 1, 1, 1], [0, 1, 3, 1], [0, 1, 1, 5]])
    assert X[2, 3] == 0.5 and X[3, 3] == 1.5


def test_nodal_voltages_dense_oracle():
    R = np.array([[0.0, 0, 0], [0, 0.1, 0.1], [0, 0.1, 0.3]])
    net = DistributionNetwork(R=R, X=0.5 * R, scale=0.01)
    base = BaselineProfile(np.array([[0, 0], [2.0, 3.0], [1.0, 4.0]]), np.ones((3, 2)))
    fleet = [EvSpec(0, 1, 5.0, 0.9, 10, 0.2, 0.5, 1.0), EvSpec(1, 2, 7.0, 0.9, 10, 0.2, 0.5, 1.0)]
    inj = build_injection_model(net, fleet, base)
    C = np.array([[0.3, 0.8], [0.5, 0.1]])
    V = nodal_voltages(inj, C)
    for t in range(2):
        p = base.p_base[:, t].copy()
        p[1] += 5.0 * C[0, t]
        p[2] += 7.0 * C[1, t]
        expect = 1.0 - 2 * 0.01 * (R @ p + 0.5 * R @ base.q_base[:, t])
        np.testing.assert_allclose(V[t], expect, atol=1e-14)
        np.testing.assert_allclose(nodal_voltages(inj, C, t), expect, atol=1e-14)


def test_aggregation_matrix_rejects_unknown_bus():
    with pytest.raises(ConfigurationError, match="nonexistent bus 5"):
        aggregation_matrix([1, 5], 3)


def test_network_validation():
    with pytest.raises(ConfigurationError):
        DistributionNetwork(R=np.array([[0, 1], [2, 0.0]]), X=np.zeros((2, 2)))
    with pytest.raises(ConfigurationError):
        DistributionNetwork(R=np.eye(2), X=np.eye(2), v_floor=1.2)
    with pytest.raises(ConfigurationError):
        path_impedance_matrices(3, [{"from": 0, "to": 1, "r_ohm": 1, "x_ohm": 1}])


def test_overloaded_baseline_is_infeasible():
    net = DistributionNetwork(R=np.array([[0.0, 0], [0, 1.0]]), X=np.zeros((2, 2)))
    base = BaselineProfile(np.array([[0.0], [1.0]]))
    with pytest.raises(InfeasibleError):
        build_injection_model(net, [EvSpec(0, 1, 1.0, 1.0, 1.0, 0.0, 0.5, 1.0)], base)


def test_file_roundtrip(tmp_path):
    path = tmp_path / "net.json"
    path.write_text(json.dumps(feeder_document()))
    net = load_network(path)
    assert net.n == 13 and net.scale > 0
    vals = np.arange(26.0).reshape(13, 2)
    write_baseline(tmp_path / "b.csv", vals)
    np.testing.assert_array_equal(load_baseline(tmp_path / "b.csv").p_base, vals)


def test_two_bus_baseline_drop_by_hand():
    net = DistributionNetwork(R=0.1 * np.eye(2), X=np.zeros((2, 2)))
    base = BaselineProfile(np.ones((2, 1)))
    np.testing.assert_allclose(baseline_voltage_drop(net, base, 0), [0.2, 0.2], atol=1e-15)
    dense = 2.0 * np.linalg.multi_dot([net.R, base.p_base[:, 0]])
    np.testing.assert_allclose(baseline_voltage_drop(net, base, 0), dense, atol=1e-15)
    doubled = BaselineProfile(2.0 * np.ones((2, 1)))
    np.testing.assert_allclose(baseline_voltage_drop(net, doubled, 0), [0.4, 0.4], atol=1e-15)


def test_single_ev_injection_matrix():
    net = DistributionNetwork(R=np.array([[0.05]]), X=np.zeros((1, 1)))
    base = BaselineProfile(np.zeros((1, 2)))
    inj = build_injection_model(net, [EvSpec(0, 0, 10.0, 1.0, 10.0, 0.0, 0.5, 1.0)], base)
    np.testing.assert_allclose(inj.D, [[-1.0]], atol=1e-15)
    np.testing.assert_allclose(inj.D, -2.0 * net.R @ np.ones((1, 1)) @ np.diag([10.0]), atol=1e-15)
    np.testing.assert_array_equal(inj.y_d, np.ones((2, 1)))
