"""Synthetic feeder, baseline and fleet data for the bundled scenarios.

The 13-bus feeder follows the IEEE 13-node topology collapsed to a single
phase. Bus indices::

    0 650 (feeder head)   1 632   2 671   3 633   4 634   5 645   6 646
    7 692   8 675   9 684   10 611   11 652   12 680

Line impedances are per-line totals for a 2.4 kV line-to-neutral base.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .fleet import EvSpec, FeasibleSet, generate_fleet, write_fleet
from .netmodel import write_baseline

BUS_NAMES = ("650", "632", "671", "633", "634", "645", "646", "692", "675", "684", "611", "652", "680")

# (from, to, length in kft)
_LINES = (
    (0, 1, 2.0),
    (1, 2, 2.0),
    (1, 3, 0.5),
    (3, 4, 0.3),
    (1, 5, 0.5),
    (5, 6, 0.3),
    (2, 7, 0.05),
    (7, 8, 0.5),
    (2, 9, 0.3),
    (9, 10, 0.3),
    (9, 11, 0.8),
    (2, 12, 1.0),
)
R_PER_KFT = 0.0158
X_PER_KFT = 0.0450

# share of the network baseline carried by each bus
LOAD_SHARE = np.array([0.0, 0.10, 0.14, 0.08, 0.08, 0.07, 0.05, 0.04, 0.12, 0.05, 0.06, 0.09, 0.12])
EV_BUSES = (1, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12)

HORIZON = 48
DT_HOURS = 0.25


def feeder_document() -> dict:
    lines = [
        {"from": a, "to": b, "r_ohm": round(R_PER_KFT * kft, 6), "x_ohm": round(X_PER_KFT * kft, 6)}
        for a, b, kft in _LINES
    ]
    return {
        "n": len(BUS_NAMES),
        "names": list(BUS_NAMES),
        "lines": lines,
        "v0_pu": 1.0,
        "v_floor_pu": 0.95,
        "base_kv": 2.4,
        "units": {"r_ohm": "ohm", "x_ohm": "ohm", "power": "kW", "voltage": "p.u."},
    }


def aggregate_baseline(T: int = HORIZON, dt: float = DT_HOURS) -> np.ndarray:
    """Overnight network baseline (kW), 20:00 onwards: evening decay, morning rise."""
    h = np.arange(T) * dt
    return 1100.0 + 1400.0 * np.exp(-h / 2.2) + 900.0 * np.exp(-(T * dt - h) / 2.5)


def bus_baseline(T: int = HORIZON, dt: float = DT_HOURS) -> np.ndarray:
    agg = aggregate_baseline(T, dt)
    return np.round(LOAD_SHARE[:, None] * agg[None, :], 6)


def attacker_spec(dt: float = DT_HOURS, T: int = HORIZON) -> EvSpec:
    """EV 0: energy request equal to a flat 0.2 rate over the horizon."""
    p_max, eta, cap, soc_des = 6.6, 0.9, 60.0, 0.9
    need = 0.2 * T * eta * dt * p_max
    return EvSpec(0, 2, p_max, eta, cap, round(soc_des - need / cap, 12), soc_des, dt)


def bundled_fleet(seed: int = 2024, count: int = 500) -> list[EvSpec]:
    fleet = generate_fleet(seed, count, EV_BUSES, dt=DT_HOURS, horizon=HORIZON, first_bus=2, first_count=50)
    fleet[0] = attacker_spec()
    return fleet


def write_bundle(root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "ieee13_synthetic.json").write_text(json.dumps(feeder_document(), indent=2) + "\n")
    write_baseline(root / "baseline13.csv", bus_baseline())
    write_baseline(root / "baseline13_q.csv", np.round(0.3 * bus_baseline(), 6))
    write_fleet(root / "fleet500.csv", bundled_fleet())
    (root / "toy3bus.json").write_text(json.dumps(toy_feeder_document(), indent=2) + "\n")
    write_baseline(root / "toy3bus_baseline.csv", toy_bus_baseline())
    write_baseline(root / "toy3bus_baseline_q.csv", np.round(0.3 * toy_bus_baseline(), 9))
    write_fleet(root / "toy3bus_fleet.csv", toy_fleet())


# -- toy instances --------------------------------------------------------------

TOY_T = 24
TOY_RATES = (0.2, 0.4, 0.3)  # mean charging rate each toy EV needs
TOY_WEIGHTS = (1.0, 0.2, 0.3)  # coupling c_1 + 0.2 c_2 + 0.3 c_3 <= b


def toy_fleet(T: int = TOY_T, buses=(1, 2, 2), dt: float = 1.0) -> list[EvSpec]:
    """Three EVs whose requests equal flat rates ``TOY_RATES`` over ``T`` slots."""
    specs = []
    for i, (rate, bus, p) in enumerate(zip(TOY_RATES, buses, (6.6, 7.2, 3.3))):
        eta, cap = 0.9, 200.0
        need = rate * T * eta * dt * p
        specs.append(EvSpec(i, bus, p, eta, cap, round(0.95 - need / cap, 12), 0.95, dt))
    return specs


def toy_baseline(T: int = TOY_T) -> np.ndarray:
    """Aggregate valley-shaped baseline (kW) for the toy problems."""
    t = np.arange(T)
    return 20.0 + 8.0 * np.cos(2.0 * np.pi * t / T)


def toy_feeder_document() -> dict:
    """Three-bus line 0 - 1 - 2 on a 0.24 kV base."""
    return {
        "n": 3,
        "names": ["head", "mid", "end"],
        "lines": [{"from": 0, "to": 1, "r_ohm": 0.04, "x_ohm": 0.01},
                  {"from": 1, "to": 2, "r_ohm": 0.24, "x_ohm": 0.015}],
        "v0_pu": 1.0,
        "v_floor_pu": 0.95,
        "base_kv": 0.24,
        "units": {"r_ohm": "ohm", "x_ohm": "ohm", "power": "kW", "voltage": "p.u."},
    }


def toy_bus_baseline(T: int = TOY_T) -> np.ndarray:
    share = np.array([0.0, 0.85, 0.15])
    return np.round(share[:, None] * toy_baseline(T)[None, :], 9)


def toy_coupling_level(T: int = TOY_T) -> float:
    """``b`` making the flat request profiles meet the coupling with equality."""
    return float(np.dot(TOY_WEIGHTS, TOY_RATES))


def toy_coupled_problem(delta: float = 0.0, equality: bool = False, b: float | None = None,
                        power_base: float = 10.0, T: int = TOY_T):
    """The three-EV toy with the linear coupling ``c_1 + 0.2 c_2 + 0.3 c_3``.

    With ``equality`` the coupling is the balance ``R(C) = 0`` at level
    :func:`toy_coupling_level`; otherwise it is the inequality ``<= b``
    (default level 1.2 times the balance level). Local sets keep the energy
    rows instead of the norm constraints so that they stay convex.
    """
    from .problem import ValleyFillingProblem

    fleet = toy_fleet(T)
    sets = [FeasibleSet.from_spec(ev, T) for ev in fleet]
    w = np.array(TOY_WEIGHTS)[None, :]
    level = toy_coupling_level(T)
    common = dict(
        p_max=np.array([ev.p_max for ev in fleet]),
        P_b=toy_baseline(T),
        lower=np.stack([f.lower for f in sets]),
        upper=np.stack([f.upper for f in sets]),
        coeff=np.stack([f.eq_coeff for f in sets]),
        rhs=np.array([f.eq_rhs for f in sets]),
        delta=delta,
        power_base=power_base,
        ids=tuple(ev.id for ev in fleet),
        meta={"name": "toy3", "coupling": "equality" if equality else "inequality"},
    )
    if equality:
        return ValleyFillingProblem(D=np.zeros((0, 3)), Y_b=np.zeros((T, 0)), D_eq=w,
                                    b_eq=np.full((T, 1), level), **common)
    b = 1.2 * level if b is None else b
    return ValleyFillingProblem(D=-w, Y_b=np.full((T, 1), -b), **common)


def bounds_instance(delta: float = 0.05, s: int = 5, T: int = TOY_T, power_base: float = 10.0):
    """Five EVs under a shallow valley, no network coupling.

    The baseline swing is small against the fleet's power, so the
    attack-free optimum charges every EV at an interior rate in every slot.
    """
    from .problem import ValleyFillingProblem

    p = np.array([5.0, 6.0, 7.0, 4.0, 3.0])[:s]
    rates = np.array([0.35, 0.45, 0.4, 0.5, 0.3])[:s]
    t = np.arange(T)
    P_b = 30.0 + 4.0 * np.cos(2.0 * np.pi * t / T)
    coeff = np.repeat(p[:, None], T, axis=1)
    return ValleyFillingProblem(
        p_max=p, P_b=P_b, lower=0.0, upper=1.0, coeff=coeff, rhs=rates * p * T,
        D=np.zeros((0, s)), Y_b=np.zeros((T, 0)), delta=delta, power_base=power_base,
        meta={"name": "bounds5"},
    )
