import numpy as np
import pytest

from evdmao.attacks import BatteryDamage, DualPowerBalance, Stealthy, TimeTuning
from evdmao.exceptions import ScenarioValidationError
from evdmao.scenario import build_problem, bundled_scenarios, load_scenario, parse_scenario, resolve_attacks

BASE = """name: t
problem:
  kind: toy_coupled
  coupling: equality
  delta: 0.1
runs:
  - name: a
    attacks:
{attacks}
"""


def scenario(attacks="      []"):
    return parse_scenario(BASE.format(attacks=attacks))


def test_bundled_scenarios_parse_and_build():
    names = bundled_scenarios()
    assert {"valley500", "batterydamage50", "timetuning", "toy3", "toy3bus", "dual_smooth"} <= set(names)
    for name in names:
        sc = load_scenario(name)
        prob = build_problem(sc)
        for r in sc.runs:
            resolve_attacks(r.attacks, prob)


def test_attack_kinds_and_ranges():
    sc = scenario("""      - {kind: battery_damage, victims: {from: 0, to: 2}, omega: 1, t_f: 2}
      - kind: stealthy
        eps_s: 0.001
        inner: {kind: time_tuning, attacker: 0, theta: [3, 4], omega: 2}""")
    bd, st = sc.runs[0].attacks
    assert isinstance(bd, BatteryDamage) and bd.victims == (0, 1, 2)
    assert isinstance(st, Stealthy) and isinstance(st.inner, TimeTuning) and st.inner.theta == (3, 4)


def test_rush_charging_resolves_to_time_tuning():
    sc = scenario("      - {kind: rush_charging, attacker: 1, omega: 1}")
    prob = build_problem(sc)
    (tt,) = resolve_attacks(sc.runs[0].attacks, prob)
    assert isinstance(tt, TimeTuning) and tt.theta[0] == 1
    c = prob.coeff[1]
    assert c[: len(tt.theta)].sum() >= prob.rhs[1] > c[: len(tt.theta) - 1].sum()


def test_cbar_vector():
    sc = scenario("      - {kind: dual_power_balance, attacker: 0, victims: [1], cbar: " + str([0.1] * 24) + "}")
    (a,) = sc.runs[0].attacks
    assert isinstance(a, DualPowerBalance) and np.allclose(a.cbar, 0.1)


@pytest.mark.parametrize("text, field, line", [
    ("      - {kind: smooth_charging, attacker: 0, omega: -1}", "runs[0].attacks[0].omega", 9),
    ("      - {kind: teleport, attacker: 0}", "runs[0].attacks[0].kind", 9),
    ("      - {kind: time_tuning, attacker: 0, theta: [3, 4], m: 5, M: 1}", "runs[0].attacks[0]", 9),
    ("      - kind: smooth_charging\n        attacker: 0\n        omega: bad", "runs[0].attacks[0].omega", 11),
])
def test_validation_reports_field_and_line(text, field, line):
    with pytest.raises(ScenarioValidationError) as info:
        scenario(text)
    assert info.value.field == field and info.value.line == line
    assert f"line {line}" in str(info.value)


def test_unknown_top_level_key_and_bad_compare():
    with pytest.raises(ScenarioValidationError, match="colour"):
        parse_scenario("name: x\ncolour: red\nproblem: {kind: bounds5}\n")
    with pytest.raises(ScenarioValidationError, match="compare"):
        parse_scenario("name: x\nproblem: {kind: bounds5}\nruns:\n  - {name: a, attacks: []}\ncompare:\n  - [a, b]\n")


def test_missing_data_file(tmp_path):
    path = tmp_path / "s.yaml"
    path.write_text("name: x\nproblem: {kind: network, network: nope.json, baseline: b.csv, fleet: f.csv}\n")
    with pytest.raises((ScenarioValidationError, FileNotFoundError)):
        build_problem(load_scenario(path))
