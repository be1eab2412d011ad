import json

import pytest

from evdmao import cli
from evdmao.analysis import BoundsReport
from evdmao.scenario import DATA_DIR

TOY = """name: {name}
problem:
  kind: toy_coupled
  coupling: equality
  delta: 0.1
spds:
  eps: 1.0e-6
  max_iter: {max_iter}
runs:
  - name: free
    attacks: []
  - name: primal
    attacks:
      - {{kind: smooth_charging, attacker: 0, omega: 1.0}}
compare:
  - [primal, free]
"""


def write(tmp_path, text, name="s.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


@pytest.fixture
def out_root(tmp_path, monkeypatch):
    root = tmp_path / "results"
    monkeypatch.setenv(cli.ENV_OUTPUT_ROOT, str(root))
    return root


def test_run_writes_outputs_and_is_deterministic(tmp_path, out_root):
    path = write(tmp_path, TOY.format(name="toy", max_iter=50_000))
    assert cli.main(["run", path]) == 0
    first = (out_root / "toy" / "manifest.json").read_text()
    files = {e["path"] for e in json.loads(first)["files"]}
    for f in ("trace.csv", "metrics.csv", "profile.csv", "load.csv", "roundlog.jsonl", "run.json", "bounds.json"):
        assert f"primal/{f}" in files
    assert "compare_primal_vs_free/comparison.json" in files and "scenario.json" in files
    assert cli.main(["run", path, "--jobs", "2"]) == 0
    assert (out_root / "toy" / "manifest.json").read_text() == first


def test_exit_code_nonconvergence(tmp_path, out_root):
    assert cli.main(["run", write(tmp_path, TOY.format(name="slow", max_iter=3))]) == cli.EXIT_NONCONVERGED


def test_exit_code_validation(tmp_path, out_root, capsys):
    bad = TOY.format(name="bad", max_iter=10).replace("omega: 1.0", "omega: -1.0")
    assert cli.main(["run", write(tmp_path, bad)]) == cli.EXIT_VALIDATION
    assert "line 14" in capsys.readouterr().err
    assert cli.main(["validate", str(tmp_path / "missing.yaml")]) == cli.EXIT_VALIDATION
    assert not out_root.exists()


def test_exit_code_infeasible(tmp_path, out_root):
    fleet = tmp_path / "fleet.csv"
    fleet.write_text("id,bus,p_max_kw,eta,cap_kwh,soc_ini,soc_des\n0,1,1.0,0.9,500.0,0.0,1.0\n")
    text = f"""name: infeasible
problem:
  kind: network
  network: {DATA_DIR / 'toy3bus.json'}
  baseline: {DATA_DIR / 'toy3bus_baseline.csv'}
  fleet: {fleet}
  horizon: 24
  dt: 1.0
runs:
  - {{name: free, attacks: []}}
"""
    assert cli.main(["run", write(tmp_path, text)]) == cli.EXIT_INFEASIBLE


def test_dry_run_writes_nothing(tmp_path, out_root, capsys):
    assert cli.main(["run", "toy3", "valley500", "--dry-run"]) == 0
    assert "valley500: valid (500 EVs" in capsys.readouterr().out
    assert not out_root.exists()


def test_compare_and_verify_bounds(tmp_path, out_root, capsys, monkeypatch):
    path = write(tmp_path, TOY.format(name="toy", max_iter=50_000))
    cli.main(["run", path])
    root = out_root / "toy"
    assert cli.main(["compare", str(root / "primal"), str(root / "free"), "--out", str(tmp_path / "cmp")]) == 0
    summary = json.loads((tmp_path / "cmp" / "comparison.json").read_text())
    assert summary["max_rel_mean_dev"] < 1e-9 < summary["max_rel_l2_dev"]
    assert cli.main(["verify-bounds", str(root)]) == 0
    assert "primal: deviation_tangent=ok" in capsys.readouterr().out

    real = cli.bounds_report

    def broken(prob, goals, **kw):
        rep = real(prob, goals, **kw)
        rep.bound_ok["deviation_B"] = False
        return rep

    monkeypatch.setattr(cli, "bounds_report", broken)
    assert cli.main(["verify-bounds", str(root)]) == cli.EXIT_BOUNDS
    assert isinstance(real(*_toy_args()), BoundsReport)


def _toy_args():
    from evdmao.attacks import SmoothCharging, attack_goals
    from evdmao.datagen import toy_coupled_problem

    prob = toy_coupled_problem(0.1, equality=True)
    return prob, attack_goals(SmoothCharging(0, 1.0), prob)


def test_gen_fleet(tmp_path, capsys):
    out = tmp_path / "f.csv"
    assert cli.main(["gen-fleet", "--seed", "3", "--count", "4", "--out", str(out)]) == 0
    assert cli.main(["gen-fleet", "--seed", "3", "--count", "4"]) == 0
    assert capsys.readouterr().out == out.read_text()
    assert cli.main(["gen-fleet", "--seed", "3", "--count", "0"]) == cli.EXIT_VALIDATION


def test_module_entry_point():
    import subprocess
    import sys

    proc = subprocess.run([sys.executable, "-m", "evdmao", "validate", "toy3"], capture_output=True, text=True)
    assert proc.returncode == 0 and "toy3: valid" in proc.stdout


def test_bundled_toy3_comparison_files(out_root):
    assert cli.main(["run", "toy3"]) == 0
    root = out_root / "toy3"
    for name in ("dual_balance", "dual_full"):
        cmp = root / f"compare_{name}_vs_primal"
        assert {p.name for p in cmp.iterdir()} == {"comparison.csv", "comparison.json", "load_overlay.csv"}
        summary = json.loads((cmp / "comparison.json").read_text())
        assert summary["max_rel_mean_dev"] <= 1e-3 and summary["max_rel_l2_dev"] <= 1e-3
