"""Command-line interface: run scenarios, compare runs, verify bounds.

Verbs::

    evdmao run <scenario>... [--out DIR] [--jobs N] [--dry-run]
    evdmao compare <runA> <runB> [--out DIR]
    evdmao verify-bounds <scenario-output-dir>
    evdmao gen-fleet --seed S --count N [--out FILE]
    evdmao validate <scenario>...

Exit codes: 0 success, 1 bound violation, 2 validation error,
3 infeasible scenario, 4 non-convergence.

Results go to ``$EVDMAO_OUTPUT_ROOT/<scenario name>`` unless ``--out`` or
the scenario's ``output`` key says otherwise. Every output directory holds a
``manifest.json`` listing each file with its SHA-256 digest; no timestamps
or timings are written, so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .analysis import (
    bounds_report,
    profile_deviation,
    scenario_metrics,
    weak_sharp_check,
    write_json,
    write_metrics_csv,
)
from .attacks import DualFull, DualPowerBalance, SmoothCharging, Stealthy, attack_goals, attack_label
from .comms import RoundLog
from .exceptions import ConfigurationError, InfeasibleError, ScenarioValidationError
from .fleet import generate_fleet, write_fleet
from .scenario import Scenario, build_problem, load_scenario, normalized, resolve_attacks
from .spds import run

log = logging.getLogger("evdmao")

ENV_OUTPUT_ROOT = "EVDMAO_OUTPUT_ROOT"
EXIT_OK, EXIT_BOUNDS, EXIT_VALIDATION, EXIT_INFEASIBLE, EXIT_NONCONVERGED = 0, 1, 2, 3, 4
BOUNDS_MAX_VARS = 5000


# -- file helpers -------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(root: Path) -> Path:
    """List every file under ``root`` (except the manifest) with its digest."""
    root = Path(root)
    entries = []
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            entries.append({"path": p.relative_to(root).as_posix(), "sha256": _sha256(p), "bytes": p.stat().st_size})
    out = root / "manifest.json"
    out.write_text(json.dumps({"files": entries}, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def write_profile_csv(path: Path, ids, C) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + [f"t{t}" for t in range(C.shape[1])])
        for a, row in zip(ids, C):
            w.writerow([a] + [repr(float(v)) for v in row])


def read_profile_csv(path: Path) -> tuple[list, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    ids = [int(r[0]) for r in rows[1:] if r]
    C = np.array([[float(v) for v in r[1:]] for r in rows[1:] if r])
    return ids, C


def write_load_csv(path: Path, baseline, total) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "baseline_kw", "total_kw"])
        for t, (b, v) in enumerate(zip(baseline, total)):
            w.writerow([t, repr(float(b)), repr(float(v))])


def read_load_csv(path: Path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(r[1]), float(r[2])] for r in rows if r])


# -- running ------------------------------------------------------------------


@dataclass
class RunOutcome:
    name: str
    converged: bool
    iterations: int
    directory: str


def output_dir(sc: Scenario, out: str | None = None) -> Path:
    if out is not None:
        return Path(out)
    root = Path(os.environ.get(ENV_OUTPUT_ROOT, "results"))
    if sc.output is not None:
        p = Path(sc.output)
        return p if p.is_absolute() else root / p
    return root / sc.name


def goals_for_bounds(specs, prob) -> list:
    """Reference-form goals of a run's attacks; dual attacks map to their primal goal."""
    goals = []
    for spec in specs:
        inner = spec.inner if isinstance(spec, Stealthy) else spec
        if isinstance(inner, DualPowerBalance):
            goals += attack_goals(inner.goal or SmoothCharging(inner.attacker, inner.omega), prob)
        else:
            goals += attack_goals(inner, prob)
    return goals


def _bounds_payload(sc: Scenario, prob, attacks) -> dict | None:
    if not attacks or sc.bounds == "never":
        return None
    if sc.bounds == "auto" and (prob.delta <= 0 or prob.s * prob.T > BOUNDS_MAX_VARS):
        return None
    goals = goals_for_bounds(attacks, prob)
    if not goals:
        return None
    if prob.delta > 0:
        return {"kind": "strongly_convex", "report": bounds_report(prob, goals).to_dict()}
    return {"kind": "weak_sharp", "report": weak_sharp_check(prob, goals, seed=sc.seed).to_dict()}


def execute_run(sc: Scenario, index: int, directory: Path, prob=None) -> RunOutcome:
    """Run one entry of ``sc.runs`` and write its files into ``directory``."""
    spec = sc.runs[index]
    prob = build_problem(sc) if prob is None else prob
    attacks = resolve_attacks(spec.attacks, prob)
    roundlog = RoundLog(sc.log_detail, sc.log_payloads)
    res = run(prob, sc.spds, attacks, log=roundlog, use_bus=True)
    directory.mkdir(parents=True, exist_ok=True)
    res.trace.to_csv(directory / "trace.csv")
    if sc.spds.record_every:
        res.trace.dump_states(directory / "states.npz")
    metrics = scenario_metrics(res, prob, attacks, sc.window)
    write_metrics_csv(metrics, directory / "metrics.csv")
    write_profile_csv(directory / "profile.csv", prob.ids, res.C)
    write_load_csv(directory / "load.csv", prob.P_b, prob.total_load(res.C))
    roundlog.write_jsonl(directory / "roundlog.jsonl")
    info = {
        "run": spec.name,
        "attacks": [attack_label(a) for a in attacks],
        "converged": res.converged,
        "iterations": res.iterations,
        "final_residual": res.trace.final_residual,
        "eps": res.trace.eps,
        "activation_round": res.trace.activation,
        "step_b0": res.steps.b0,
        "step_L_hat": res.steps.L_hat,
        "dual_saturated": res.dual.saturated,
        "mutated_messages": len(roundlog.mutations()),
    }
    write_json(info, directory / "run.json")
    payload = _bounds_payload(sc, prob, attacks)
    if payload is not None:
        write_json(payload, directory / "bounds.json")
    return RunOutcome(spec.name, res.converged, res.iterations, str(directory))


def _worker(args) -> RunOutcome:
    path, index, directory = args
    sc = load_scenario(path)
    return execute_run(sc, index, Path(directory))


def prepare_output(sc: Scenario, root: Path) -> None:
    """Copy inputs and the normalized scenario into ``root``."""
    root.mkdir(parents=True, exist_ok=True)
    names = {}
    files = sc.data_files()
    if files:
        (root / "inputs").mkdir(exist_ok=True)
        for role, src in sorted(files.items()):
            dst = root / "inputs" / src.name
            shutil.copyfile(src, dst)
            names[role] = f"inputs/{src.name}"
    write_json(normalized(sc, names), root / "scenario.json")


def compare_runs(dir_a, dir_b, out=None) -> dict:
    """Per-agent deviations of run A from run B and the total-load overlay.

    Raises
    ------
    ConfigurationError
        If the runs have different fleets or horizons.
    """
    dir_a, dir_b = Path(dir_a), Path(dir_b)
    ids_a, A = read_profile_csv(dir_a / "profile.csv")
    ids_b, B = read_profile_csv(dir_b / "profile.csv")
    if ids_a != ids_b or A.shape != B.shape:
        raise ConfigurationError(f"runs differ in dimensions: {A.shape} vs {B.shape}")
    rows = []
    for a, ca, cb in zip(ids_a, A, B):
        md, l2 = profile_deviation(ca, cb)
        rows.append((a, float(ca.mean()), float(cb.mean()), md, l2))
    load_a, load_b = read_load_csv(dir_a / "load.csv"), read_load_csv(dir_b / "load.csv")
    summary = {
        "run_a": dir_a.name,
        "run_b": dir_b.name,
        "max_rel_mean_dev": max(r[3] for r in rows),
        "max_rel_l2_dev": max(r[4] for r in rows),
        "total_load_rel_l2_dev": float(np.linalg.norm(load_a[:, 1] - load_b[:, 1]) / np.linalg.norm(load_b[:, 1])),
        "per_agent": {str(r[0]): {"mean_a": r[1], "mean_b": r[2], "rel_mean_dev": r[3], "rel_l2_dev": r[4]}
                      for r in rows},
    }
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "comparison.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "mean_a", "mean_b", "rel_mean_dev", "rel_l2_dev"])
            for r in rows:
                w.writerow([r[0]] + [repr(v) for v in r[1:]])
        with open(out / "load_overlay.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "baseline_kw", "total_a_kw", "total_b_kw"])
            for t in range(load_a.shape[0]):
                w.writerow([t, repr(load_a[t, 0]), repr(load_a[t, 1]), repr(load_b[t, 1])])
        write_json({k: v for k, v in summary.items() if k != "per_agent"}, out / "comparison.json")
    return summary


def run_scenarios(paths, out=None, jobs: int = 1, dry_run: bool = False) -> int:
    """Validate and run scenario files; returns the process exit code."""
    scenarios = []
    for p in paths:
        sc = load_scenario(p)
        prob = build_problem(sc)
        for r in sc.runs:
            resolve_attacks(r.attacks, prob)
        scenarios.append((sc, prob))
    if dry_run:
        for sc, prob in scenarios:
            print(f"{sc.name}: valid ({prob.s} EVs, T={prob.T}, {len(sc.runs)} run(s))")
        return EXIT_OK
    if out is not None and len(scenarios) > 1:
        raise ConfigurationError("--out takes a single scenario")
    tasks, roots = [], []
    for sc, prob in scenarios:
        root = output_dir(sc, out)
        prepare_output(sc, root)
        roots.append((sc, root))
        for i, r in enumerate(sc.runs):
            tasks.append((str(sc.source), i, str(root / r.name)))
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_worker, tasks))
    else:
        cache = {str(sc.source): (sc, prob) for sc, prob in scenarios}
        outcomes = [execute_run(cache[p][0], i, Path(d), cache[p][1]) for p, i, d in tasks]
    for sc, root in roots:
        for a, b in sc.compare:
            compare_runs(root / a, root / b, root / f"compare_{a}_vs_{b}")
        write_manifest(root)
    code = EXIT_OK
    for o in outcomes:
        status = "converged" if o.converged else "NOT converged"
        print(f"{o.directory}: {status} after {o.iterations} iterations")
        if not o.converged:
            code = EXIT_NONCONVERGED
    return code


def verify_bounds(directory) -> int:
    """Recompute bound reports for every attacked run under ``directory``."""
    from .scenario import parse_scenario

    root = Path(directory)
    doc = json.loads((root / "scenario.json").read_text(encoding="utf-8"))
    # the copy references inputs/ relative to the output directory
    sc = parse_scenario(_yaml_dump(doc), root / "scenario.json")
    prob = build_problem(sc)
    ok = True
    for r in sc.runs:
        attacks = resolve_attacks(r.attacks, prob)
        goals = goals_for_bounds(attacks, prob)
        if not goals:
            continue
        if prob.s * prob.T > BOUNDS_MAX_VARS:
            print(f"{r.name}: skipped ({prob.s * prob.T} variables exceed {BOUNDS_MAX_VARS})")
            continue
        if prob.delta > 0:
            rep = bounds_report(prob, goals)
            payload = {"kind": "strongly_convex", "report": rep.to_dict()}
            passed = rep.all_ok
            detail = ", ".join(f"{k}={'ok' if v else 'FAIL'}" for k, v in rep.bound_ok.items())
        else:
            rep = weak_sharp_check(prob, goals, seed=sc.seed)
            payload = {"kind": "weak_sharp", "report": rep.to_dict()}
            passed = rep.status != "violated"
            detail = f"weak sharp ({rep.label}): {rep.status}"
        (root / r.name).mkdir(exist_ok=True)
        write_json(payload, root / r.name / "bounds.json")
        print(f"{r.name}: {detail}")
        ok = ok and passed
    write_manifest(root)
    return EXIT_OK if ok else EXIT_BOUNDS


def _yaml_dump(doc) -> str:
    import yaml

    return yaml.safe_dump(doc, sort_keys=False)


# -- argument parsing ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="evdmao", description="Distributed EV charging under algorithmic attacks")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="run scenario files or bundled scenario names")
    p.add_argument("scenarios", nargs="+")
    p.add_argument("--out", help="output directory (single scenario)")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--dry-run", action="store_true", help="validate only")

    p = sub.add_parser("compare", help="compare two run directories")
    p.add_argument("run_a")
    p.add_argument("run_b")
    p.add_argument("--out")

    p = sub.add_parser("verify-bounds", help="recompute deviation bounds for a scenario output")
    p.add_argument("directory")

    p = sub.add_parser("gen-fleet", help="write a synthetic fleet CSV")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--buses", type=int, nargs="+", default=list(range(1, 13)))
    p.add_argument("--dt", type=float, default=0.25)
    p.add_argument("--horizon", type=int, default=48)
    p.add_argument("--out")

    p = sub.add_parser("validate", help="validate scenario files")
    p.add_argument("scenarios", nargs="+")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.verb == "run":
            if args.jobs < 1:
                raise ConfigurationError("--jobs must be at least 1")
            return run_scenarios(args.scenarios, args.out, args.jobs, args.dry_run)
        if args.verb == "validate":
            return run_scenarios(args.scenarios, dry_run=True)
        if args.verb == "compare":
            summary = compare_runs(args.run_a, args.run_b, args.out)
            print(json.dumps({k: v for k, v in summary.items() if k != "per_agent"}, indent=2, sort_keys=True))
            return EXIT_OK
        if args.verb == "verify-bounds":
            return verify_bounds(args.directory)
        if args.verb == "gen-fleet":
            if args.count < 1:
                raise ConfigurationError("--count must be positive")
            fleet = generate_fleet(args.seed, args.count, args.buses, dt=args.dt, horizon=args.horizon)
            if args.out:
                write_fleet(args.out, fleet)
            else:
                write_fleet(sys.stdout, fleet)
            return EXIT_OK
    except ScenarioValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ConfigurationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_VALIDATION  # pragma: no cover


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
