"""Scenario files: YAML parsing, validation and problem assembly.

A scenario names its data files (relative to the scenario file), the
solver settings and one or more runs, each with its own attack list::

    name: valley500
    problem:
      kind: network
      network: ../ieee13_synthetic.json
      baseline: ../baseline13.csv
      fleet: ../fleet500.csv
      horizon: 48
      dt: 0.25
      power_base: 30
    spds: {eps: 1.0e-5}
    runs:
      - name: free
        attacks: []

Validation errors carry the dotted field path and the source line.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .attacks import (
    BatteryDamage,
    DualFull,
    DualPowerBalance,
    SmoothCharging,
    Stealthy,
    TimeTuning,
    rush_charging_theta,
    validate_attack,
)
from .exceptions import ConfigurationError, ScenarioValidationError
from .fleet import generate_fleet, load_fleet
from .netmodel import load_baseline, load_network
from .problem import ValleyFillingProblem
from .spds import SpdsConfig

DATA_DIR = Path(__file__).resolve().parent / "data"
SCENARIO_DIR = DATA_DIR / "scenarios"

PROBLEM_KINDS = ("network", "toy_coupled", "bounds5")
ATTACK_KINDS = ("smooth_charging", "time_tuning", "rush_charging", "battery_damage", "stealthy",
                "dual_full", "dual_power_balance")
SPDS_KEYS = ("tau_c", "tau_mu", "a0", "a1", "b0", "b1", "eps", "max_iter", "mu_max", "lam_max", "dual_eps",
             "adapt_attacker_steps", "record_every")


# -- YAML with line numbers ---------------------------------------------------


def _to_data(node, path: str, lines: dict):
    lines[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            key = yaml.safe_load(yaml.serialize(k)) if not isinstance(k, yaml.ScalarNode) else k.value
            sub = f"{path}.{key}" if path else str(key)
            if key in out:
                raise ScenarioValidationError("duplicate key", sub, k.start_mark.line + 1)
            lines[sub] = k.start_mark.line + 1
            out[key] = _to_data(v, sub, lines)
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_to_data(v, f"{path}[{j}]", lines) for j, v in enumerate(node.value)]
    return yaml.safe_load(yaml.serialize(node))


def load_yaml(text: str, source: str = "<scenario>") -> tuple[Any, dict]:
    """Parse YAML and return ``(data, lines)`` with a dotted-path line map."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ScenarioValidationError(f"{source}: not valid YAML ({getattr(exc, 'problem', exc)})",
                                      None, None if mark is None else mark.line + 1) from None
    if node is None:
        raise ScenarioValidationError(f"{source}: empty scenario", None, 1)
    lines: dict = {}
    return _to_data(node, "", lines), lines


# -- validation helpers -------------------------------------------------------


class _Ctx:
    def __init__(self, lines: dict):
        self.lines = lines

    def fail(self, msg: str, path: str):
        raise ScenarioValidationError(msg, path, self._line(path))

    def _line(self, path: str):
        while path:
            if path in self.lines:
                return self.lines[path]
            path = path.rsplit(".", 1)[0] if "." in path else (path.rsplit("[", 1)[0] if "[" in path else "")
        return None

    def mapping(self, v, path, allowed, required=()):
        if not isinstance(v, dict):
            self.fail("expected a mapping", path)
        for k in v:
            if k not in allowed:
                self.fail(f"unknown key (allowed: {', '.join(allowed)})", f"{path}.{k}" if path else str(k))
        for k in required:
            if k not in v:
                self.fail(f"missing required key '{k}'", path)
        return v

    def number(self, v, path, lo=None, hi=None, strict_lo=False, integer=False):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.fail(f"expected a number, got {v!r}", path)
        if integer and (not math.isfinite(v) or int(v) != v):
            self.fail(f"expected an integer, got {v!r}", path)
        if math.isnan(v):
            self.fail("NaN is not allowed", path)
        if lo is not None and (v < lo or (strict_lo and v <= lo)):
            self.fail(f"must be {'>' if strict_lo else '>='} {lo}, got {v}", path)
        if hi is not None and v > hi:
            self.fail(f"must be <= {hi}, got {v}", path)
        return int(v) if integer else float(v)

    def string(self, v, path, choices=None):
        if not isinstance(v, str):
            self.fail(f"expected a string, got {v!r}", path)
        if choices is not None and v not in choices:
            self.fail(f"must be one of {', '.join(choices)}, got {v!r}", path)
        return v

    def index_list(self, v, path):
        """List of ints, or ``{from, to}`` inclusive range."""
        if isinstance(v, dict):
            self.mapping(v, path, ("from", "to"), ("from", "to"))
            a = self.number(v["from"], f"{path}.from", integer=True)
            b = self.number(v["to"], f"{path}.to", integer=True)
            if b < a:
                self.fail("empty range", path)
            return tuple(range(a, b + 1))
        if not isinstance(v, list):
            self.fail("expected a list of integers or a {from, to} range", path)
        return tuple(self.number(x, f"{path}[{j}]", integer=True) for j, x in enumerate(v))


# -- scenario model -----------------------------------------------------------


@dataclass
class RunSpec:
    name: str
    attacks: list = field(default_factory=list)
    raw_attacks: list = field(default_factory=list)


@dataclass
class Scenario:
    """A validated scenario. Paths are absolute after loading."""

    name: str
    seed: int
    problem: dict
    spds: SpdsConfig
    runs: list
    compare: list
    window: tuple | None
    bounds: str
    output: str | None
    log_detail: str
    log_payloads: bool
    source: Path | None = None
    raw: dict = field(default_factory=dict)

    def data_files(self) -> dict:
        """Input files by role, for provenance copies."""
        return {k: Path(v) for k, v in self.problem.items() if k in ("network", "baseline", "baseline_q", "fleet")
                and isinstance(v, (str, Path))}


def _attack(ctx: _Ctx, v, path: str):
    ctx.mapping(v, path, ("kind", "attacker", "omega", "theta", "m", "M", "victims", "t_f", "inner", "eps_s",
                          "goal", "cbar"), ("kind",))
    kind = ctx.string(v["kind"], f"{path}.kind", ATTACK_KINDS)

    def opt(key, default, **kw):
        return ctx.number(v[key], f"{path}.{key}", **kw) if key in v else default

    def only(*keys):
        extra = [k for k in v if k not in ("kind",) + keys]
        if extra:
            ctx.fail(f"not a field of {kind}", f"{path}.{extra[0]}")

    def attacker():
        if "attacker" not in v:
            ctx.fail("missing required key 'attacker'", path)
        return ctx.number(v["attacker"], f"{path}.attacker", lo=0, integer=True)

    omega = opt("omega", 1.0, lo=0, strict_lo=True)
    m = opt("m", 0.2, lo=0, strict_lo=True)
    M = opt("M", 1e5, lo=0, strict_lo=True)
    try:
        if kind == "smooth_charging":
            only("attacker", "omega")
            return SmoothCharging(attacker(), omega)
        if kind == "time_tuning":
            only("attacker", "omega", "theta", "m", "M")
            if "theta" not in v:
                ctx.fail("missing required key 'theta'", path)
            return TimeTuning(attacker(), ctx.index_list(v["theta"], f"{path}.theta"), omega, m, M)
        if kind == "rush_charging":
            only("attacker", "omega", "m", "M")
            # theta is resolved against the attacker's request when the problem is built
            return ("rush", attacker(), omega, m, M)
        if kind == "battery_damage":
            only("victims", "omega", "t_f", "m", "M", "attacker")
            if "victims" not in v:
                ctx.fail("missing required key 'victims'", path)
            return BatteryDamage(ctx.index_list(v["victims"], f"{path}.victims"), omega,
                                 opt("t_f", 2, lo=1, integer=True), m, M,
                                 v.get("attacker"))
        if kind == "stealthy":
            only("inner", "eps_s")
            if "inner" not in v:
                ctx.fail("missing required key 'inner'", path)
            inner = _attack(ctx, v["inner"], f"{path}.inner")
            if isinstance(inner, tuple):
                ctx.fail("rush_charging cannot be wrapped; use time_tuning with an explicit theta", f"{path}.inner")
            return Stealthy(inner, opt("eps_s", None, lo=0))
        if kind == "dual_full":
            only("attacker", "goal", "omega")
            if "goal" not in v:
                ctx.fail("missing required key 'goal'", path)
            goal = _attack(ctx, v["goal"], f"{path}.goal")
            if not isinstance(goal, (SmoothCharging, TimeTuning, BatteryDamage)):
                ctx.fail("goal must be a primal attack", f"{path}.goal")
            return DualFull(attacker(), goal, omega)
        if kind == "dual_power_balance":
            only("attacker", "victims", "omega", "eps_s", "cbar", "goal")
            victims = ctx.index_list(v.get("victims", []), f"{path}.victims")
            cbar = v.get("cbar", "snapshot")
            if isinstance(cbar, list):
                cbar = np.array([ctx.number(x, f"{path}.cbar[{j}]") for j, x in enumerate(cbar)])
            else:
                ctx.string(cbar, f"{path}.cbar", ("snapshot", "goal"))
            goal = None
            if "goal" in v:
                goal = _attack(ctx, v["goal"], f"{path}.goal")
                if not isinstance(goal, (SmoothCharging, TimeTuning, BatteryDamage)):
                    ctx.fail("goal must be a primal attack", f"{path}.goal")
            return DualPowerBalance(attacker(), victims, opt("omega", 0.1, lo=0, strict_lo=True),
                                    opt("eps_s", None, lo=0), cbar, goal)
    except ConfigurationError as exc:
        if isinstance(exc, ScenarioValidationError):
            raise
        ctx.fail(str(exc), path)
    raise AssertionError(kind)  # pragma: no cover


def parse_scenario(text: str, source: str | Path | None = None) -> Scenario:
    """Validate a scenario document. File references stay relative to ``source``."""
    data, lines = load_yaml(text, str(source or "<scenario>"))
    ctx = _Ctx(lines)
    ctx.mapping(data, "", ("name", "seed", "problem", "spds", "attacks", "runs", "compare", "metrics", "bounds",
                           "output", "log"), ("name", "problem"))
    name = ctx.string(data["name"], "name")
    seed = ctx.number(data.get("seed", 0), "seed", lo=0, integer=True)
    base = Path(source).resolve().parent if source is not None else Path.cwd()

    p = ctx.mapping(data["problem"], "problem",
                    ("kind", "network", "baseline", "baseline_q", "fleet", "fleet_generator", "horizon", "dt",
                     "delta", "power_base", "coupling", "b", "windows"), ("kind",))
    kind = ctx.string(p["kind"], "problem.kind", PROBLEM_KINDS)
    prob = {"kind": kind}
    prob["delta"] = ctx.number(p.get("delta", 0.0), "problem.delta", lo=0)
    prob["power_base"] = ctx.number(p.get("power_base", 1.0 if kind == "network" else 10.0), "problem.power_base",
                                    lo=0, strict_lo=True)
    if kind == "network":
        for key in ("network", "baseline"):
            if key not in p:
                ctx.fail(f"missing required key '{key}'", "problem")
        for key in ("network", "baseline", "baseline_q", "fleet"):
            if key in p:
                f = base / ctx.string(p[key], f"problem.{key}")
                if not f.is_file():
                    ctx.fail(f"file not found: {f}", f"problem.{key}")
                prob[key] = str(f)
        if ("fleet" in p) == ("fleet_generator" in p):
            ctx.fail("give exactly one of 'fleet' and 'fleet_generator'", "problem")
        if "fleet_generator" in p:
            g = ctx.mapping(p["fleet_generator"], "problem.fleet_generator", ("seed", "count", "buses"),
                            ("seed", "count"))
            prob["fleet_generator"] = {
                "seed": ctx.number(g["seed"], "problem.fleet_generator.seed", lo=0, integer=True),
                "count": ctx.number(g["count"], "problem.fleet_generator.count", lo=1, integer=True),
                "buses": list(ctx.index_list(g.get("buses", []), "problem.fleet_generator.buses")),
            }
        prob["horizon"] = ctx.number(p.get("horizon", 0), "problem.horizon", lo=1, integer=True) if "horizon" in p else None
        prob["dt"] = ctx.number(p.get("dt", 0.25), "problem.dt", lo=0, strict_lo=True)
    else:
        for key in ("network", "baseline", "fleet", "fleet_generator", "windows"):
            if key in p:
                ctx.fail(f"not used by problem kind {kind}", f"problem.{key}")
        prob["horizon"] = ctx.number(p.get("horizon", 24), "problem.horizon", lo=2, integer=True)
        if kind == "toy_coupled":
            prob["coupling"] = ctx.string(p.get("coupling", "inequality"), "problem.coupling",
                                          ("inequality", "equality"))
            prob["b"] = ctx.number(p["b"], "problem.b", lo=0, strict_lo=True) if "b" in p else None
    if "windows" in p:
        w = ctx.mapping(p["windows"], "problem.windows", tuple(p["windows"]) if isinstance(p["windows"], dict) else ())
        windows = {}
        for k, v in w.items():
            wp = f"problem.windows.{k}"
            if isinstance(k, bool) or not isinstance(k, int):
                ctx.fail("window keys are EV ids", wp)
            if not (isinstance(v, list) and len(v) == 2):
                ctx.fail("expected [start, end) slot indices", wp)
            windows[k] = (ctx.number(v[0], f"{wp}[0]", lo=0, integer=True), ctx.number(v[1], f"{wp}[1]", lo=0, integer=True))
        prob["windows"] = windows

    s = ctx.mapping(data.get("spds", {}), "spds", SPDS_KEYS)
    kw = {}
    for k, v in s.items():
        if k == "adapt_attacker_steps":
            if not isinstance(v, bool):
                ctx.fail("expected true or false", f"spds.{k}")
            kw[k] = v
        elif k in ("max_iter", "record_every"):
            kw[k] = ctx.number(v, f"spds.{k}", lo=0, integer=True)
        elif v is None:
            kw[k] = None
        else:
            kw[k] = ctx.number(v, f"spds.{k}")
    try:
        cfg = SpdsConfig(**kw)
    except ConfigurationError as exc:
        ctx.fail(str(exc), "spds")

    if ("attacks" in data) and ("runs" in data):
        ctx.fail("use either 'attacks' (single run) or 'runs'", "runs")
    runs = []
    if "runs" in data:
        if not isinstance(data["runs"], list) or not data["runs"]:
            ctx.fail("expected a nonempty list of runs", "runs")
        for j, r in enumerate(data["runs"]):
            path = f"runs[{j}]"
            ctx.mapping(r, path, ("name", "attacks"), ("name",))
            rname = ctx.string(r["name"], f"{path}.name")
            if not rname.replace("_", "").replace("-", "").isalnum():
                ctx.fail("run names may contain letters, digits, '-' and '_' only", f"{path}.name")
            if any(x.name == rname for x in runs):
                ctx.fail(f"duplicate run name {rname!r}", f"{path}.name")
            atk = r.get("attacks", []) or []
            if not isinstance(atk, list):
                ctx.fail("expected a list", f"{path}.attacks")
            runs.append(RunSpec(rname, [_attack(ctx, a, f"{path}.attacks[{i}]") for i, a in enumerate(atk)], atk))
    else:
        atk = data.get("attacks", []) or []
        if not isinstance(atk, list):
            ctx.fail("expected a list", "attacks")
        runs.append(RunSpec("main", [_attack(ctx, a, f"attacks[{i}]") for i, a in enumerate(atk)], atk))

    compare = []
    for j, pair in enumerate(data.get("compare", []) or []):
        path = f"compare[{j}]"
        if not (isinstance(pair, list) and len(pair) == 2 and all(isinstance(x, str) for x in pair)):
            ctx.fail("expected a pair of run names", path)
        for x in pair:
            if not any(r.name == x for r in runs):
                ctx.fail(f"unknown run {x!r}", path)
        compare.append(tuple(pair))

    window = None
    if "metrics" in data:
        mm = ctx.mapping(data["metrics"], "metrics", ("window",))
        if "window" in mm:
            w = mm["window"]
            if not (isinstance(w, list) and len(w) == 2):
                ctx.fail("expected [start, end)", "metrics.window")
            a = ctx.number(w[0], "metrics.window[0]", lo=0, integer=True)
            b = ctx.number(w[1], "metrics.window[1]", lo=0, integer=True)
            if b <= a:
                ctx.fail("window end must exceed its start", "metrics.window")
            window = (a, b)

    bounds = data.get("bounds", "auto")
    if isinstance(bounds, bool):
        bounds = "always" if bounds else "never"
    bounds = ctx.string(bounds, "bounds", ("auto", "always", "never"))
    output = ctx.string(data["output"], "output") if "output" in data else None
    lg = ctx.mapping(data.get("log", {}), "log", ("detail", "payloads"))
    detail = ctx.string(lg.get("detail", "mutations"), "log.detail", ("messages", "mutations"))
    payloads = lg.get("payloads", False)
    if not isinstance(payloads, bool):
        ctx.fail("expected true or false", "log.payloads")
    return Scenario(name, seed, prob, cfg, runs, compare, window, bounds, output, detail, payloads,
                    Path(source).resolve() if source is not None else None, data)


def load_scenario(path) -> Scenario:
    """Read and validate a scenario file; bare names resolve to bundled scenarios."""
    path = resolve_scenario_path(path)
    return parse_scenario(path.read_text(encoding="utf-8"), path)


def resolve_scenario_path(path) -> Path:
    p = Path(path)
    if p.is_file():
        return p
    for cand in (SCENARIO_DIR / p.name, SCENARIO_DIR / f"{p.name}.yaml"):
        if cand.is_file():
            return cand
    raise ScenarioValidationError(f"scenario file not found: {path}")


def bundled_scenarios() -> list[str]:
    return sorted(p.stem for p in SCENARIO_DIR.glob("*.yaml"))


# -- assembly -----------------------------------------------------------------


def build_problem(sc: Scenario) -> ValleyFillingProblem:
    """Assemble the problem a scenario describes."""
    from . import datagen

    p = sc.problem
    if p["kind"] == "toy_coupled":
        return datagen.toy_coupled_problem(p["delta"], p["coupling"] == "equality", p.get("b"),
                                           p["power_base"], p["horizon"])
    if p["kind"] == "bounds5":
        return datagen.bounds_instance(p["delta"], T=p["horizon"], power_base=p["power_base"])
    net = load_network(p["network"])
    base = load_baseline(p["baseline"], p.get("baseline_q"), n=net.n)
    if p.get("horizon") is not None and p["horizon"] != base.T:
        raise ScenarioValidationError(f"baseline has {base.T} time steps, horizon says {p['horizon']}",
                                      "problem.horizon")
    if "fleet" in p:
        fleet = load_fleet(p["fleet"], dt=p["dt"])
    else:
        g = p["fleet_generator"]
        buses = g["buses"] or list(range(1, net.n))
        fleet = generate_fleet(g["seed"], g["count"], buses, dt=p["dt"], horizon=base.T)
    return ValleyFillingProblem.from_network(net, fleet, base, delta=p["delta"], power_base=p["power_base"],
                                             windows=p.get("windows"), meta={"name": sc.name})


def resolve_attacks(specs, prob: ValleyFillingProblem) -> list:
    """Turn deferred entries (rush charging) into specs and validate all of them."""
    out = []
    for spec in specs:
        if isinstance(spec, tuple) and spec[0] == "rush":
            _, att, omega, m, M = spec
            i = prob.ids.index(att) if att in prob.ids else None
            if i is None:
                raise ConfigurationError(f"attack refers to unknown EV id {att!r}")
            theta = rush_charging_theta(prob.coeff[i], prob.rhs[i], prob.upper[i])
            spec = TimeTuning(att, theta, omega, m, M)
        validate_attack(spec, prob)
        out.append(spec)
    return out


def with_omega(spec, omega: float):
    """Copy of a primal spec (optionally wrapped) with a new ``omega``."""
    from dataclasses import replace

    if isinstance(spec, Stealthy):
        return replace(spec, inner=with_omega(spec.inner, omega))
    return replace(spec, omega=omega)


def normalized(sc: Scenario, inputs: dict[str, str] | None = None) -> dict:
    """JSON-ready scenario with input paths replaced by ``inputs`` names."""
    raw = copy.deepcopy(sc.raw)
    if inputs:
        for k, v in inputs.items():
            raw["problem"][k] = v
    return raw
