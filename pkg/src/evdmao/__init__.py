"""Distributed EV-charging optimization under purpose-driven algorithmic attacks.

The package models a LinDistFlow feeder (:mod:`netmodel`), an EV fleet
(:mod:`fleet`), the valley-filling problem (:mod:`problem`), the SPDS solver
(:mod:`spds`) with a message bus (:mod:`comms`), the attack engine
(:mod:`attacks`) and bound/metric analysis (:mod:`analysis`).
"""

from .analysis import BoundsReport, WeakSharpReport, bounds_report, scenario_metrics, weak_sharp_check
from .attacks import (
    BatteryDamage,
    DualFull,
    DualPowerBalance,
    SmoothCharging,
    Stealthy,
    TimeTuning,
    attack_goals,
)
from .comms import MessageBus, RoundLog
from .exceptions import (
    ConfigurationError,
    EvdmaoError,
    InfeasibleError,
    ProtocolError,
    ScenarioValidationError,
)
from .fleet import EvSpec, FeasibleSet, energy_requirement, project_feasible
from .netmodel import BaselineProfile, DistributionNetwork, InjectionModel, build_injection_model, nodal_voltages
from .problem import DualState, QuadraticGoal, ValleyFillingProblem
from .reference import ReferenceSolver, reference_solve
from .scenario import Scenario, build_problem, load_scenario, parse_scenario
from .spds import SPDSSolver, SpdsConfig, run

__version__ = "0.1.0"

__all__ = [
    "BaselineProfile",
    "BatteryDamage",
    "BoundsReport",
    "ConfigurationError",
    "DistributionNetwork",
    "DualFull",
    "DualPowerBalance",
    "DualState",
    "EvSpec",
    "EvdmaoError",
    "FeasibleSet",
    "InfeasibleError",
    "InjectionModel",
    "MessageBus",
    "ProtocolError",
    "QuadraticGoal",
    "ReferenceSolver",
    "RoundLog",
    "SPDSSolver",
    "Scenario",
    "ScenarioValidationError",
    "SmoothCharging",
    "SpdsConfig",
    "Stealthy",
    "TimeTuning",
    "ValleyFillingProblem",
    "WeakSharpReport",
    "attack_goals",
    "bounds_report",
    "build_injection_model",
    "build_problem",
    "energy_requirement",
    "load_scenario",
    "nodal_voltages",
    "parse_scenario",
    "project_feasible",
    "reference_solve",
    "run",
    "scenario_metrics",
    "weak_sharp_check",
]
