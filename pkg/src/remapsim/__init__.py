"""Simulator of page-remapping attacks on encrypted virtual machines."""

from .errors import (CalibrationError, ExtractionImpossible, IntegrityFault, PlanError,
                     RequestFailed, ScenarioError, SimulationError, TargetLost)
from .guest import GuestVm
from .identify import IdentificationState, identify, step
from .memory import PhysicalMemory, SecondLevelTable
from .scenario import VmScenario, load_scenario

__all__ = [
    "CalibrationError", "ExtractionImpossible", "GuestVm", "IdentificationState",
    "IntegrityFault", "PhysicalMemory", "PlanError", "RequestFailed", "ScenarioError",
    "SecondLevelTable", "SimulationError", "TargetLost", "VmScenario", "identify",
    "load_scenario", "step",
]
__version__ = "0.1.0"
