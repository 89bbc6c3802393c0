"""Fleet-scale silent data corruption testing simulator.

Two detection methods are modelled side by side on one simulated fleet:
out-of-production testing during maintenance windows (``fleetscanner``) and
always-on millisecond test slices co-located with workloads (``ripple``).
"""

from ._accel import USE_NUMBA, backend_name
from .analytics import (CoverageReport, DetectionSets, EmptyUnion, build_report, coverage_partition, emit_report,
                        time_to_fraction)
from .config import ParseError, SimConfig, ValidationError, config_from_dict, load_config
from .model import DefectClass, DefectSpec, Machine, MachineState, sample_fleet
from .sim import RunResult, Simulation, run

__version__ = "0.1.0"

__all__ = [
    "USE_NUMBA", "backend_name", "CoverageReport", "DetectionSets", "EmptyUnion", "build_report",
    "coverage_partition", "emit_report", "time_to_fraction", "ParseError", "SimConfig", "ValidationError",
    "config_from_dict", "load_config", "DefectClass", "DefectSpec", "Machine", "MachineState", "sample_fleet",
    "RunResult", "Simulation", "run", "__version__",
]
