"""Tuning and certification toolkit for passivity-based control of port-Hamiltonian mechanical systems."""

from .closedloop import ControllerGains, TargetDynamics, build_target, custom_target, kint_admissible
from .errors import PBCError
from .lyap import EsIssReport, es_iss_report
from .model import MechanicalModel, Region, build_model
from .sim import SimConfig, simulate
from .spectral import spectral_report

__version__ = "0.1.0"

__all__ = [
    "ControllerGains",
    "EsIssReport",
    "MechanicalModel",
    "PBCError",
    "Region",
    "SimConfig",
    "TargetDynamics",
    "build_model",
    "build_target",
    "custom_target",
    "es_iss_report",
    "kint_admissible",
    "simulate",
    "spectral_report",
]
