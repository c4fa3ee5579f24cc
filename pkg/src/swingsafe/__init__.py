"""Bilayered frequency control of swing-equation power networks.

A sampled MPC layer, wrapped in a stability filter and a low-pass filter,
shapes the transient; a real-time top layer keeps selected bus frequencies
inside their safety band. The MPC program can be solved centrally or by
per-bus and per-line agents running projected saddle-point dynamics.
"""

from swingsafe.casefile import ScenarioConfig, bundled_case, dump_qp, load_case, load_qp
from swingsafe.controller import Controller, ControllerConfig, mpc_sample
from swingsafe.dynamics import SimulationSettings, SystemState, Trajectory, simulate
from swingsafe.netmodel import DisturbanceProfile, PowerNetwork, check_equilibrium_condition, compute_equilibrium

__version__ = "0.1.0"

__all__ = [
    "Controller",
    "ControllerConfig",
    "DisturbanceProfile",
    "PowerNetwork",
    "ScenarioConfig",
    "SimulationSettings",
    "SystemState",
    "Trajectory",
    "bundled_case",
    "check_equilibrium_condition",
    "compute_equilibrium",
    "dump_qp",
    "load_case",
    "load_qp",
    "mpc_sample",
    "simulate",
]
