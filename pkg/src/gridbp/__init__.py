"""Belief-propagation state estimation for electric power systems."""

from importlib import resources

from .grid import Bus, Branch, Grid, admittance_matrix, parse_case
from .state import StateVector
from .powerflow import InjectionSpec, solve_power_flow
from .measurements import (Measurement, MeasurementPlan, MeasurementSet,
                           eval_h, eval_jacobian_row, generate_measurements)
from .factorgraph import FactorGraph, build_dc_graph, build_gn_graph
from .dcbp import BpRunResult, GaussianMessage, ScheduleConfig, run_dc_bp
from .reference import (EstimationResult, dc_wls_estimate, gauss_newton, lnrt,
                        mad, solve_linear_wls, wrss)

__all__ = [
    "Bus", "Branch", "Grid", "admittance_matrix", "parse_case",
    "StateVector", "InjectionSpec", "solve_power_flow",
    "Measurement", "MeasurementPlan", "MeasurementSet",
    "eval_h", "eval_jacobian_row", "generate_measurements",
    "FactorGraph", "build_dc_graph", "build_gn_graph",
    "BpRunResult", "GaussianMessage", "ScheduleConfig", "run_dc_bp",
    "EstimationResult", "dc_wls_estimate", "gauss_newton", "lnrt",
    "mad", "solve_linear_wls", "wrss",
    "load_case",
]


def load_case(name: str) -> Grid:
    """Load a bundled case file by name (case14, case30, demo3bus) or path."""
    if name.endswith(".m") or "/" in name:
        with open(name, "r", encoding="utf-8") as fh:
            return parse_case(fh.read())
    ref = resources.files("gridbp.cases").joinpath(f"{name}.m")
    return parse_case(ref.read_text(encoding="utf-8"))
