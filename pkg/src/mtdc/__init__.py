"""Voltage droop and distributed averaging control of MTDC grids.

Grid models and Laplacians live in :mod:`mtdc.grid`, control laws and the
closed-loop assembly in :mod:`mtdc.controllers`, time integration in
:mod:`mtdc.sim` and stability certificates and bounds in
:mod:`mtdc.analysis`.
"""
from .analysis import (
    StabilityReport,
    certify,
    certify_avg_I_II,
    certify_avg_III,
    droop_asymptotics,
    hurwitz_verdict,
    stability_report,
    voltage_difference_bound,
)
from .controllers import (
    ClosedLoopSystem,
    ControllerSpec,
    Variant,
    assemble_closed_loop,
    control_output,
    optimal_dispatch,
    voltage_offset_residual,
)
from .grid import CommGraph, GridTopology, TopologyError, build_conductance_laplacian, four_bus_ring, laplacian_spectrum, validate_topology
from .sim import SimScenario, Trajectory, simulate, solve_equilibrium, steady_state_metrics

__version__ = "0.1.0"
