"""Implicit P2 finite element solver for incompressible two-phase flow.

Level-set interface capture with balanced-force surface tension,
residual-based multiscale stabilization, geometric reinitialization,
and anisotropic metric-driven mesh adaption.

Submodule imports are deferred so the command line can pin thread
counts before the numerics stack loads.
"""

from importlib import import_module

__version__ = "0.1.0"

_EXPORTS = {
    "mesh": [
        "Mesh2D", "MetricField", "SpatialIndex", "build_rectangle_mesh",
        "locate_point", "metric_edge_length", "write_vtk", "write_metric_vtk",
    ],
    "fem": [
        "QuadratureRule", "default_quadrature", "element_tables",
        "interpolate", "shape_eval",
    ],
    "levelset": [
        "FluidPair", "InterfaceMesh", "blend_properties", "csf_integrand",
        "curvature", "delta_eps", "extract_interface", "heaviside_eps",
        "reinitialize",
    ],
    "solver": [
        "AdvanceResult", "BoundaryConditions", "CoupledState", "NewtonResult",
        "SolverConfig", "TimeStepUnderflowError", "advance_increment",
        "assemble_jacobian_nd", "assemble_residual", "fine_scale",
        "newton_solve", "stabilization_taus",
    ],
    "adaption": [
        "MetricField", "RecoveredDerivatives", "SensorField", "adapt_mesh",
        "bound_matrix_Q", "build_sensor", "metric_M", "metric_from_sensor",
        "spr_fit", "transfer_fields", "transfer_state",
    ],
    "bench": [
        "BenchmarkCase", "TimeSeries", "bubble_quantities", "make_case",
        "parse_config", "relative_L2_time_error", "run_bubble",
        "run_static_disc", "volume_error",
    ],
}

_ATTR_TO_MODULE = {}
for _mod, _names in _EXPORTS.items():
    for _name in _names:
        _ATTR_TO_MODULE.setdefault(_name, _mod)

__all__ = sorted(_ATTR_TO_MODULE) + sorted(_EXPORTS)


def __getattr__(name):
    if name in _EXPORTS:
        return import_module(f".{name}", __name__)
    mod = _ATTR_TO_MODULE.get(name)
    if mod is None:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
    return getattr(import_module(f".{mod}", __name__), name)


def __dir__():
    return sorted(set(globals()) | set(__all__))
