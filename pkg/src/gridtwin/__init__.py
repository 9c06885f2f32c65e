"""Power-flow digital-twin toolkit: analytic and data-driven Jacobians, bias analytics."""

__version__ = "0.1.0"

from .errors import GridTwinError  # noqa: E402
from .network import Network, build_ybus, load_case, parse_case  # noqa: E402
from .powerflow import analytic_jacobian, solve_powerflow  # noqa: E402

__all__ = ["GridTwinError", "Network", "analytic_jacobian", "build_ybus", "load_case",
           "parse_case", "solve_powerflow", "__version__"]
