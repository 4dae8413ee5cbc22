"""Volume-adjustment surgery and perimeter estimates for weighted clusters on grids.

An ``m``-cluster is a labelled grid; ``f`` weights volume and ``g(x, nu)``
weights perimeter. The package changes a chamber's weighted volume by a small
``eps`` at a perimeter cost of order ``|eps|^beta``, absorbs foreign
inclusions near two-phase points, and checks the derived constants.
"""

from .analysis import CperCurve, RequiredK, TruncationTrace, boundedness_check, cper_sweep, required_K
from .density import (
    DensityField, beta_exponent, constant, from_config, from_expressions, load_density, local_bounds,
    modulus_of_continuity,
)
from .errors import EpsBetaError, PipelineError
from .grid import ColumnProfile, GridCluster, relabel_cells
from .infiltration import InfiltrationReport, density_zero_radius, infiltrate
from .io import load_cluster, save_cluster
from .measures import MeasureReport, cluster_perimeter, weighted_volume
from .surgery import (
    AdjustReport, BallReport, SurgeryPlan, TransferResult, adjust_in_ball, adjust_single_chamber, search_cube,
    transfer, transfer_volume, verify_transfer_bound,
)

__version__ = "0.1.0"

__all__ = [
    "AdjustReport", "BallReport", "ColumnProfile", "CperCurve", "DensityField", "EpsBetaError", "GridCluster",
    "InfiltrationReport", "MeasureReport", "PipelineError", "RequiredK", "SurgeryPlan", "TransferResult",
    "TruncationTrace", "adjust_in_ball", "adjust_single_chamber", "beta_exponent", "boundedness_check",
    "cluster_perimeter", "constant", "cper_sweep", "density_zero_radius", "from_config", "from_expressions",
    "infiltrate", "load_cluster", "load_density", "local_bounds", "modulus_of_continuity", "relabel_cells",
    "required_K", "save_cluster", "search_cube", "transfer", "transfer_volume", "verify_transfer_bound",
    "weighted_volume",
]
