"""Goal-oriented sensor placement and steering for contaminant source inversion."""
import os as _os

# OEDSTEER_THREADS caps BLAS/OpenMP threads; effective when this package is
# imported before numpy (as the console script does).
_threads = _os.environ.get("OEDSTEER_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .domain import (
    Grid, QoiSpec, RegionRect, ScalarField, WindField, build_grid, gaussian_blob,
    potential_flow_wind, region_indicator,
)
from .numcore import ContractError, ConvergenceError
from .prior import BiLaplacianPrior
from .transport import CandidateSet, ForwardMap, Observations, TransportConfig

__version__ = "0.1.0"

__all__ = [
    "Grid", "QoiSpec", "RegionRect", "ScalarField", "WindField", "build_grid", "gaussian_blob",
    "potential_flow_wind", "region_indicator", "ContractError", "ConvergenceError",
    "BiLaplacianPrior", "CandidateSet", "ForwardMap", "Observations", "TransportConfig",
]
