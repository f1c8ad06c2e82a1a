"""Multi-spike solutions of ε²Δu - u + u^p = 0 with Neumann boundary conditions."""
from .ansatz import Configuration, SpikeCache, projection_set, star_norm
from .config import RunConfig
from .domain import Domain, Grid, build_grid
from .energy import energy, interaction_terms, reduced_energy
from .errors import (
    ContractionFailed,
    InfeasibleConfiguration,
    LinearSolveFailed,
    MeshTooCoarse,
    NewtonDiverged,
    NoClearance,
    PointOutsideDomain,
    SaddleSingular,
    SpikeError,
    ToleranceNotMet,
)
from .ground_state import GroundState, solve_ground_state
from .reduction import ReducedSolution, reduce
from .search import local_maximize, run_ladder
from .verify import certify, newton_polish

__all__ = [
    "Configuration", "ContractionFailed", "Domain", "Grid", "GroundState",
    "InfeasibleConfiguration", "LinearSolveFailed", "MeshTooCoarse", "NewtonDiverged",
    "NoClearance", "PointOutsideDomain", "ReducedSolution", "RunConfig", "SaddleSingular",
    "SpikeCache", "SpikeError", "ToleranceNotMet", "build_grid", "certify", "energy",
    "interaction_terms", "local_maximize", "newton_polish", "projection_set", "reduce",
    "reduced_energy", "run_ladder", "solve_ground_state", "star_norm",
]
