"""Checks that a reduced solution at a maximizer is a genuine k-spike solution."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse import linalg as spla

from .ansatz import SpikeCache
from .domain import Grid
from .errors import NewtonDiverged
from .ground_state import GroundState
from .reduction import ReducedSolution, positive_power, reduce

C_MAX = 1e-6
RESIDUAL_MAX = 1e-10
STAGNATION_LEVEL = 1e-9


@dataclass
class MultiplierAudit:
    dominance_ratio: float
    c_max: float
    matrix: np.ndarray = field(repr=False)


def multiplier_audit(reduced: ReducedSolution, gs: GroundState, step: float | None = None,
                     cache: SpikeCache | None = None, **reduce_kw) -> MultiplierAudit:
    """Matrix of ∫ Z_sl ∂u/∂Q_ij (u = W + φ) by central differences in Q.

    The dominance ratio is min |diagonal| over the largest off-diagonal row sum
    (inf for a single spike in one dimension).
    """
    config = reduced.config
    grid = reduced.phi.grid
    n = grid.dim
    kn = config.k * n
    c_max = float(np.max(np.abs(reduced.c))) if reduced.c.size else 0.0
    if kn == 0:
        return MultiplierAudit(np.inf, c_max, np.zeros((0, 0)))
    step = step or grid.h * config.epsilon
    cache = cache if cache is not None else SpikeCache(gs, grid)
    reduce_kw.setdefault("rho_min", None)
    reduce_kw.setdefault("check_feasible", False)
    ZM = reduced.system.projections.flat * grid.weights
    A = np.zeros((kn, kn))
    for col in range(kn):
        i, j = divmod(col, n)
        cols = []
        for sign in (1.0, -1.0):
            pts = config.points.copy()
            pts[i, j] += sign * step
            cols.append(reduce(gs, grid, config.with_points(pts), cache=cache, **reduce_kw).u)
        A[:, col] = ZM @ ((cols[0] - cols[1]) / (2 * step))
    diag = np.abs(np.diag(A))
    off = np.abs(A - np.diag(np.diag(A))).sum(axis=1)
    ratio = float(diag.min() / off.max()) if off.max() > 0 else np.inf
    return MultiplierAudit(ratio, c_max, A)


@dataclass
class PolishResult:
    u: np.ndarray = field(repr=False)
    residual: float
    iterations: int
    residual_trace: list


def pde_residual(grid: Grid, u, p: float) -> np.ndarray:
    return grid.laplacian(u) - u + positive_power(u, p)


def linearization(grid: Grid, u, p: float) -> sparse.csc_matrix:
    """Symmetric weak form of the Jacobian: -S + M diag(p u₊^{p-1} - 1)."""
    pot = p * np.maximum(u, 0) ** (p - 1) - 1
    return (-grid.stiffness + sparse.diags(grid.weights * pot)).tocsc()


def soft_modes(grid: Grid, jac, count: int, below: float):
    """M-orthonormal eigenvectors of the linearization with |μ| < below among the
    `count` eigenvalues closest to zero.  Returns (eigenvalues, vectors)."""
    count = min(count, grid.n_nodes - 2)
    if count <= 0:
        return np.zeros(0), np.zeros((grid.n_nodes, 0))
    mass = sparse.diags(grid.weights).tocsc()
    try:
        mu, vec = spla.eigsh(jac, k=count, M=mass, sigma=1e-6, which="LM", tol=1e-12)
    except (RuntimeError, spla.ArpackError) as exc:
        raise NewtonDiverged(f"eigen-solve of the linearization failed: {exc}") from exc
    keep = np.abs(mu) < below
    return mu[keep], vec[:, keep]


def newton_polish(grid: Grid, u_init, p: float, tol: float = 1e-11, max_iter: int = 20,
                  soft_below: float = 1e-6) -> PolishResult:
    """Newton's method on Δ_h u - u + u₊^p = 0 with the Neumann condition.

    Translation modes whose eigenvalue is below `soft_below` are frozen: the
    step is kept M-orthogonal to them, because the restoring force along them
    sits under round-off and a plain Newton step would be dominated by noise.
    The residual may rise on the first step while spikes shift to their exact
    positions.  Stops when the max-norm residual is below `tol`, or once it has
    stalled below STAGNATION_LEVEL (the round-off floor of Δ_h).
    """
    u = np.array(u_init, dtype=float)
    F = pde_residual(grid, u, p)
    trace = [float(np.max(np.abs(F)))]
    if trace[-1] < tol:
        return PolishResult(u=u, residual=trace[-1], iterations=0, residual_trace=trace)
    n_peaks, _ = count_local_maxima(grid, u)
    jac = linearization(grid, u, p)
    _, V = soft_modes(grid, jac, grid.dim * n_peaks + 1, soft_below)
    MV = V * grid.weights[:, None]
    m = V.shape[1]
    it = 0
    while trace[-1] >= tol:
        if it == max_iter:
            raise NewtonDiverged(f"residual {trace[-1]:.3e} after {max_iter} iterations")
        it += 1
        if it > 1:
            jac = linearization(grid, u, p)
        rhs = -grid.weights * F
        try:
            if m:
                border = sparse.csc_matrix(MV)
                block = sparse.bmat([[jac, border], [border.T, None]]).tocsc()
                delta = spla.splu(block).solve(np.concatenate([rhs, np.zeros(m)]))[:-m]
            else:
                delta = spla.splu(jac).solve(rhs)
        except RuntimeError as exc:
            raise NewtonDiverged(str(exc)) from exc
        if not np.all(np.isfinite(delta)):
            raise NewtonDiverged("singular Newton system")
        u = u + delta
        F = pde_residual(grid, u, p)
        trace.append(float(np.max(np.abs(F))))
        if not np.isfinite(trace[-1]):
            raise NewtonDiverged("residual became non-finite")
        if trace[-1] < STAGNATION_LEVEL and trace[-1] > 0.5 * trace[-2]:
            break
    return PolishResult(u=u, residual=trace[-1], iterations=it, residual_trace=trace)


def count_local_maxima(grid: Grid, u, rtol: float = 1e-12):
    """Strict local maxima over the grid adjacency.

    Neighbouring nodes whose values agree to `rtol` are merged into a plateau; a
    plateau counts once when every node adjacent to it is strictly lower.
    Returns (count, locations) with locations the plateau centroids in rescaled
    coordinates, sorted lexicographically.
    """
    u = np.asarray(u, dtype=float)
    tol = rtol * max(1.0, float(np.max(np.abs(u))))
    adj = sparse.coo_matrix(grid.neighbors)
    a, b = adj.row, adj.col
    tie = np.abs(u[a] - u[b]) <= tol
    n = u.size
    ties = sparse.csr_matrix((np.ones(tie.sum()), (a[tie], b[tie])), shape=(n, n))
    _, labels = csgraph.connected_components(ties, directed=False)
    # a plateau is disqualified by any strictly higher external neighbour or if it
    # has no external neighbour at all
    higher = np.zeros(labels.max() + 1, dtype=bool)
    external = np.zeros(labels.max() + 1, dtype=bool)
    ext = ~tie
    np.logical_or.at(higher, labels[a[ext]], u[b[ext]] > u[a[ext]])
    np.logical_or.at(external, labels[a[ext]], True)
    good = external & ~higher
    locs = []
    for lab in np.nonzero(good)[0]:
        locs.append(grid.coords[labels == lab].mean(axis=0))
    locs.sort(key=lambda x: tuple(x))
    return len(locs), np.array(locs).reshape(-1, grid.dim)


@dataclass
class SolutionCertificate:
    k: int
    c_max: float
    residual: float
    newton_iterations: int
    count: int
    locations: np.ndarray = field(repr=False)
    location_error: float
    min_u: float
    dominance_ratio: float
    count_before_polish: int
    c_limit: float = C_MAX

    @property
    def checks(self) -> dict:
        return {
            "residual": self.residual < RESIDUAL_MAX,
            "multipliers": self.c_max < self.c_limit,
            "count": self.count == self.k,
            "positivity": self.min_u > 0,
        }

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_dict(self) -> dict:
        return {
            "k": self.k, "c_max": self.c_max, "residual": self.residual,
            "newton_iterations": self.newton_iterations, "count": self.count,
            "locations": self.locations.tolist(), "location_error": self.location_error,
            "min_u": self.min_u, "dominance_ratio": self.dominance_ratio,
            "count_before_polish": self.count_before_polish, "c_limit": self.c_limit,
            "checks": self.checks, "passed": self.passed,
        }


def certify(reduced: ReducedSolution, gs: GroundState, audit: bool = True,
            cache: SpikeCache | None = None, newton_tol: float = 1e-11,
            c_limit: float = C_MAX, **reduce_kw) -> SolutionCertificate:
    grid = reduced.phi.grid
    config = reduced.config
    before, _ = count_local_maxima(grid, reduced.u)
    try:
        pol = newton_polish(grid, reduced.u, gs.p, tol=newton_tol)
        u, residual, iters = pol.u, pol.residual, pol.iterations
    except NewtonDiverged:
        u, residual, iters = reduced.u, np.inf, -1
    count, locs = count_local_maxima(grid, u)
    centres = config.rescaled()
    if count and config.k:
        dist = np.linalg.norm(locs[:, None, :] - centres[None, :, :], axis=-1)
        loc_err = float(dist.min(axis=0).max()) if count >= config.k else np.inf
    else:
        loc_err = 0.0 if count == config.k else np.inf
    ratio = np.nan
    if audit:
        ratio = multiplier_audit(reduced, gs, cache=cache, **reduce_kw).dominance_ratio
    c_max = float(np.max(np.abs(reduced.c))) if reduced.c.size else 0.0
    return SolutionCertificate(
        k=config.k, c_max=c_max, residual=residual, newton_iterations=iters, count=count,
        locations=locs, location_error=loc_err, min_u=float(np.min(u)), dominance_ratio=ratio,
        count_before_polish=before, c_limit=c_limit,
    )
