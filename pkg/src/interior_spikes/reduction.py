"""Projected linear solves and the nonlinear fixed point for the correction φ.

With W the sum of corrected spikes and u = W + φ, the equation
Δu - u + u₊^p = Σ c_ij Z_ij with φ orthogonal to every Z_ij becomes

    L φ = -S - N(φ) + Σ c_ij Z_ij,   L = Δ_h - 1 + p W₊^{p-1},

where S is the error of the ansatz and N the superlinear remainder.  One bordered
sparse factorization per configuration realizes the projected inverse of L.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from .ansatz import (
    Configuration, ProjectionSet, SpikeCache, SpikeField, cutoff_profile, multi_spike_sum,
    projection_set, star_norm, support_radius, weight_field,
)
from .domain import Grid
from .errors import ContractionFailed, LinearSolveFailed, SaddleSingular
from .ground_state import GroundState

TOL_FP = 1e-10
TOL_ORTH = 1e-9
MAX_ITER = 60
RHO_MIN = 8.0
GRAM_COND_MAX = 1e12


def positive_power(u, p):
    return np.maximum(u, 0.0) ** p


def nonlinear_remainder(w_field, phi, p: float) -> np.ndarray:
    """N(φ) = (w+φ)₊^p - w₊^p - p w₊^{p-1} φ, pointwise."""
    w = np.asarray(getattr(w_field, "values", w_field), dtype=float)
    phi = np.asarray(getattr(phi, "values", phi), dtype=float)
    wp = np.maximum(w, 0.0)
    return positive_power(w + phi, p) - wp**p - p * wp ** (p - 1) * phi


@dataclass(eq=False)
class ProjectedSystem:
    """Bordered system [[A, B], [Bᵀ, 0]] with A = M L and B = M Zᵀ.

    The unknowns are (φ, -c); the sign flip keeps the matrix symmetric.
    """

    grid: Grid
    projections: ProjectionSet
    potential: np.ndarray
    _lu: object = field(default=None, repr=False)

    @classmethod
    def assemble(cls, grid: Grid, projections: ProjectionSet, base: np.ndarray, p: float):
        potential = p * np.maximum(base, 0.0) ** (p - 1)
        return cls(grid=grid, projections=projections, potential=potential)

    @property
    def n_constraints(self) -> int:
        return self.projections.flat.shape[0]

    @property
    def operator(self) -> sparse.csr_matrix:
        """M L as a sparse matrix."""
        g = self.grid
        return (-g.stiffness + sparse.diags(g.weights * (self.potential - 1.0))).tocsr()

    def apply_L(self, phi) -> np.ndarray:
        return self.grid.laplacian(phi) - phi + self.potential * phi

    def factorize(self):
        if self._lu is not None:
            return self._lu
        F = self.projections.flat
        m = F.shape[0]
        if m:
            gram = self.projections.gram()
            cond = np.linalg.cond(gram)
            if not np.isfinite(cond) or cond > GRAM_COND_MAX:
                raise SaddleSingular(f"projection Gram matrix is singular (cond={cond:.3e})")
        B = sparse.csr_matrix(F * self.grid.weights).T
        big = sparse.bmat([[self.operator, B], [B.T, None]], format="csc")
        if m == 0:
            big = self.operator.tocsc()
        try:
            self._lu = spla.splu(big)
        except RuntimeError as exc:
            if m:
                raise SaddleSingular(str(exc)) from exc
            raise LinearSolveFailed(str(exc)) from exc
        return self._lu

    def solve(self, h) -> tuple[np.ndarray, np.ndarray]:
        """φ and c with L φ = h + Σ c_ij Z_ij and φ orthogonal to every Z_ij."""
        h = np.asarray(getattr(h, "values", h), dtype=float)
        lu = self.factorize()
        n = self.grid.n_nodes
        rhs = np.concatenate([self.grid.weights * h, np.zeros(self.n_constraints)])
        sol = lu.solve(rhs)
        if not np.all(np.isfinite(sol)):
            raise LinearSolveFailed("non-finite solution of the bordered system")
        phi = sol[:n]
        c = -sol[n:].reshape(self.projections.k, self.grid.dim) if self.n_constraints else \
            np.zeros((self.projections.k, self.grid.dim))
        return phi, c

    def residual(self, phi, c, h) -> float:
        """Max norm of L φ - h - Σ c_ij Z_ij."""
        r = self.apply_L(phi) - h
        if self.n_constraints:
            r = r - c.ravel() @ self.projections.flat
        return float(np.max(np.abs(r)))

    def orthogonality_defect(self, phi) -> float:
        if not self.n_constraints:
            return 0.0
        return float(np.max(np.abs((self.projections.flat * self.grid.weights) @ phi)))


def build_system(gs: GroundState, grid: Grid, config: Configuration,
                 base: np.ndarray | None = None,
                 cache: SpikeCache | None = None) -> ProjectedSystem:
    if base is None:
        base = multi_spike_sum(gs, grid, config, cache)[0].values
    return ProjectedSystem.assemble(grid, projection_set(gs, grid, config), base, gs.p)


def solve_projected_linear(system: ProjectedSystem, h_field):
    return system.solve(h_field)


def error_field(gs: GroundState, grid: Grid, config: Configuration,
                cache: SpikeCache | None = None) -> SpikeField:
    """Error of the ansatz, Δ_h W - W + W₊^p, which equals W₊^p - Σ w_i^p because
    each corrected spike solves its Helmholtz problem exactly."""
    if config.k == 0:
        return SpikeField(np.zeros(grid.n_nodes), "error", grid)
    total, parts = multi_spike_sum(gs, grid, config, cache)
    sources = sum(s.free**gs.p for s in parts)
    return SpikeField(positive_power(total.values, gs.p) - sources, "error", grid)


@dataclass(eq=False)
class ReducedSolution:
    phi: SpikeField
    c: np.ndarray
    star_norm_phi: float
    iterations: int
    residual_trace: list
    orthogonality_defect: float
    base: SpikeField = field(repr=False)
    system: ProjectedSystem = field(repr=False)
    config: Configuration = field(repr=False)
    error_star_norm: float = 0.0
    stability_constant: float = 0.0
    orthogonality_trace: list = field(default_factory=list)

    @property
    def u(self) -> np.ndarray:
        return self.base.values + self.phi.values

    def pde_residual(self, p: float) -> float:
        """Max norm of Δ_h u - u + u₊^p - Σ c_ij Z_ij."""
        g = self.phi.grid
        u = self.u
        r = g.laplacian(u) - u + positive_power(u, p)
        if self.c.size:
            r = r - self.c.ravel() @ self.system.projections.flat
        return float(np.max(np.abs(r)))

    def to_dict(self) -> dict:
        return {
            "c_ij": self.c.tolist(),
            "star_norm": self.star_norm_phi,
            "iterations": self.iterations,
            "residual_trace": list(self.residual_trace),
            "orthogonality_defect": self.orthogonality_defect,
        }


def reduce(gs: GroundState, grid: Grid, config: Configuration, *, eta: float = 0.5,
           tol_fp: float = TOL_FP, tol_orth: float = TOL_ORTH, max_iter: int = MAX_ITER,
           rho_min: float | None = RHO_MIN, phi_init=None,
           cache: SpikeCache | None = None, check_feasible: bool = True) -> ReducedSolution:
    """Fixed point φ ← A(-S - N(φ)) from φ = 0 (or `phi_init`)."""
    if rho_min is not None and config.rho < rho_min:
        raise ContractionFailed(
            f"rho={config.rho} is below rho_min={rho_min}; the correction map is not a contraction"
        )
    if check_feasible:
        config.require_feasible()
    p = gs.p
    if config.k == 0:
        z = np.zeros(grid.n_nodes)
        system = ProjectedSystem.assemble(grid, projection_set(gs, grid, config), z, p)
        return ReducedSolution(
            phi=SpikeField(z, "correction", grid), c=np.zeros((0, grid.dim)), star_norm_phi=0.0,
            iterations=1, residual_trace=[0.0], orthogonality_defect=0.0,
            base=SpikeField(z.copy(), "spike_sum", grid), system=system, config=config,
        )
    cache = cache if cache is not None else SpikeCache(gs, grid)
    base = multi_spike_sum(gs, grid, config, cache)[0]
    S = error_field(gs, grid, config, cache).values
    system = ProjectedSystem.assemble(grid, projection_set(gs, grid, config), base.values, p)
    W = weight_field(grid, config, eta)

    def norm(f):
        return star_norm(f, config, eta, weight=W)

    phi = np.zeros(grid.n_nodes) if phi_init is None else np.array(phi_init, dtype=float)
    c = np.zeros((config.k, grid.dim))
    trace, orth = [], []
    increases = 0
    stability = 0.0
    for it in range(1, max_iter + 1):
        rhs = -S - nonlinear_remainder(base.values, phi, p)
        new, c = system.solve(rhs)
        rhs_norm = norm(rhs)
        if rhs_norm > 0:
            stability = max(stability, norm(new) / rhs_norm)
        orth.append(system.orthogonality_defect(new))
        step = norm(new - phi)
        if not math.isfinite(step):
            raise ContractionFailed(f"iteration {it} produced a non-finite correction")
        if trace and step > trace[-1]:
            increases += 1
            if increases >= 2:
                raise ContractionFailed(f"step norm increased twice in a row at iteration {it}: "
                                        f"{trace[-2:]} -> {step:.3e}")
        else:
            increases = 0
        trace.append(step)
        phi = new
        if step < tol_fp:
            break
    else:
        raise ContractionFailed(
            f"no convergence in {max_iter} iterations (last step {trace[-1]:.3e})")
    defect = system.orthogonality_defect(phi)
    if defect > tol_orth:
        raise LinearSolveFailed(f"orthogonality defect {defect:.3e} exceeds {tol_orth:.1e}")
    return ReducedSolution(
        phi=SpikeField(phi, "correction", grid), c=c, star_norm_phi=norm(phi), iterations=it,
        residual_trace=trace, orthogonality_defect=defect, base=base, system=system,
        config=config, error_star_norm=norm(S), stability_constant=stability,
        orthogonality_trace=orth,
    )


# --------------------------------------------------------------------------
# diagnostics


def h1_norm_sq(grid: Grid, u) -> float:
    return float(u @ (grid.stiffness @ u) + grid.inner(u, u))


def eigen_directions(gs: GroundState, grid: Grid, config: Configuration) -> np.ndarray:
    """φ_i = χ_i φ0(· - Q_i/ε), one row per spike."""
    out = np.zeros((config.k, grid.n_nodes))
    for i, y in enumerate(config.rescaled()):
        r = np.linalg.norm(grid.coords - y, axis=1)
        out[i] = cutoff_profile(r, config.rho) * gs.phi0(r)
    return out


@dataclass
class IncrementalReport:
    h1_norm_sq: float
    c: np.ndarray
    d: np.ndarray
    c_bound_ratio: np.ndarray
    remainder_h1_norm_sq: float
    field: np.ndarray = field(repr=False)


def incremental_difference_diagnostic(gs: GroundState, grid: Grid, config_k: Configuration,
                                      Q_new, *, eta: float = 0.5, cache: SpikeCache | None = None,
                                      **reduce_kw) -> IncrementalReport:
    """Interaction part of the correction when one spike joins a configuration.

    φ_{k+1} = u(Q_1..Q_{k+1}) - u(Q_1..Q_k) - u(Q_{k+1}) is split by weighted least
    squares into Σ c_i φ_i + Σ d_ij Z_ij + ψ.  `c_bound_ratio` divides |c_i| by
    e^{-ρ/2} e^{-η |Q_i - Q_{k+1}|/ε}.
    """
    cache = cache if cache is not None else SpikeCache(gs, grid)
    q_new = np.reshape(np.asarray(Q_new, dtype=float), (1, -1))
    full = config_k.added(q_new[0])
    full.require_feasible()
    if config_k.k == 0:
        z = np.zeros(grid.n_nodes)
        return IncrementalReport(0.0, np.zeros(1), np.zeros((1, grid.dim)), np.zeros(1), 0.0, z)
    u_full = reduce(gs, grid, full, eta=eta, cache=cache, **reduce_kw).u
    u_old = reduce(gs, grid, config_k, eta=eta, cache=cache, **reduce_kw).u
    u_one = reduce(gs, grid, config_k.with_points(q_new), eta=eta, cache=cache, **reduce_kw).u
    diff = u_full - u_old - u_one

    dirs_phi = eigen_directions(gs, grid, full)
    dirs_z = projection_set(gs, grid, full).flat
    basis = np.vstack([dirs_phi, dirs_z])
    sw = np.sqrt(grid.weights)
    coef, *_ = np.linalg.lstsq((basis * sw).T, diff * sw, rcond=None)
    c = coef[: full.k]
    d = coef[full.k:].reshape(full.k, grid.dim)
    psi = diff - coef @ basis
    dist = np.linalg.norm(full.points - q_new, axis=1) / full.epsilon
    envelope = math.exp(-full.rho / 2) * np.exp(-eta * dist)
    return IncrementalReport(
        h1_norm_sq=h1_norm_sq(grid, diff), c=c, d=d, c_bound_ratio=np.abs(c) / envelope,
        remainder_h1_norm_sq=h1_norm_sq(grid, psi), field=diff,
    )


def coercivity_constant(gs: GroundState, grid: Grid, config: Configuration,
                        base: np.ndarray | None = None, shift: float | None = None) -> float:
    """Smallest eigenvalue of -L on the weighted orthogonal complement of
    span{φ_i, Z_ij}, by Lanczos on the shifted constrained inverse."""
    if base is None:
        base = multi_spike_sum(gs, grid, config)[0].values
    potential = gs.p * np.maximum(base, 0.0) ** (gs.p - 1)
    if shift is None:
        shift = -(float(np.max(potential)) + 1.0)
    sw = np.sqrt(grid.weights)
    A = sparse.diags(1 / sw) @ (grid.stiffness + sparse.diags(grid.weights * (1 - potential))) \
        @ sparse.diags(1 / sw)
    V = np.vstack([eigen_directions(gs, grid, config), projection_set(gs, grid, config).flat])
    V = V * sw
    Qb, _ = np.linalg.qr(V.T)
    m = Qb.shape[1]
    n = grid.n_nodes
    big = sparse.bmat([[A - shift * sparse.identity(n), sparse.csr_matrix(Qb)],
                       [sparse.csr_matrix(Qb.T), None]], format="csc")
    lu = spla.splu(big)

    def matvec(x):
        x = x - Qb @ (Qb.T @ x)
        return lu.solve(np.concatenate([x, np.zeros(m)]))[:n]

    op = spla.LinearOperator((n, n), matvec=matvec, dtype=float)
    top = spla.eigsh(op, k=1, which="LA", return_eigenvectors=False, tol=1e-10,
                     v0=np.ones(n))[0]
    return float(shift + 1.0 / top)
