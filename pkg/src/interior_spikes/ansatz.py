"""Spike configurations, corrected spikes, projection directions and the weighted sup norm."""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np

from scipy import sparse
from scipy.sparse import linalg as spla

from .domain import Domain, Grid, neumann_stiffness_1d
from .errors import InfeasibleConfiguration, PointOutsideDomain
from .ground_state import GroundState

FEASIBILITY_RTOL = 1e-12


def near_boundary_band(epsilon: float) -> float:
    """Boundary distance below which a spike's mirror image is constrained."""
    return 10.0 * epsilon * abs(math.log(epsilon))


@dataclass(frozen=True, eq=False)
class Configuration:
    """Spike centres Q_1..Q_k in physical coordinates.

    Construction does not enforce feasibility; call `require_feasible` or inspect
    `margins`.  `corner_clearance` is an extra physical clearance demanded of
    mirror images when a point is close to two rectangle faces at once.
    """

    domain: Domain
    points: np.ndarray
    rho: float
    corner_clearance: float = 0.0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, self.domain.dim)
        object.__setattr__(self, "points", pts)
        if self.rho <= 0:
            raise ValueError("rho must be positive")

    @property
    def k(self) -> int:
        return self.points.shape[0]

    @property
    def epsilon(self) -> float:
        return self.domain.epsilon

    @property
    def separation(self) -> float:
        return self.rho * self.epsilon

    @property
    def pairwise(self) -> np.ndarray:
        diff = self.points[:, None, :] - self.points[None, :, :]
        return np.linalg.norm(diff, axis=-1)

    @property
    def boundary_distances(self) -> np.ndarray:
        return np.array([self.domain.boundary_distance(q) for q in self.points])

    def reflections(self):
        """Per point, the list of constrained mirror images."""
        band = near_boundary_band(self.epsilon)
        return [self.domain.reflections_within(q, band) for q in self.points]

    def with_points(self, points) -> "Configuration":
        return Configuration(self.domain, points, self.rho, self.corner_clearance)

    def added(self, q) -> "Configuration":
        return self.with_points(np.vstack([self.points, np.reshape(q, (1, -1))]))

    def rescaled(self) -> np.ndarray:
        return self.points / self.epsilon

    def margins(self) -> dict:
        """Clearances in units of ρε.  `pair` is the minimum pairwise distance,
        `reflection` the minimum distance from any point to a constrained mirror
        image (inf when nothing is constrained)."""
        sep = self.separation
        out = {"pair": math.inf, "pair_index": None,
               "reflection": math.inf, "reflection_index": None}
        if self.k >= 2:
            d = self.pairwise + np.diag(np.full(self.k, np.inf))
            i, j = np.unravel_index(np.argmin(d), d.shape)
            out["pair"] = float(d[i, j] / sep)
            out["pair_index"] = (int(min(i, j)), int(max(i, j)))
        for j, images in enumerate(self.reflections()):
            needed = sep + (self.corner_clearance if len(images) > 1 else 0.0)
            for img in images:
                dist = np.linalg.norm(self.points - img, axis=1)
                i = int(np.argmin(dist))
                ratio = float(dist[i] / needed)
                if ratio < out["reflection"]:
                    out["reflection"] = ratio
                    out["reflection_index"] = (i, j)
        return out

    def violations(self) -> list[str]:
        out = []
        for q in self.points:
            if not self.domain.contains(q):
                out.append(f"point {q.tolist()} lies outside the domain")
        if out:
            return out
        m = self.margins()
        if m["pair"] < 1 - FEASIBILITY_RTOL:
            out.append(f"spikes {m['pair_index']} closer than ρε (ratio {m['pair']:.6g})")
        if m["reflection"] < 1 - FEASIBILITY_RTOL:
            i, j = m["reflection_index"]
            out.append(f"spike {i} closer than ρε to the mirror image of spike {j} "
                       f"(ratio {m['reflection']:.6g})")
        return out

    def is_feasible(self) -> bool:
        return not self.violations()

    def require_feasible(self) -> "Configuration":
        v = self.violations()
        if v:
            raise InfeasibleConfiguration("; ".join(v))
        return self

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "rho": self.rho, "k": self.k,
                "Q": self.points.tolist(), "corner_clearance": self.corner_clearance}


@dataclass(frozen=True, eq=False)
class SpikeField:
    """Values on grid nodes with a tag saying what they represent."""

    values: np.ndarray
    kind: str
    grid: Grid = field(repr=False)

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"non-finite values in {self.kind} field")

    def to_csv(self, path) -> None:
        cols = [self.grid.coords[:, i] for i in range(self.grid.dim)] + [self.values]
        header = ",".join([f"y{i}" for i in range(self.grid.dim)] + [self.kind])
        np.savetxt(path, np.column_stack(cols), delimiter=",", header=header, comments="")


@dataclass(frozen=True, eq=False)
class CorrectedSpike(SpikeField):
    """Neumann-corrected spike together with the free-space profile it was built from."""

    centre: np.ndarray = None
    free: np.ndarray = field(default=None, repr=False)

    @property
    def boundary_correction(self) -> np.ndarray:
        """φ = w(· - Q/ε) - w_{ε,Q}; negative near the boundary."""
        return self.free - self.values


def free_spike(gs: GroundState, grid: Grid, centre_rescaled) -> np.ndarray:
    r = np.linalg.norm(grid.coords - np.asarray(centre_rescaled), axis=1)
    return gs.w(r)


class LatticeProfile:
    """Relaxes the sampled ground state to a solution of the discrete equation.

    The sampled profile misses Δ_h w - w + w^p = 0 by the stencil's truncation
    error, which would otherwise sit in every error field as a floor that does
    not decay with the spike separation.  For a centre y the profile is solved
    on a box of half-width `reach` cut from the grid's own lattice, with the
    translation modes pinned by ⟨u - w, ∂_j w⟩ = 0.  The correction u - w is
    tapered to zero between `taper[0]` and `taper[1]` so that the box walls
    never reach the grid.  Corrections depend only on the sub-cell offset of
    the centre and are cached by it.  Cartesian grids only.
    """

    def __init__(self, gs: GroundState, grid: Grid, reach: float = 18.0,
                 taper: tuple = (12.0, 15.0), tol: float = 1e-13, max_iter: int = 30):
        if not grid.is_cartesian:
            raise NotImplementedError("lattice profiles need a Cartesian grid")
        self.gs, self.grid = gs, grid
        self.half = int(math.ceil(reach / grid.h))
        self.taper = taper
        self.tol, self.max_iter = tol, max_iter
        m = 2 * self.half + 2
        h = grid.h
        one = neumann_stiffness_1d(m, h, grid.order)
        if grid.dim == 1:
            stiff = one
        else:
            eye = h * sparse.identity(m)
            stiff = sparse.kron(one, eye) + sparse.kron(eye, one)
        self._stiff = stiff.tocsc()
        self._cell = h ** grid.dim
        self._m = m
        self._lo = grid.domain.bounding_box[:, 0] / grid.epsilon
        self._boxes: dict = {}
        self._lock = threading.Lock()

    def _locate(self, y):
        cells = (y - self._lo) / self.grid.h
        first = np.floor(cells).astype(int) - self.half
        return first, cells - first

    def relax(self, offset):
        """(box nodes relative to the centre, sampled w, relaxed u, last step size).

        `offset` is the centre's position in cells from the box's first node.
        The iteration is a chord method: the bordered Jacobian at the sampled
        profile is factored once and reused.
        """
        gs, cell, h = self.gs, self._cell, self.grid.h
        axes = [(np.arange(self._m) + 0.5 - o) * h for o in offset]
        diff = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
        w = gs.w(np.linalg.norm(diff, axis=1))
        MZ = sparse.csc_matrix(cell * gs.grad_w(diff))
        n = MZ.shape[1]
        p = gs.p
        jac = -self._stiff + sparse.diags(cell * (p * w ** (p - 1) - 1))
        lu = spla.splu(sparse.bmat([[jac, MZ], [MZ.T, None]]).tocsc())
        u = w.copy()
        size = math.inf
        for _ in range(self.max_iter):
            F = -(self._stiff @ u) - cell * u + cell * np.maximum(u, 0.0) ** p
            step = lu.solve(np.concatenate([-F, -(MZ.T @ (u - w))]))[:-n]
            u = u + step
            size = float(np.max(np.abs(step)))
            if size <= self.tol * gs.w0:
                break
        return diff, w, u, size

    def truncation_level(self) -> float:
        """Max-norm residual of the sampled profile in the discrete equation."""
        offset = np.full(self.grid.dim, self.half + 0.5)
        axes = [(np.arange(self._m) + 0.5 - o) * self.grid.h for o in offset]
        diff = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
        w = self.gs.w(np.linalg.norm(diff, axis=1))
        F = -(self._stiff @ w) / self._cell - w + w**self.gs.p
        return float(np.max(np.abs(F)))

    def _box_correction(self, offset):
        key = tuple(np.round(offset * 1e9).astype(np.int64).tolist())
        box = self._boxes.get(key)
        if box is None:
            diff, w, u, _ = self.relax(offset)
            inner, outer = self.taper
            s = np.clip((outer - np.linalg.norm(diff, axis=1)) / (outer - inner), 0.0, 1.0)
            box = ((u - w) * s**3 * (10 - 15 * s + 6 * s**2)).reshape((self._m,) * self.grid.dim)
            with self._lock:
                box = self._boxes.setdefault(key, box)
        return box

    def correction(self, centre_rescaled) -> np.ndarray:
        """Tapered u - w on the nodes of `grid`; zero away from the centre."""
        g = self.grid
        first, offset = self._locate(np.asarray(centre_rescaled, dtype=float))
        box = self._box_correction(offset)
        out = np.zeros(g.shape)
        src, dst = [], []
        for d, count in enumerate(g.shape):
            lo, hi = max(first[d], 0), min(first[d] + self._m, count)
            if hi <= lo:
                return out.ravel()
            src.append(slice(lo - first[d], hi - first[d]))
            dst.append(slice(lo, hi))
        out[tuple(dst)] = box[tuple(src)]
        return out.ravel()


def corrected_spike(gs: GroundState, grid: Grid, Q, profile: LatticeProfile | None = None
                    ) -> CorrectedSpike:
    """Solve (-Δ_h + 1) v = w(· - Q/ε)^p with the Neumann condition.

    With a `profile`, w is the lattice-relaxed ground state instead of the
    sampled one."""
    if not grid.domain.contains(Q):
        raise PointOutsideDomain(f"{np.asarray(Q).tolist()} is not inside the domain")
    y = grid.to_rescaled(Q)
    w = free_spike(gs, grid, y)
    if profile is not None:
        w = w + profile.correction(y)
    v = grid.solve_helmholtz(np.maximum(w, 0.0) ** gs.p)
    return CorrectedSpike(values=v, kind="corrected_spike", grid=grid,
                          centre=np.asarray(Q, dtype=float), free=w)


# sampled profiles whose discrete residual is below this are used as they are
RELAX_THRESHOLD = 1e-4


class SpikeCache:
    """Corrected spikes keyed by their centre rounded to 1e-12 of a mesh cell.

    `relax` chooses lattice-relaxed profiles: True or False forces the choice,
    "auto" relaxes on Cartesian grids whose truncation error exceeds
    RELAX_THRESHOLD.
    """

    def __init__(self, gs: GroundState, grid: Grid, relax: bool | str = "auto"):
        self.gs = gs
        self.grid = grid
        self.profile = None
        if relax and grid.is_cartesian:
            profile = LatticeProfile(gs, grid)
            if relax != "auto" or profile.truncation_level() > RELAX_THRESHOLD:
                self.profile = profile
        self._store: dict = {}
        self._lock = threading.Lock()
        self.hits = 0

    def _key(self, Q):
        q = np.asarray(Q, dtype=float) / (self.grid.epsilon * self.grid.h)
        return tuple(np.round(q * 1e12).astype(np.int64).tolist())

    def get(self, Q) -> CorrectedSpike:
        key = self._key(Q)
        spike = self._store.get(key)
        if spike is not None:
            self.hits += 1
            return spike
        spike = corrected_spike(self.gs, self.grid, Q, self.profile)
        with self._lock:
            return self._store.setdefault(key, spike)

    def __len__(self):
        return len(self._store)


def multi_spike_sum(gs: GroundState, grid: Grid, config: Configuration,
                    cache: SpikeCache | None = None):
    """Sum of corrected spikes, returned with the individual terms."""
    cache = cache if cache is not None else SpikeCache(gs, grid)
    parts = [cache.get(q) for q in config.points]
    total = np.zeros(grid.n_nodes)
    for s in parts:
        total = total + s.values
    return SpikeField(total, "spike_sum", grid), parts


# --------------------------------------------------------------------------
# cutoffs and projection directions


def support_radius(rho: float) -> float:
    return rho**2 / (2 * (rho + 1))


def cutoff_profile(r, rho: float):
    """Radial cutoff: 1 inside, a C² quintic ramp over a shell of width
    (ρ-1)/(2ρ) ending at the support radius ρ²/(2(ρ+1)), 0 outside."""
    r = np.asarray(r, dtype=float)
    outer = support_radius(rho)
    width = (rho - 1) / (2 * rho)
    s = np.clip((outer - r) / width, 0.0, 1.0)
    return s**3 * (10 - 15 * s + 6 * s**2)


@dataclass(frozen=True, eq=False)
class ProjectionSet:
    """Z[i, j] = χ_i ∂_j w(· - Q_i/ε) on the grid nodes."""

    Z: np.ndarray
    rho: float
    support_radius: float
    grid: Grid = field(repr=False)

    @property
    def k(self) -> int:
        return self.Z.shape[0]

    @property
    def flat(self) -> np.ndarray:
        """Rows of shape (k*n, n_nodes), ordered (i, j) lexicographically."""
        return self.Z.reshape(-1, self.Z.shape[-1])

    def gram(self) -> np.ndarray:
        F = self.flat
        return (F * self.grid.weights) @ F.T

    def project_out(self, u) -> np.ndarray:
        """Coefficients a with u - Σ a_ij Z_ij orthogonal to every Z_ij."""
        F = self.flat
        if F.shape[0] == 0:
            return np.zeros(0)
        return np.linalg.solve(self.gram(), (F * self.grid.weights) @ u)


def projection_set(gs: GroundState, grid: Grid, config: Configuration) -> ProjectionSet:
    n = grid.dim
    Z = np.zeros((config.k, n, grid.n_nodes))
    rad = support_radius(config.rho)
    for i, y in enumerate(config.rescaled()):
        diff = grid.coords - y
        r = np.linalg.norm(diff, axis=1)
        inside = r < rad
        chi = cutoff_profile(r[inside], config.rho)
        g = gs.grad_w(diff[inside])
        for j in range(n):
            Z[i, j, inside] = chi * g[:, j]
    return ProjectionSet(Z=Z, rho=config.rho, support_radius=rad, grid=grid)


# --------------------------------------------------------------------------
# weighted norm


def weight_field(grid: Grid, config: Configuration, eta: float = 0.5) -> np.ndarray:
    """W = Σ_i exp(-η |x - Q_i/ε|); identically 1 when there are no spikes."""
    if config.k == 0:
        return np.ones(grid.n_nodes)
    W = np.zeros(grid.n_nodes)
    for y in config.rescaled():
        W += np.exp(-eta * np.linalg.norm(grid.coords - y, axis=1))
    return W


def star_norm(values, config: Configuration, eta: float = 0.5, grid: Grid | None = None,
              weight: np.ndarray | None = None) -> float:
    """sup |f| / W over the grid nodes."""
    if isinstance(values, SpikeField):
        grid = grid or values.grid
        values = values.values
    if not 0.0 < eta < 1.0:
        raise ValueError("eta must lie in (0, 1)")
    if weight is None:
        if grid is None:
            raise ValueError("a grid is needed to build the weight")
        weight = weight_field(grid, config, eta)
    return float(np.max(np.abs(values) / weight)) if len(values) else 0.0
