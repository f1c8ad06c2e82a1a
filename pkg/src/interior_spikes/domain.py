"""Domains, their rescaled grids and the discrete Neumann Laplacian.

Physical points live in the domain Ω; all fields live on the rescaled domain
Ω/ε, where a spike core has unit width.  Grids are cell centred.  On intervals
and rectangles the Laplacian uses even reflection through the walls, which makes
the discrete operator symmetric with zero row sums.  The disk uses a polar
finite-volume discretization with exact cell areas.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from .errors import LinearSolveFailed, MeshTooCoarse, PointOutsideDomain

MAX_MESH_WIDTH = 0.25
EPSILON_MAX = 0.5
SHAPES = ("interval", "rectangle", "disk")


@dataclass(frozen=True)
class BoundaryGeometry:
    point: np.ndarray
    distance: float
    nearest: np.ndarray
    normal: np.ndarray
    reflection: np.ndarray


@dataclass(frozen=True)
class Domain:
    """Bounded domain in physical coordinates.

    `extents` is (a, b) for an interval, ((x0, x1), (y0, y1)) for a rectangle and
    ((cx, cy), radius) for a disk.
    """

    shape: str
    extents: tuple
    epsilon: float

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown domain shape {self.shape!r}")
        if not (0.0 < self.epsilon <= EPSILON_MAX):
            raise ValueError(f"epsilon must lie in (0, {EPSILON_MAX}]")
        if self.shape == "interval":
            a, b = map(float, self.extents)
            if not b > a:
                raise ValueError("empty interval")
            object.__setattr__(self, "extents", (a, b))
        elif self.shape == "rectangle":
            (x0, x1), (y0, y1) = self.extents
            if not (x1 > x0 and y1 > y0):
                raise ValueError("empty rectangle")
            object.__setattr__(self, "extents", ((float(x0), float(x1)), (float(y0), float(y1))))
        else:
            (cx, cy), radius = self.extents
            if not radius > 0:
                raise ValueError("disk radius must be positive")
            object.__setattr__(self, "extents", ((float(cx), float(cy)), float(radius)))

    @classmethod
    def interval(cls, a, b, epsilon):
        return cls("interval", (a, b), epsilon)

    @classmethod
    def rectangle(cls, x_range, y_range, epsilon):
        return cls("rectangle", (tuple(x_range), tuple(y_range)), epsilon)

    @classmethod
    def disk(cls, center, radius, epsilon):
        return cls("disk", (tuple(center), radius), epsilon)

    @classmethod
    def from_dict(cls, d: dict) -> "Domain":
        shape = d["shape"]
        ext = d["extents"]
        if shape == "interval":
            return cls.interval(ext[0], ext[1], d["epsilon"])
        if shape == "rectangle":
            return cls.rectangle(ext[0], ext[1], d["epsilon"])
        return cls.disk(ext[0], ext[1], d["epsilon"])

    def to_dict(self) -> dict:
        def plain(x):
            return [plain(v) for v in x] if isinstance(x, tuple) else x

        return {"shape": self.shape, "extents": plain(self.extents), "epsilon": self.epsilon}

    def with_epsilon(self, epsilon: float) -> "Domain":
        return Domain(self.shape, self.extents, epsilon)

    @property
    def dim(self) -> int:
        return 1 if self.shape == "interval" else 2

    @property
    def measure(self) -> float:
        if self.shape == "interval":
            a, b = self.extents
            return b - a
        if self.shape == "rectangle":
            (x0, x1), (y0, y1) = self.extents
            return (x1 - x0) * (y1 - y0)
        return math.pi * self.extents[1] ** 2

    @property
    def bounding_box(self) -> np.ndarray:
        """Array of shape (dim, 2) with lower and upper corners."""
        if self.shape == "interval":
            return np.array([self.extents])
        if self.shape == "rectangle":
            return np.array(self.extents)
        (cx, cy), r = self.extents
        return np.array([[cx - r, cx + r], [cy - r, cy + r]])

    def _as_point(self, Q) -> np.ndarray:
        q = np.atleast_1d(np.asarray(Q, dtype=float))
        if q.shape != (self.dim,):
            raise ValueError(f"expected a point with {self.dim} coordinates, got shape {q.shape}")
        return q

    def boundary_distance(self, Q) -> float:
        """Signed distance to the boundary, positive inside."""
        q = self._as_point(Q)
        if self.shape == "disk":
            (cx, cy), r = self.extents
            return r - math.hypot(q[0] - cx, q[1] - cy)
        box = self.bounding_box
        return float(np.min(np.minimum(q - box[:, 0], box[:, 1] - q)))

    def contains(self, Q) -> bool:
        return self.boundary_distance(Q) > 0

    def faces(self, Q):
        """(distance, outward normal) for each flat face of an interval or rectangle."""
        q = self._as_point(Q)
        box = self.bounding_box
        out = []
        for axis in range(self.dim):
            e = np.zeros(self.dim)
            e[axis] = 1.0
            out.append((q[axis] - box[axis, 0], -e))
            out.append((box[axis, 1] - q[axis], e))
        return out

    def reflect_point(self, Q) -> BoundaryGeometry:
        """Distance, nearest boundary point, outward normal and mirror image of Q.

        For rectangles the nearest face wins, ties broken by face order
        (x-low, x-high, y-low, y-high).
        """
        q = self._as_point(Q)
        if not self.contains(q):
            raise PointOutsideDomain(f"{q.tolist()} is not inside the {self.shape}")
        if self.shape == "disk":
            (cx, cy), r = self.extents
            c = np.array([cx, cy])
            offset = q - c
            dist_c = float(np.linalg.norm(offset))
            normal = offset / dist_c if dist_c > 0 else np.array([1.0, 0.0])
            d = r - dist_c
        else:
            d, normal = min(self.faces(q), key=lambda f: f[0])
        nearest = q + d * normal
        return BoundaryGeometry(q, float(d), nearest, normal, q + 2 * d * normal)

    def reflections_within(self, Q, band: float):
        """Mirror images of Q across every boundary piece closer than `band`.

        A rectangle point near a corner has two of them.
        """
        q = self._as_point(Q)
        if self.shape == "disk":
            g = self.reflect_point(q)
            return [g.reflection] if g.distance <= band else []
        return [q + 2 * d * nrm for d, nrm in self.faces(q) if d <= band]


# --------------------------------------------------------------------------
# grids


def neumann_stiffness_1d(m: int, h: float, order: int) -> sparse.csr_matrix:
    """Stiffness matrix S (S = -h Δ_h) of the cell-centred Neumann Laplacian on
    m cells, built by even reflection of the ghost cells."""
    if order == 2:
        offsets = {1: 1.0}
        centre = -2.0
        scale = 1.0
    elif order == 4:
        offsets = {1: 16.0, 2: -1.0}
        centre = -30.0
        scale = 12.0
    else:
        raise ValueError("order must be 2 or 4")
    width = max(offsets)
    if m < 2 * width + 1:
        raise MeshTooCoarse(f"{m} cells are too few for the order-{order} stencil")
    rows, cols, vals = [], [], []

    def fold(j):
        # cell j < 0 mirrors cell -1-j, cell j >= m mirrors 2m-1-j
        if j < 0:
            return -1 - j
        if j >= m:
            return 2 * m - 1 - j
        return j

    for i in range(m):
        rows.append(i)
        cols.append(i)
        vals.append(centre)
        for off, c in offsets.items():
            for j in (i - off, i + off):
                rows.append(i)
                cols.append(fold(j))
                vals.append(c)
    lap = sparse.csr_matrix((vals, (rows, cols)), shape=(m, m)) / (scale * h * h)
    return (-lap * h).tocsr()


@dataclass(eq=False)
class Grid:
    """Nodes of the rescaled domain with the Neumann Laplacian.

    The Laplacian is Δ_h = -diag(weights)^{-1} stiffness, with a symmetric
    positive semidefinite stiffness matrix whose rows sum to zero.
    """

    domain: Domain
    h: float
    coords: np.ndarray
    weights: np.ndarray
    stiffness: sparse.csr_matrix
    boundary_mask: np.ndarray
    neighbors: sparse.csr_matrix
    shape: tuple | None = None
    order: int = 2
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def dim(self) -> int:
        return self.coords.shape[1]

    @property
    def epsilon(self) -> float:
        return self.domain.epsilon

    @property
    def is_cartesian(self) -> bool:
        return self.shape is not None

    def integrate(self, values) -> float:
        return float(np.dot(self.weights, values))

    def inner(self, u, v) -> float:
        return float(np.dot(self.weights, u * v))

    def laplacian(self, u):
        return -(self.stiffness @ u) / self.weights

    @cached_property
    def laplacian_matrix(self) -> sparse.csr_matrix:
        return (-sparse.diags(1.0 / self.weights) @ self.stiffness).tocsr()

    @cached_property
    def helmholtz_matrix(self) -> sparse.csc_matrix:
        """S + M, the weighted form of -Δ_h + 1."""
        return (self.stiffness + sparse.diags(self.weights)).tocsc()

    @cached_property
    def _helmholtz_lu(self):
        with self._lock:
            try:
                return spla.splu(self.helmholtz_matrix)
            except RuntimeError as exc:
                raise LinearSolveFailed(str(exc)) from exc

    def solve_helmholtz(self, rhs):
        """Solve (-Δ_h + 1) u = rhs with the Neumann condition."""
        u = self._helmholtz_lu.solve(self.weights * np.asarray(rhs, dtype=float))
        if not np.all(np.isfinite(u)):
            raise LinearSolveFailed("non-finite Helmholtz solution")
        return u

    def to_physical(self, x):
        return np.asarray(x) * self.epsilon

    def to_rescaled(self, Q):
        return np.asarray(Q, dtype=float) / self.epsilon

    def nearest_node(self, y) -> int:
        return int(np.argmin(np.sum((self.coords - np.asarray(y)) ** 2, axis=1)))

    def gradient(self, u):
        """Centred-difference gradient, shape (n_nodes, dim); Cartesian grids only."""
        if not self.is_cartesian:
            raise NotImplementedError("gradient is only available on Cartesian grids")
        g = np.gradient(u.reshape(self.shape), self.h, edge_order=2)
        if self.dim == 1:
            g = [g]
        return np.stack([gi.ravel() for gi in g], axis=1)


def _cartesian(domain: Domain, h: float, order: int) -> Grid:
    box = domain.bounding_box / domain.epsilon
    counts = []
    for lo, hi in box:
        m = (hi - lo) / h
        if abs(m - round(m)) > 1e-9 * max(1.0, m):
            raise ValueError(f"h={h} does not divide the rescaled extent {hi - lo}")
        counts.append(int(round(m)))
    axes = [lo + (np.arange(m) + 0.5) * h for (lo, _), m in zip(box, counts)]
    mats = [neumann_stiffness_1d(m, h, order) for m in counts]
    if domain.dim == 1:
        coords = axes[0][:, None]
        stiffness = mats[0]
        boundary = np.zeros(counts[0], dtype=bool)
        boundary[[0, -1]] = True
        adj = sparse.diags([1, 1], [-1, 1], shape=(counts[0], counts[0]))
    else:
        mx, my = counts
        X, Y = np.meshgrid(axes[0], axes[1], indexing="ij")
        coords = np.column_stack([X.ravel(), Y.ravel()])
        # 2D stiffness: S_x ⊗ h I + h I ⊗ S_y keeps the weighted form symmetric
        stiffness = sparse.kron(mats[0], h * sparse.identity(my)) + sparse.kron(
            h * sparse.identity(mx), mats[1]
        )
        ix, iy = np.meshgrid(np.arange(mx), np.arange(my), indexing="ij")
        boundary = ((ix == 0) | (ix == mx - 1) | (iy == 0) | (iy == my - 1)).ravel()
        p1x = sparse.diags([1, 1], [-1, 1], shape=(mx, mx))
        p1y = sparse.diags([1, 1], [-1, 1], shape=(my, my))
        ex, ey = sparse.identity(mx), sparse.identity(my)
        # 8-neighbour (Moore) adjacency
        adj = sparse.kron(p1x + ex, p1y + ey) - sparse.identity(mx * my)
    weights = np.full(coords.shape[0], h ** domain.dim)
    return Grid(
        domain=domain, h=h, coords=coords, weights=weights, stiffness=stiffness.tocsr(),
        boundary_mask=boundary, neighbors=sparse.csr_matrix(adj), shape=tuple(counts),
        order=order,
    )


def _polar(domain: Domain, h: float) -> Grid:
    (cx, cy), radius = domain.extents
    R = radius / domain.epsilon
    n_r = max(2, math.ceil(R / h))
    n_t = max(64, math.ceil(2 * math.pi * R / h))
    dr = R / n_r
    dt = 2 * math.pi / n_t
    r_faces = np.arange(n_r + 1) * dr
    r_c = (np.arange(n_r) + 0.5) * dr
    t_c = (np.arange(n_t) + 0.5) * dt
    Rr, Tt = np.meshgrid(r_c, t_c, indexing="ij")
    centre = np.array([cx, cy]) / domain.epsilon
    coords = np.column_stack([centre[0] + (Rr * np.cos(Tt)).ravel(),
                              centre[1] + (Rr * np.sin(Tt)).ravel()])
    area = 0.5 * dt * (r_faces[1:] ** 2 - r_faces[:-1] ** 2)
    weights = np.repeat(area, n_t)

    def idx(i, j):
        return i * n_t + (j % n_t)

    rows, cols, vals = [], [], []

    def couple(a, b, c):
        rows.extend([a, b, a, b])
        cols.extend([a, b, b, a])
        vals.extend([c, c, -c, -c])

    for i in range(n_r):
        for j in range(n_t):
            # angular face: length dr, centre distance r_c dt
            couple(idx(i, j), idx(i, j + 1), dr / (r_c[i] * dt))
            if i + 1 < n_r:
                # radial face: length r_face dt, centre distance dr
                couple(idx(i, j), idx(i + 1, j), r_faces[i + 1] * dt / dr)
    n = n_r * n_t
    stiffness = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
    boundary = np.zeros(n, dtype=bool)
    boundary[(n_r - 1) * n_t:] = True
    adj = stiffness.copy()
    adj.data = np.where(adj.data < 0, 1.0, 0.0)
    adj.eliminate_zeros()
    return Grid(domain=domain, h=h, coords=coords, weights=weights, stiffness=stiffness,
                boundary_mask=boundary, neighbors=adj, shape=None, order=2)


def build_grid(domain: Domain, h: float, order: int = 4) -> Grid:
    """Cell-centred grid of mesh width h on the rescaled domain.

    `order` selects the 2nd or 4th order reflected stencil on intervals and
    rectangles; the disk is always 2nd order.
    """
    if h > MAX_MESH_WIDTH:
        raise MeshTooCoarse(f"h={h} exceeds {MAX_MESH_WIDTH}; the spike core is unresolved")
    if h <= 0:
        raise ValueError("h must be positive")
    if domain.shape == "disk":
        return _polar(domain, h)
    return _cartesian(domain, h, order)
