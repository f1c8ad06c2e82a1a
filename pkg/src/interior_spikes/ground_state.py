"""Radial ground state of  Δw - w + w^p = 0  on R^n and the constants derived from it.

The profile is found by shooting on w(0) with bisection.  Past the radius where
double precision shooting stops being reliable, the profile is continued by the
decaying solution of the linearized tail equation, C r^{-ν} K_ν(r) with
ν = (n-2)/2, which has the asymptotics  A_n r^{-(n-1)/2} e^{-r}.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, linalg, special
from scipy.interpolate import CubicHermiteSpline, CubicSpline

from .errors import IterationDiverged, NoDecayBracket, ToleranceNotMet

FORMAT_VERSION = 1


def sphere_area(n: int) -> float:
    """Surface measure of the unit sphere S^{n-1} (2 for n = 1)."""
    return 2.0 * math.pi ** (n / 2) / math.gamma(n / 2)


def _bessel_order(n: int) -> float:
    return (n - 2) / 2.0


def fundamental_solution(r, n: int):
    """Decaying fundamental solution K of -Δ + 1 on R^n, as a function of |x|."""
    r = np.asarray(r, dtype=float)
    nu = _bessel_order(n)
    return (2 * math.pi) ** (-n / 2) * r ** (-nu) * special.kve(nu, r) * np.exp(-r)


def critical_exponent(n: int) -> float:
    return math.inf if n <= 2 else (n + 2) / (n - 2)


@dataclass(frozen=True, eq=False)
class GroundState:
    dim: int
    p: float
    r_grid: np.ndarray
    w_vals: np.ndarray
    dw_vals: np.ndarray
    A_n: float
    I_w: float
    gamma: float
    lambda1: float
    phi0_vals: np.ndarray
    tail_radius: float
    tail_coeff: float
    _spline: CubicHermiteSpline = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(
            self, "_spline", CubicHermiteSpline(self.r_grid, self.w_vals, self.dw_vals)
        )

    @property
    def w0(self) -> float:
        return float(self.w_vals[0])

    @property
    def r_max(self) -> float:
        return float(self.r_grid[-1])

    @property
    def A_0(self) -> float:
        """Amplitude of w relative to the fundamental solution K in the tail."""
        return self.tail_coeff * (2 * math.pi) ** (self.dim / 2)

    def tail(self, r):
        r = np.asarray(r, dtype=float)
        nu = _bessel_order(self.dim)
        return self.tail_coeff * r ** (-nu) * special.kve(nu, r) * np.exp(-r)

    def dtail(self, r):
        r = np.asarray(r, dtype=float)
        nu = _bessel_order(self.dim)
        return -self.tail_coeff * r ** (-nu) * special.kve(nu + 1, r) * np.exp(-r)

    def w(self, r):
        """Profile at radius r (any shape); exact tail form beyond the handover."""
        r = np.abs(np.asarray(r, dtype=float))
        out = np.empty_like(r)
        inner = r <= self.tail_radius
        out[inner] = self._spline(r[inner])
        out[~inner] = self.tail(r[~inner])
        return out

    def dw(self, r):
        r = np.abs(np.asarray(r, dtype=float))
        out = np.empty_like(r)
        inner = r <= self.tail_radius
        out[inner] = self._spline(r[inner], 1)
        out[~inner] = self.dtail(r[~inner])
        return out

    def phi0(self, r):
        r = np.abs(np.asarray(r, dtype=float))
        return np.interp(r, self.r_grid, self.phi0_vals, right=0.0)

    def grad_w(self, x):
        """Gradient of w(|x|) for points x of shape (..., n)."""
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=-1)
        safe = np.where(r > 0, r, 1.0)
        return (self.dw(r) / safe)[..., None] * x

    def K(self, r):
        return fundamental_solution(r, self.dim)

    def radial_integral(self, values) -> float:
        """∫_{R^n} f(|y|) dy for f tabulated on r_grid (tail beyond r_max dropped)."""
        weight = sphere_area(self.dim) * self.r_grid ** (self.dim - 1)
        return float(integrate.simpson(np.asarray(values) * weight, x=self.r_grid))

    def grad_norm_sq(self) -> float:
        """∫ |∂w/∂y_j|^2 for a single direction j."""
        return self.radial_integral(self.dw_vals**2) / self.dim

    # persistence --------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "dim": self.dim,
            "p": self.p,
            "r_grid": self.r_grid.tolist(),
            "w": self.w_vals.tolist(),
            "dw": self.dw_vals.tolist(),
            "A_n": self.A_n,
            "I_w": self.I_w,
            "gamma": self.gamma,
            "lambda1": self.lambda1,
            "phi0": self.phi0_vals.tolist(),
            "tail_radius": self.tail_radius,
            "tail_coeff": self.tail_coeff,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundState":
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported ground-state table version {d.get('version')!r}")
        return cls(
            dim=int(d["dim"]),
            p=float(d["p"]),
            r_grid=np.asarray(d["r_grid"], dtype=float),
            w_vals=np.asarray(d["w"], dtype=float),
            dw_vals=np.asarray(d["dw"], dtype=float),
            A_n=float(d["A_n"]),
            I_w=float(d["I_w"]),
            gamma=float(d["gamma"]),
            lambda1=float(d["lambda1"]),
            phi0_vals=np.asarray(d["phi0"], dtype=float),
            tail_radius=float(d["tail_radius"]),
            tail_coeff=float(d["tail_coeff"]),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "GroundState":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# --------------------------------------------------------------------------
# shooting


_R_START = 1e-4


def _rhs(n, p):
    if n == 1:
        def f(r, y):
            w, dw = y
            return [dw, w - math.copysign(abs(w) ** p, w)]
    else:
        def f(r, y):
            w, dw = y
            return [dw, (1 - n) / r * dw + w - math.copysign(abs(w) ** p, w)]

    return f


def _series_start(a, n, p, r0):
    c = (a - a**p) / (2 * n)
    return [a + c * r0**2, 2 * c * r0]


def _shoot(a, n, p, r_end, nodes=None, rtol=1e-13, atol=1e-300):
    """Integrate from w(0) = a with DOP853 until w crosses zero or w' turns positive.

    Returns (kind, r_stop, values) where kind is 'over' (crossed zero, a too
    large), 'under' (turned back up) or 'none'.  When `nodes` is given the
    integration steps onto each node exactly and values[i] = (w, w') there,
    NaN past the stopping radius.
    """
    state = {"kind": "none"}

    def watch(r, y):
        if y[0] < 0:
            state["kind"] = "over"
            return -1
        if y[1] > 0:
            state["kind"] = "under"
            return -1
        return 0

    solver = integrate.ode(_rhs(n, p)).set_integrator(
        "dop853", rtol=rtol, atol=atol, nsteps=10**7
    )
    solver.set_solout(watch)
    solver.set_initial_value(_series_start(a, n, p, _R_START), _R_START)
    if nodes is None:
        solver.integrate(r_end)
        return state["kind"], solver.t, None
    values = np.full((len(nodes), 2), np.nan)
    for i, r in enumerate(nodes):
        y = solver.integrate(r)
        if state["kind"] != "none":
            break
        values[i] = y
    return state["kind"], solver.t, values


def _bisect(lo, hi, n, p, r_end, rtol, width):
    while hi - lo > width:
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if _shoot(mid, n, p, r_end, rtol=rtol)[0] == "over":
            hi = mid
        else:
            lo = mid
    return lo, hi


def _bracket(n, p, r_end):
    lo = 1.0 + 1e-6
    # w' starts near 1e-12 here, so a pure relative tolerance would crawl
    if _shoot(lo, n, p, r_end, atol=1e-15)[0] != "under":
        raise NoDecayBracket(f"w(0)={lo} does not undershoot (dim={n}, p={p})")
    hi = 2.0
    while _shoot(hi, n, p, r_end)[0] != "over":
        lo = hi
        hi *= 2.0
        if hi > 1e6:
            raise NoDecayBracket(f"no overshooting w(0) found below 1e6 (dim={n}, p={p})")
    # cheap shots while the bracket is wide; each stage is padded and confirmed
    # by tight shots before the next one narrows it further
    scale = hi
    for rtol, width in ((1e-6, 1e-3), (1e-9, 1e-6)):
        coarse_lo, coarse_hi = _bisect(lo, hi, n, p, r_end, rtol, width * scale)
        pad = 0.1 * width * scale
        lo2, hi2 = max(lo, coarse_lo - pad), min(hi, coarse_hi + pad)
        if _shoot(lo2, n, p, r_end)[0] != "over" and _shoot(hi2, n, p, r_end)[0] == "over":
            lo, hi = lo2, hi2
    return _bisect(lo, hi, n, p, r_end, 1e-13, 0.0)


def _log_derivative_tail(r, n):
    """d/dr log(r^{-ν} K_ν(r)), the log-derivative of the linear decaying mode."""
    nu = _bessel_order(n)
    return -special.kve(nu + 1, r) / special.kve(nu, r)


def _profile(n, p, r_max, dr, tol=1e-10):
    lo, hi = _bracket(n, p, r_end=r_max + 30.0)
    m = int(round(r_max / dr))
    r_grid = np.linspace(0.0, m * dr, m + 1)
    nodes = r_grid[1:]
    _, _, y_lo = _shoot(lo, n, p, r_max, nodes)
    _, _, y_hi = _shoot(hi, n, p, r_max, nodes)
    y = 0.5 * (y_lo + y_hi)

    # handover where the shot profile best matches the linear tail mode and the
    # bracketing shots still agree; the linear tail drops w^p, so only hand over
    # once that is below tolerance
    with np.errstate(invalid="ignore", divide="ignore"):
        spread = np.abs(y_lo[:, 0] - y_hi[:, 0]) / np.abs(y[:, 0])
        mismatch = np.abs(y[:, 1] / y[:, 0] - _log_derivative_tail(nodes, n)) + spread
    mismatch[(nodes < 2.0) | (np.abs(y[:, 0]) ** p > 0.1 * tol) | ~np.isfinite(mismatch)] = np.inf
    if not np.isfinite(mismatch).any():
        raise ToleranceNotMet(
            f"no usable handover radius below r_max={r_max}: shooting loses accuracy "
            "before the nonlinearity is negligible"
        )
    i_h = int(np.argmin(mismatch))
    R_h = float(nodes[i_h])
    nu = _bessel_order(n)
    C = float(y[i_h, 0] / (R_h ** (-nu) * special.kve(nu, R_h) * math.exp(-R_h)))

    w = np.empty_like(r_grid)
    dw = np.empty_like(r_grid)
    w[0], dw[0] = 0.5 * (lo + hi), 0.0
    w[1:i_h + 2], dw[1:i_h + 2] = y[:i_h + 1].T
    r_out = r_grid[i_h + 2:]
    w[i_h + 2:] = C * r_out ** (-nu) * special.kve(nu, r_out) * np.exp(-r_out)
    dw[i_h + 2:] = -C * r_out ** (-nu) * special.kve(nu + 1, r_out) * np.exp(-r_out)
    return r_grid, w, dw, R_h, C


def _rk4_cells(n, p, r, width, y0, y1, substeps):
    h = width / substeps

    def f(r, a, b):
        return b, -(n - 1) / r * b + a - np.sign(a) * np.abs(a) ** p

    for _ in range(substeps):
        k1 = f(r, y0, y1)
        k2 = f(r + h / 2, y0 + h / 2 * k1[0], y1 + h / 2 * k1[1])
        k3 = f(r + h / 2, y0 + h / 2 * k2[0], y1 + h / 2 * k2[1])
        k4 = f(r + h, y0 + h * k3[0], y1 + h * k3[1])
        y0 = y0 + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        y1 = y1 + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        r = r + h
    return y0, y1


def ode_residual(r_grid, w, dw, n, p, tail_radius, substeps=16):
    """Per-cell defect of the tabulated pair (w, w').

    Each cell [r_i, r_{i+1}] below the handover is re-integrated from the table
    values by classical RK4 and the mismatch with the next table row is divided by
    the cell width.  Cells with r_i < 1 get 16x the substeps because of the
    (n-1)/r coefficient.  Beyond the handover the table is the exact linear tail,
    whose residual is w^p.
    """
    res = np.zeros_like(r_grid)
    cells = np.nonzero((r_grid[:-1] > 0) & (r_grid[1:] <= tail_radius))[0]
    for group, steps in ((cells[r_grid[cells] < 1.0], 16 * substeps),
                         (cells[r_grid[cells] >= 1.0], substeps)):
        if not group.size:
            continue
        width = r_grid[group + 1] - r_grid[group]
        y0, y1 = _rk4_cells(n, p, r_grid[group], width, w[group], dw[group], steps)
        res[group + 1] = np.maximum(np.abs(y0 - w[group + 1]), np.abs(y1 - dw[group + 1])) / width
    tail = r_grid > tail_radius
    res[tail] = np.abs(w[tail]) ** p
    return res


def solve_ground_state(dim: int, p: float, r_max: float = 40.0, tol: float = 1e-10,
                       dr: float = 0.01) -> GroundState:
    """Compute the ground state table together with I(w), γ, λ1 and φ0."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if not (1.0 < p < critical_exponent(dim)):
        raise ValueError(f"p={p} is not subcritical for dim={dim}")
    r_grid, w, dw, R_h, C = _profile(dim, p, r_max, dr, tol)

    if w[-1] >= 1e-12:
        raise ToleranceNotMet(f"w(r_max)={w[-1]:.3e} >= 1e-12; increase r_max")
    res = ode_residual(r_grid, w, dw, dim, p, R_h)
    if res.max() > tol:
        raise ToleranceNotMet(f"ODE residual {res.max():.3e} exceeds tol={tol:.1e}")

    nu = _bessel_order(dim)
    A_n = C * math.sqrt(math.pi / 2)
    weight = sphere_area(dim) * r_grid ** (dim - 1)
    I_w = (0.5 - 1.0 / (p + 1)) * float(integrate.simpson(w ** (p + 1) * weight, x=r_grid))
    gs = GroundState(
        dim=dim, p=p, r_grid=r_grid, w_vals=w, dw_vals=dw, A_n=A_n, I_w=I_w,
        gamma=math.nan, lambda1=math.nan, phi0_vals=np.zeros_like(r_grid),
        tail_radius=R_h, tail_coeff=C,
    )
    gamma = compute_gamma(gs)
    lam, phi0 = principal_eigenpair(gs)
    return dataclasses.replace(gs, gamma=gamma, lambda1=lam, phi0_vals=phi0)


def _angular_exp_times(r, log_f, n):
    """∫_{S^{n-1}} e^{-r ω_1} dω · exp(log_f), evaluated without overflow."""
    nu = _bessel_order(n)
    r = np.asarray(r, dtype=float)
    safe = np.where(r > 0, r, 1.0)
    ang = (2 * math.pi) ** (n / 2) * safe ** (-nu) * special.ive(nu, safe)
    out = ang * np.exp(log_f + r)
    return np.where(r > 0, out, sphere_area(n) * np.exp(log_f))


def compute_gamma(gs: GroundState) -> float:
    """γ = ∫ w^p(y) e^{-y_1} dy, reduced to a radial integral."""
    n, p = gs.dim, gs.p
    r = gs.r_grid
    with np.errstate(divide="ignore"):
        log_wp = p * np.log(gs.w_vals)
    vals = _angular_exp_times(r, log_wp, n) * r ** (n - 1)
    body = float(integrate.simpson(vals, x=r))

    def tail_integrand(s):
        return float(_angular_exp_times(s, p * np.log(gs.tail(s)), n) * s ** (n - 1))

    tail, err = integrate.quad(tail_integrand, gs.r_max, np.inf, epsabs=1e-16, limit=200)
    total = body + tail
    if not np.isfinite(total) or err > 1e-8 * abs(total):
        raise ToleranceNotMet(f"γ quadrature did not converge (err={err:.2e})")
    return total


# --------------------------------------------------------------------------
# linearized radial operator


def _radial_operator(gs: GroundState, ell: int = 0, radius: float = 30.0, dr: float | None = None):
    """Symmetric tridiagonal form (diag, offdiag, centers, sqrt_mass) of
    Δ_ℓ - 1 + p w^{p-1} on cell centres of [0, radius].

    For n = 1, ℓ = 0 is the even sector and ℓ = 1 the odd one.
    """
    n, p = gs.dim, gs.p
    dr = dr or float(gs.r_grid[1] - gs.r_grid[0])
    radius = min(radius, gs.r_max)
    m = int(round(radius / dr))
    rc = (np.arange(m) + 0.5) * dr
    faces = np.arange(m + 1) * dr
    if n == 1:
        a = np.ones(m + 1) / dr
    else:
        a = faces ** (n - 1) / dr
    mass = rc ** (n - 1) * dr
    diag = -(a[:-1] + a[1:]) / mass
    if n == 1 and ell == 0:
        diag[0] += a[0] / mass[0]  # reflecting face at r = 0
    elif n == 1 and ell == 1:
        diag[0] -= a[0] / mass[0]  # antisymmetric ghost: flux doubles
    if n >= 2 and ell > 0:
        diag -= ell * (ell + n - 2) / rc**2
    diag += -1.0 + p * gs.w(rc) ** (p - 1)
    off = a[1:-1] / np.sqrt(mass[:-1] * mass[1:])
    return diag, off, rc, np.sqrt(mass)


def principal_eigenpair(gs: GroundState, max_iter: int = 2000, tol: float = 1e-13):
    """Largest eigenvalue λ1 and radial eigenfunction φ0 (max φ0 = 1) of
    Δ - 1 + p w^{p-1}, by shifted inverse iteration on the radial operator."""
    diag, off, rc, sqrt_mass = _radial_operator(gs)
    # the discrete Laplacian is negative semidefinite, so the potential maximum
    # bounds λ1 from above and σ I - T is positive definite
    sigma = float(np.max(-1.0 + gs.p * gs.w(rc) ** (gs.p - 1))) + 1e-3
    ab = np.zeros((2, diag.size))
    ab[0, 1:] = -off
    ab[1] = sigma - diag
    chol = linalg.cholesky_banded(ab)

    def T(x):
        y = diag * x
        y[:-1] += off * x[1:]
        y[1:] += off * x[:-1]
        return y

    x = np.exp(-rc)
    x /= np.linalg.norm(x)
    lam_old = math.inf
    for it in range(max_iter):
        x = linalg.cho_solve_banded((chol, False), x)
        x /= np.linalg.norm(x)
        lam = float(x @ T(x))
        if abs(lam - lam_old) < tol * max(1.0, abs(lam)):
            if np.linalg.norm(T(x) - lam * x) < 1e-8:
                break
        lam_old = lam
    else:
        raise IterationDiverged(f"inverse iteration did not converge in {max_iter} steps")

    phi = x / sqrt_mass
    phi *= np.sign(phi[np.argmax(np.abs(phi))])
    phi /= phi.max()
    # even extension through r = 0 for the interpolation onto the table grid
    spline = CubicSpline(np.r_[-rc[::-1], rc], np.r_[phi[::-1], phi])
    vals = np.where(gs.r_grid <= rc[-1], spline(np.minimum(gs.r_grid, rc[-1])), 0.0)
    vals = np.maximum(vals, 0.0)
    return lam, vals / vals.max()


def nondegeneracy_gap(gs: GroundState) -> dict:
    """Spectral check of the kernel structure of the linearized operator.

    Removes φ0 (top of the radial sector) and the n translation modes (top of the
    ℓ = 1 sector) and returns the largest remaining eigenvalue as -c.
    """
    out = {}
    tops = []
    for ell in (0, 1, 2):
        if gs.dim == 1 and ell == 2:
            continue
        d, e, _, _ = _radial_operator(gs, ell=ell)
        ev = linalg.eigh_tridiagonal(d, e, eigvals_only=True, select="i",
                                     select_range=(d.size - 2, d.size - 1))
        out[f"sector_{ell}"] = ev[::-1].tolist()
        tops.append(ev[0] if ell in (0, 1) else ev[1])
    out["translation_eigenvalue"] = out["sector_1"][0]
    out["gap"] = -float(max(tops))
    return out
