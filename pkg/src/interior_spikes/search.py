"""Maximizing the reduced energy over admissible configurations and the insertion ladder."""
from __future__ import annotations

import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .ansatz import Configuration, SpikeCache
from .domain import Domain, Grid
from .energy import EnergyReport, reduced_energy
from .errors import InfeasibleConfiguration, NoClearance
from .ground_state import GroundState
from .verify import SolutionCertificate, certify

log = logging.getLogger(__name__)

ACCEPT_RTOL = 1e-13
NOISE_FACTOR = 4.0
INTERIOR_RTOL = 1e-6
# Insertion needs ρε of clearance from every spike and from the mirror image of
# the new spike, which sits at twice the boundary distance.
CLEARANCE_FACTOR = 1.0
BOUNDARY_FACTOR = 2.0


class EnergyEvaluator:
    """Memoized M_ε(Q) for one ground state and grid."""

    def __init__(self, gs: GroundState, grid: Grid, *, eta: float = 0.5, **reduce_kw):
        self.gs = gs
        self.grid = grid
        self.eta = eta
        self.reduce_kw = reduce_kw
        self.cache = SpikeCache(gs, grid)
        self._values: dict = {}
        self._noise: dict = {}
        self._lock = threading.Lock()
        self.evaluations = 0

    def _key(self, config: Configuration):
        q = config.points / (self.grid.epsilon * self.grid.h)
        return (config.rho, tuple(np.round(q.ravel() * 1e12).astype(np.int64).tolist()))

    def report(self, config: Configuration) -> EnergyReport:
        rep = reduced_energy(self.gs, self.grid, config, cache=self.cache, eta=self.eta,
                             **self.reduce_kw)
        with self._lock:
            self.evaluations += 1
            self._values[self._key(config)] = rep.M_eps
        return rep

    def noise_floor(self, rho: float) -> float:
        """Spread of a single spike's energy as its centre slides across one mesh
        cell.  Energy differences below this are discretization texture."""
        if rho not in self._noise:
            dom = self.grid.domain
            centre = dom.bounding_box.mean(axis=1)
            cell = self.grid.h * dom.epsilon
            vals = []
            for frac in np.linspace(0.0, 1.0, 5):
                q = centre.copy()
                q[0] += frac * cell
                vals.append(self(Configuration(dom, q, rho)))
            self._noise[rho] = float(np.ptp(vals))
        return self._noise[rho]

    def __call__(self, config: Configuration) -> float:
        key = self._key(config)
        with self._lock:
            if key in self._values:
                return self._values[key]
        return self.report(config).M_eps


# --------------------------------------------------------------------------
# insertion


@dataclass
class ClearanceMap:
    """Clearance min(distance to nearest spike, boundary_factor · distance to ∂Ω)
    on a lattice of candidate points."""

    points: np.ndarray
    values: np.ndarray
    boundary_factor: float

    def argmax(self) -> np.ndarray:
        best = self.values.max()
        ties = np.nonzero(self.values >= best - 1e-12 * max(best, 1e-300))[0]
        order = sorted(ties, key=lambda i: tuple(self.points[i]))
        return self.points[order[0]]


def clearance(config: Configuration, x, boundary_factor: float = 1.0) -> float:
    d = config.domain.boundary_distance(x)
    if d <= 0:
        return 0.0
    c = boundary_factor * d
    if config.k:
        c = min(c, float(np.min(np.linalg.norm(config.points - np.asarray(x), axis=1))))
    return c


def clearance_map(config: Configuration, spacing: float | None = None,
                  boundary_factor: float = 1.0) -> ClearanceMap:
    """Lattice through the centre of the bounding box, default spacing ρε/4."""
    spacing = spacing or config.separation / 4
    box = config.domain.bounding_box
    centre = box.mean(axis=1)
    axes = []
    for (lo, hi), c in zip(box, centre):
        n_lo = math.floor((c - lo) / spacing)
        n_hi = math.floor((hi - c) / spacing)
        axes.append(c + spacing * np.arange(-n_lo, n_hi + 1))
    grids = np.meshgrid(*axes, indexing="ij")
    pts = np.column_stack([g.ravel() for g in grids])
    pts = pts[[config.domain.contains(p) for p in pts]]
    vals = np.array([clearance(config, p, boundary_factor) for p in pts])
    return ClearanceMap(pts, vals, boundary_factor)


def _refine_1d(config: Configuration, boundary_factor: float):
    """Exact clearance maximizer on an interval: the best gap midpoint."""
    a, b = config.domain.extents
    beta = boundary_factor
    qs = np.sort(config.points[:, 0])
    if qs.size == 0:
        return np.array([(a + b) / 2]), beta * (b - a) / 2
    cands = [((qs[0] + beta * a) / (1 + beta), beta * (qs[0] - a) / (1 + beta))]
    cands += [((x + y) / 2, (y - x) / 2) for x, y in zip(qs[:-1], qs[1:])]
    cands.append(((qs[-1] + beta * b) / (1 + beta), beta * (b - qs[-1]) / (1 + beta)))
    best = max(v for _, v in cands)
    x = min(x for x, v in cands if v >= best * (1 - 1e-12))
    return np.array([x]), best


def insert_spike(config: Configuration, *, clearance_factor: float = CLEARANCE_FACTOR,
                 boundary_factor: float = BOUNDARY_FACTOR, spacing: float | None = None,
                 delta: float | None = None) -> Configuration:
    """Add a spike where the clearance is largest.

    The lattice maximizer (ties by lexicographic order) is refined continuously:
    exactly on an interval, by Nelder-Mead elsewhere.  Raises NoClearance when the
    clearance is below clearance_factor · ρε or the packing budget
    k+1 ≤ δ/(ρε)^n is exceeded.
    """
    dom = config.domain
    if delta is not None and config.k + 1 > delta / config.separation**dom.dim:
        raise NoClearance(f"packing budget exhausted: k+1={config.k + 1} > "
                          f"δ/(ρε)^n={delta / config.separation**dom.dim:.3f}")
    need = clearance_factor * config.separation
    if dom.dim == 1:
        x, val = _refine_1d(config, boundary_factor)
    else:
        cmap = clearance_map(config, spacing, boundary_factor)
        if cmap.points.size == 0:
            raise NoClearance("no candidate points inside the domain")
        x0 = cmap.argmax()
        res = optimize.minimize(lambda x: -clearance(config, x, boundary_factor), x0,
                                method="Nelder-Mead",
                                options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 2000})
        x = res.x if -res.fun >= clearance(config, x0, boundary_factor) else x0
        val = clearance(config, x, boundary_factor)
    if val < need * (1 - 1e-12):
        raise NoClearance(f"largest clearance {val:.6g} is below the required {need:.6g}")
    new = config.added(x)
    if not new.is_feasible():
        raise NoClearance("insertion point violates the configuration constraints: "
                          + "; ".join(new.violations()))
    return new


# --------------------------------------------------------------------------
# local maximization


@dataclass
class SearchState:
    config: Configuration
    M: float
    C: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    evaluations: int = 0

    @property
    def k(self) -> int:
        return self.config.k

    @property
    def margins(self) -> dict:
        return self.config.margins()


def _project(config: Configuration, i: int, move: np.ndarray, iters: int = 30):
    """Largest fraction of `move` for spike i that keeps the configuration feasible."""
    def at(t):
        pts = config.points.copy()
        pts[i] += t * move
        return config.with_points(pts)

    full = at(1.0)
    if full.is_feasible():
        return full
    lo, hi = 0.0, 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if at(mid).is_feasible():
            lo = mid
        else:
            hi = mid
    return at(lo) if lo > 1e-3 else None


def local_maximize(config: Configuration, evaluator: EnergyEvaluator, *, budget: int = 5000,
                   initial_step: float | None = None, min_step: float | None = None,
                   jobs: int = 1, C: dict | None = None) -> SearchState:
    """Projected coordinate ascent on M_ε.

    Each spike in turn tries ± moves along every axis; the better improving trial
    is accepted (the + move on ties).  The step starts at ρε/4 and is halved after
    a sweep without improvement, down to a quarter mesh cell hε/4.  An
    improvement counts only above k times a few noise floors (see
    `EnergyEvaluator.noise_floor`), and never below 1e-13 |M|.
    """
    config.require_feasible()
    grid = evaluator.grid
    step = initial_step or config.separation / 4
    min_step = min_step or grid.h * config.epsilon / 4
    start_evals = evaluator.evaluations
    floor = NOISE_FACTOR * config.k * evaluator.noise_floor(config.rho)
    M = evaluator(config)
    state = SearchState(config=config, M=M, C=dict(C or {}))
    pool = ThreadPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        while step >= min_step and evaluator.evaluations - start_evals < budget:
            improved = False
            for i in range(config.k):
                for j in range(config.domain.dim):
                    trials = []
                    for sign in (1.0, -1.0):
                        move = np.zeros(config.domain.dim)
                        move[j] = sign * step
                        cand = _project(state.config, i, move)
                        if cand is not None:
                            trials.append(cand)
                    if not trials:
                        continue
                    values = (list(pool.map(evaluator, trials)) if pool
                              else [evaluator(t) for t in trials])
                    best = int(np.argmax(values))
                    gain = max(floor, ACCEPT_RTOL * max(1.0, abs(state.M)))
                    if values[best] > state.M + gain:
                        state.config, state.M = trials[best], values[best]
                        state.history.append((i, j, float(step), float(values[best])))
                        improved = True
            if not improved:
                step /= 2
    finally:
        if pool:
            pool.shutdown()
    state.evaluations = evaluator.evaluations - start_evals
    k = state.config.k
    state.C[k] = max(state.C.get(k, -math.inf), state.M)
    return state


@dataclass
class RefinementReport:
    c_before: float
    c_after: float
    iterations: int
    accepted: bool


def refine_critical_point(state: SearchState, evaluator: EnergyEvaluator, *, max_iter: int = 6,
                          step: float | None = None, c_tol: float = 1e-13):
    """Newton iteration on the multiplier equation c(Q) = 0 started at a maximizer.

    Coordinate ascent cannot place spikes more accurately than the energy noise
    allows; the multipliers are smooth in Q and pin the critical point down far
    better.  The Jacobian ∂c/∂Q is taken by central differences.  The refined
    point is kept only if it is feasible, reduces max|c| and does not lower M
    by more than the noise allowance.  Returns (state, report).
    """
    config = state.config
    n = config.domain.dim
    kn = config.k * n
    step = step or evaluator.grid.h * config.epsilon / 4

    def multipliers(cfg):
        return evaluator.report(cfg).reduced.c.ravel()

    c = multipliers(config)
    c0 = best = float(np.max(np.abs(c))) if kn else 0.0
    best_config, it = config, 0
    while kn and best > c_tol and it < max_iter:
        it += 1
        jac = np.zeros((kn, kn))
        for col in range(kn):
            i, j = divmod(col, n)
            cols = []
            for sign in (1.0, -1.0):
                pts = best_config.points.copy()
                pts[i, j] += sign * step
                cols.append(multipliers(best_config.with_points(pts)))
            jac[:, col] = (cols[0] - cols[1]) / (2 * step)
        try:
            move = np.linalg.solve(jac, -c)
        except np.linalg.LinAlgError:
            break
        trial = best_config.with_points(best_config.points + move.reshape(-1, n))
        if not trial.is_feasible():
            break
        c_trial = multipliers(trial)
        size = float(np.max(np.abs(c_trial)))
        if size >= best:
            break
        best_config, c, best = trial, c_trial, size
    accepted = best_config is not config
    if accepted:
        floor = NOISE_FACTOR * config.k * evaluator.noise_floor(config.rho)
        M = evaluator(best_config)
        if M < state.M - floor:
            accepted, best = False, c0
        else:
            state.config, state.M = best_config, M
            k = best_config.k
            state.C[k] = max(state.C.get(k, -math.inf), M)
    return state, RefinementReport(c0, best, it, accepted)


def energy_gradient(evaluator: EnergyEvaluator, config: Configuration,
                    step: float | None = None) -> np.ndarray:
    """Central-difference gradient of M_ε in physical coordinates, shape (k, n)."""
    step = step or evaluator.grid.h * config.epsilon
    g = np.zeros_like(config.points)
    for i in range(config.k):
        for j in range(config.domain.dim):
            vals = []
            for sign in (1.0, -1.0):
                pts = config.points.copy()
                pts[i, j] += sign * step
                vals.append(evaluator(config.with_points(pts)))
            g[i, j] = (vals[0] - vals[1]) / (2 * step)
    return g


# --------------------------------------------------------------------------
# checks


@dataclass
class StepReport:
    k: int
    C_k: float
    C_k1: float
    margin: float
    threshold: float
    status: str

    @property
    def passed(self) -> bool:
        return self.status == "PASS"


def verify_energy_step(state_k: SearchState, state_k1: SearchState, gs: GroundState) -> StepReport:
    """C_{k+1} - C_k - I(w) against the threshold -(γ/4) e^{-ρ}."""
    rho = state_k1.config.rho
    threshold = -(gs.gamma / 4) * math.exp(-rho)
    if state_k1.k != state_k.k + 1 or not state_k1.config.is_feasible():
        return StepReport(state_k.k, state_k.M, state_k1.M, math.nan, threshold, "REJECTED")
    margin = state_k1.M - state_k.M - gs.I_w
    return StepReport(state_k.k, state_k.M, state_k1.M, margin, threshold,
                      "PASS" if margin > threshold else "FAIL")


@dataclass
class InteriorReport:
    pair_margin: float
    reflection_margin: float
    active: list
    passed: bool


def verify_interior_maximizer(state, rtol: float = INTERIOR_RTOL) -> InteriorReport:
    """Strict interiority: every clearance exceeds ρε (1 + rtol)."""
    config = state.config if isinstance(state, SearchState) else state
    m = config.margins()
    active = []
    if m["pair"] <= 1 + rtol:
        active.append(f"pair {m['pair_index']}")
    if m["reflection"] <= 1 + rtol:
        i, j = m["reflection_index"]
        active.append(f"spike {i} against mirror image of spike {j}")
    return InteriorReport(m["pair"], m["reflection"], active, not active)


# --------------------------------------------------------------------------
# ladder


@dataclass
class LadderStep:
    k: int
    state: SearchState
    step: StepReport | None
    interior: InteriorReport
    certificate: SolutionCertificate | None

    def row(self) -> dict:
        s, cert = self.step, self.certificate
        return {
            "k": self.k,
            "C_k": self.state.M,
            "step_margin": s.margin if s else math.nan,
            "threshold": s.threshold if s else math.nan,
            "step_status": s.status if s else "BASE",
            "pair_margin": self.interior.pair_margin,
            "reflection_margin": self.interior.reflection_margin,
            "interior": "PASS" if self.interior.passed else "FAIL",
            "c_max": cert.c_max if cert else math.nan,
            "residual": cert.residual if cert else math.nan,
            "newton_iterations": cert.newton_iterations if cert else -1,
            "count": cert.count if cert else -1,
            "min_u": cert.min_u if cert else math.nan,
            "certificate": ("PASS" if cert.passed else "FAIL") if cert else "SKIPPED",
            "Q": " ".join(repr(float(x)) for x in self.state.config.points.ravel()),
        }


@dataclass
class LadderResult:
    steps: list
    stopped_by: str

    @property
    def max_k(self) -> int:
        return self.steps[-1].k if self.steps else 0

    @property
    def all_steps_pass(self) -> bool:
        return all(s.step.passed for s in self.steps if s.step is not None)


def run_ladder(gs: GroundState, grid: Grid, rho: float, *, k_max: int | None = None,
               clearance_factor: float = CLEARANCE_FACTOR,
               boundary_factor: float = BOUNDARY_FACTOR, delta: float | None = None,
               certify_steps: bool = True, jobs: int = 1, budget: int = 5000,
               eta: float = 0.5, refine: bool = True, certify_options: dict | None = None,
               **reduce_kw) -> LadderResult:
    """insert -> maximize -> refine -> check, for k = 1, 2, ... until NoClearance
    or k_max."""
    domain: Domain = grid.domain
    evaluator = EnergyEvaluator(gs, grid, eta=eta, **reduce_kw)
    corner = grid.h * domain.epsilon if domain.shape == "rectangle" else 0.0
    config = Configuration(domain, np.zeros((0, domain.dim)), rho, corner_clearance=corner)
    prev = SearchState(config=config, M=0.0, C={0: 0.0})
    steps, stopped_by = [], "k_max"
    while k_max is None or prev.k < k_max:
        try:
            trial = insert_spike(prev.config, clearance_factor=clearance_factor,
                                 boundary_factor=boundary_factor, delta=delta)
        except NoClearance as exc:
            log.info("ladder stops at k=%d: %s", prev.k, exc)
            stopped_by = "NoClearance"
            break
        state = local_maximize(trial, evaluator, budget=budget, jobs=jobs, C=prev.C)
        if refine:
            state, _ = refine_critical_point(state, evaluator)
        step = verify_energy_step(prev, state, gs)
        interior = verify_interior_maximizer(state)
        cert = None
        if certify_steps:
            rep = evaluator.report(state.config)
            cert = certify(rep.reduced, gs, cache=evaluator.cache, eta=eta,
                           **(certify_options or {}), **reduce_kw)
        log.info("k=%d M=%.15g step=%s interior=%s", state.k, state.M, step.status,
                 "PASS" if interior.passed else "FAIL")
        steps.append(LadderStep(state.k, state, step, interior, cert))
        prev = state
    return LadderResult(steps, stopped_by)


def check_state(state: SearchState) -> None:
    if not state.config.is_feasible():
        raise InfeasibleConfiguration("; ".join(state.config.violations()))
