"""Energy functional, reduced energy and the exponentially small interaction terms.

All energies are in rescaled units; multiply by ε^n for the physical domain.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .ansatz import Configuration, SpikeCache, multi_spike_sum
from .domain import Grid
from .ground_state import GroundState
from .reduction import ReducedSolution, positive_power, reduce


def energy(grid: Grid, u, p: float) -> float:
    """½∫(|∇u|² + u²) - 1/(p+1) ∫u₊^{p+1}, with the gradient term taken as the
    stiffness form so that discrete integration by parts is exact."""
    u = np.asarray(getattr(u, "values", u), dtype=float)
    quad = float(u @ (grid.stiffness @ u)) + grid.inner(u, u)
    return 0.5 * quad - grid.integrate(positive_power(u, p + 1)) / (p + 1)


def energy_parts(grid: Grid, u, p: float) -> tuple[float, float]:
    """(a, b) with J(t u) = ½ t² a - t^{p+1} b / (p+1) for t ≥ 0."""
    u = np.asarray(getattr(u, "values", u), dtype=float)
    a = float(u @ (grid.stiffness @ u)) + grid.inner(u, u)
    return a, grid.integrate(positive_power(u, p + 1))


def physical_energy(value: float, epsilon: float, dim: int) -> float:
    return value * epsilon**dim


@dataclass
class InteractionTerms:
    boundary: np.ndarray
    pair: dict
    boundary_prediction: np.ndarray
    pair_prediction: dict
    pair_prediction_boundary_form: dict

    @property
    def boundary_sum(self) -> float:
        return float(np.sum(self.boundary))

    @property
    def pair_sum(self) -> float:
        return float(sum(self.pair.values()))

    @property
    def interaction_sum(self) -> float:
        return 0.5 * self.boundary_sum + self.pair_sum

    def boundary_ratios(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.boundary / self.boundary_prediction

    def pair_ratios(self) -> dict:
        return {key: val / self.pair_prediction[key] for key, val in self.pair.items()}

    def better_pair_form(self) -> str:
        """Which prediction for the pair term is closer to quadrature, in log ratio."""
        if not self.pair:
            return "none"
        err_sep = sum(abs(np.log(v / self.pair_prediction[k])) for k, v in self.pair.items())
        err_bdy = sum(abs(np.log(v / self.pair_prediction_boundary_form[k]))
                      for k, v in self.pair.items())
        return "separation" if err_sep <= err_bdy else "boundary"


def interaction_terms(gs: GroundState, grid: Grid, config: Configuration,
                      cache: SpikeCache | None = None) -> InteractionTerms:
    """Boundary self-interaction -∫w_j^p φ_j and pair terms ∫w_i^p w_{ε,Q_j}.

    w_j is the free-space spike (lattice-relaxed when the cache relaxes), φ_j
    its boundary correction and w_{ε,Q_j} the corrected spike.  The pair term
    is exactly symmetric on the grid because
    w_i^p = (-Δ_h + 1) w_{ε,Q_i}.  Predictions use the amplitude γ times w at the
    mirror distance 2d/ε (boundary) and at the separation |Q_i - Q_j|/ε (pairs);
    the pair term is also compared against w(2d(Q_j)/ε).
    """
    cache = cache if cache is not None else SpikeCache(gs, grid)
    _, parts = multi_spike_sum(gs, grid, config, cache)
    eps = config.epsilon
    p = gs.p
    boundary = np.array([-grid.inner(s.free**p, s.boundary_correction) for s in parts])
    dists = config.boundary_distances
    bpred = gs.gamma * gs.w(2 * dists / eps) if config.k else np.zeros(0)
    pair, ppred, pbdy = {}, {}, {}
    for i in range(config.k):
        for j in range(i + 1, config.k):
            pair[(i, j)] = grid.inner(parts[i].free**p, parts[j].values)
            sep = np.linalg.norm(config.points[i] - config.points[j]) / eps
            ppred[(i, j)] = float(gs.gamma * gs.w(sep))
            pbdy[(i, j)] = float(gs.gamma * gs.w(2 * dists[j] / eps))
    return InteractionTerms(boundary, pair, np.atleast_1d(bpred), ppred, pbdy)


@dataclass
class EnergyReport:
    """J_eps is the energy of the ansatz W, M_eps that of the reduced solution W + φ."""

    k: int
    rho: float
    epsilon: float
    J_eps: float
    M_eps: float
    I_w: float
    interactions: InteractionTerms
    wall_time: float = 0.0
    reduced: ReducedSolution | None = field(default=None, repr=False)

    @property
    def expansion(self) -> float:
        return self.k * self.I_w - self.interactions.interaction_sum

    @property
    def expansion_error(self) -> float:
        return self.M_eps - self.expansion

    def row(self) -> dict:
        it = self.interactions
        return {
            "k": self.k,
            "rho": self.rho,
            "epsilon": self.epsilon,
            "M_eps": self.M_eps,
            "k_I_w": self.k * self.I_w,
            "boundary_sum": it.boundary_sum,
            "pair_sum": it.pair_sum,
            "discrepancy": self.expansion_error,
            "wall_time": self.wall_time,
        }


def reduced_energy(gs: GroundState, grid: Grid, config: Configuration,
                   cache: SpikeCache | None = None, **reduce_kw) -> EnergyReport:
    start = time.perf_counter()
    cache = cache if cache is not None else SpikeCache(gs, grid)
    red = reduce(gs, grid, config, cache=cache, **reduce_kw)
    J = energy(grid, red.base.values, gs.p)
    M = energy(grid, red.u, gs.p)
    terms = interaction_terms(gs, grid, config, cache)
    return EnergyReport(
        k=config.k, rho=config.rho, epsilon=config.epsilon, J_eps=J, M_eps=M, I_w=gs.I_w,
        interactions=terms, wall_time=time.perf_counter() - start, reduced=red,
    )


SWEEP_DISTANCES = (8.0, 10.0, 12.0)


def interaction_sweeps(gs: GroundState, grid: Grid, distances=SWEEP_DISTANCES,
                       cache: SpikeCache | None = None) -> list[dict]:
    """Quadrature of the interaction terms against γ w(distance).

    `separation` rows place two spikes symmetrically about the centre of the
    bounding box along the first axis, `distance` apart in rescaled units.
    `boundary` rows place one spike at rescaled distance distance/2 from the
    lowest face along the first axis, so that its mirror image is `distance` away.
    """
    cache = cache if cache is not None else SpikeCache(gs, grid)
    dom = grid.domain
    eps = dom.epsilon
    box = dom.bounding_box
    centre = box.mean(axis=1)
    rows = []
    for s in distances:
        a, b = centre.copy(), centre.copy()
        a[0] -= s * eps / 2
        b[0] += s * eps / 2
        terms = interaction_terms(gs, grid, Configuration(dom, [a, b], s), cache)
        rows.append({"sweep": "separation", "distance": float(s),
                     "quadrature": terms.pair[(0, 1)], "prediction": terms.pair_prediction[(0, 1)]})
    for s in distances:
        q = centre.copy()
        q[0] = box[0, 0] + s * eps / 2
        terms = interaction_terms(gs, grid, Configuration(dom, [q], s), cache)
        rows.append({"sweep": "boundary", "distance": float(s),
                     "quadrature": float(terms.boundary[0]),
                     "prediction": float(terms.boundary_prediction[0])})
    for row in rows:
        row["ratio"] = row["quadrature"] / row["prediction"]
    return rows
