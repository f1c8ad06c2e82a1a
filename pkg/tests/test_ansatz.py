import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from interior_spikes import Configuration, Domain, InfeasibleConfiguration, SpikeCache, build_grid
from interior_spikes.ansatz import (
    corrected_spike, free_spike, multi_spike_sum, projection_set, star_norm, support_radius,
    weight_field,
)

EPS = 0.02


@pytest.fixture(scope="module")
def line():
    return build_grid(Domain.interval(0.0, 1.0, EPS), 0.01)


@pytest.fixture(scope="module")
def line_cache(gs1, line):
    return SpikeCache(gs1, line, relax=True)


def test_deep_interior_correction_negligible(gs1, line, line_cache):
    spike = line_cache.get([0.5])
    assert np.max(np.abs(spike.boundary_correction)) < 1e-7 * gs1.w0


def test_deep_interior_correction_shrinks_under_refinement(gs1):
    # the unrelaxed correction is pure truncation error at d/ε = 25
    dom = Domain.interval(0.0, 1.0, EPS)
    sizes = [np.max(np.abs(corrected_spike(gs1, build_grid(dom, h, order=2), [0.5])
                           .boundary_correction)) for h in (0.02, 0.01)]
    assert sizes[1] < sizes[0] / 3


def test_deep_interior_correction_2d(gs2, square_grid):
    cache = SpikeCache(gs2, square_grid)
    spike = cache.get([0.5, 0.5])
    assert np.max(np.abs(spike.boundary_correction)) < 1e-7 * gs2.w0


def test_boundary_correction_follows_mirror_profile(gs1, line, line_cache):
    q = 5 * EPS
    spike = line_cache.get([q])
    y = line.coords[:, 0]
    near = y < 3.0
    mirror = gs1.K(np.abs(y[near] + q / EPS))
    ratio = spike.boundary_correction[near] / mirror
    assert np.all(ratio < 0)
    assert np.ptp(ratio) < 0.25 * np.abs(ratio).mean()


def test_total_boundary_flux_vanishes(gs1, line, line_cache):
    spike = line_cache.get([3 * EPS])
    assert abs(line.integrate(line.laplacian(spike.values))) < 1e-9


def test_single_term_sum_is_the_spike(gs1, line, line_cache):
    config = Configuration(line.domain, [[0.37]], 8.0)
    total, parts = multi_spike_sum(gs1, line, config, line_cache)
    assert np.array_equal(total.values, line_cache.get([0.37]).values)
    assert len(parts) == 1


def test_corrected_spikes_positive(gs1, gs2, line, line_cache, square_grid):
    assert line_cache.get([0.06]).values.min() > 0
    assert corrected_spike(gs2, square_grid, [0.2, 0.1]).values.min() > 0


def _pair_locality(gs, grid, rho, cache):
    centre = 0.5
    a, b = centre - rho * EPS / 2, centre + rho * EPS / 2
    config = Configuration(grid.domain, [[a], [b]], rho)
    total, parts = multi_spike_sum(gs, grid, config, cache)
    y = grid.coords[:, 0]
    core = np.abs(y - a / EPS) <= rho / 2
    far = (np.abs(y - a / EPS) > rho / 2) & (np.abs(y - b / EPS) > rho / 2)
    return (np.max(np.abs(total.values - parts[0].values)[core]),
            np.max(np.abs(total.values[far])))


def test_sum_is_local_around_each_spike(gs1, line, line_cache):
    scaled = []
    for rho in (8.0, 10.0, 12.0):
        near, far = _pair_locality(gs1, line, rho, line_cache)
        scaled.append((near * math.exp(rho / 2), far * math.exp(rho / 2)))
    scaled = np.array(scaled)
    # a single constant C covers all three separations
    assert np.all(scaled.max(axis=0) < 2 * scaled.min(axis=0))
    assert np.all(scaled < 4 * gs1.A_n)


def test_gram_block_dominance(gs2, square_grid):
    rho = 8.0
    config = Configuration(square_grid.domain, [[0.4, 0.5], [0.4 + rho * 0.025, 0.5]], rho)
    G = projection_set(gs2, square_grid, config).gram()
    diag = np.abs(np.diag(G))
    off = np.abs(G - np.diag(np.diag(G)))
    assert off.max() <= math.exp(-rho / 2) * diag.min()


def test_projection_directions_are_odd(gs2, square_grid):
    # the centre of a cell is a symmetry point of the lattice
    y = square_grid.coords[square_grid.nearest_node([20.0, 20.0])]
    config = Configuration(square_grid.domain, [y * 0.025], 8.0)
    Z = projection_set(gs2, square_grid, config).flat
    scale = square_grid.integrate(np.abs(Z[0]))
    assert np.max(np.abs(Z @ square_grid.weights)) < 1e-12 * scale


def test_support_radius_respected(gs2, square_grid):
    config = Configuration(square_grid.domain, [[0.5, 0.5]], 9.0)
    Z = projection_set(gs2, square_grid, config).flat
    r = np.linalg.norm(square_grid.coords - 20.0, axis=1)
    assert np.all(Z[:, r >= support_radius(9.0)] == 0)


def test_projection_norm_approaches_gradient_norm(gs1, line):
    target = gs1.grad_norm_sq()
    gaps = []
    for rho in (8.0, 10.0, 12.0):
        config = Configuration(line.domain, [[0.5]], rho)
        Z = projection_set(gs1, line, config).flat[0]
        gaps.append(abs(line.inner(Z, Z) - target) / target)
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < math.exp(-0.5 * 12)


def test_star_norm_examples(gs2, square_grid):
    config = Configuration(square_grid.domain, [[0.5, 0.5]], 8.0)
    W = weight_field(square_grid, config)
    assert star_norm(W, config, grid=square_grid) == pytest.approx(1.0, abs=1e-15)
    assert star_norm(np.zeros(square_grid.n_nodes), config, grid=square_grid) == 0.0
    node = square_grid.coords[square_grid.nearest_node([20.0, 20.0])]
    config = Configuration(square_grid.domain, [node * 0.025], 8.0)
    w = free_spike(gs2, square_grid, node)
    W = weight_field(square_grid, config)
    scan = max(abs(a) / b for a, b in zip(w, W))
    value = star_norm(w, config, eta=0.5, grid=square_grid)
    assert value == pytest.approx(scan, rel=1e-14)
    # w e^{r/2} keeps growing until w' = -w/2, so the sup sits off the centre
    at = np.linalg.norm(square_grid.coords[int(np.argmax(np.abs(w) / W))] - node)
    r = np.linspace(0, 5, 50001)
    r_star = r[np.argmax(gs2.w(r) * np.exp(r / 2))]
    assert abs(at - r_star) < square_grid.h
    assert value > gs2.w0


def test_star_norm_without_spikes_is_sup(line):
    config = Configuration(line.domain, np.zeros((0, 1)), 8.0)
    f = np.sin(np.arange(line.n_nodes))
    assert star_norm(f, config, grid=line) == np.max(np.abs(f))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), t=st.floats(-50, 50))
def test_star_norm_is_a_norm(seed, t):
    grid = build_grid(Domain.interval(0.0, 1.0, 0.05), 0.25)
    config = Configuration(grid.domain, [[0.3], [0.75]], 8.0)
    rng = np.random.default_rng(seed)
    f, g = rng.standard_normal((2, grid.n_nodes))
    nf = star_norm(f, config, grid=grid)
    assert star_norm(t * f, config, grid=grid) == pytest.approx(abs(t) * nf, rel=1e-12, abs=1e-300)
    assert star_norm(f + g, config, grid=grid) <= nf + star_norm(g, config, grid=grid) + 1e-12


def test_star_norm_rejects_bad_eta(line):
    config = Configuration(line.domain, [[0.5]], 8.0)
    with pytest.raises(ValueError):
        star_norm(np.ones(line.n_nodes), config, eta=1.0, grid=line)


def test_translation_by_one_cell(gs1, line, line_cache):
    cell = line.h * EPS
    a = line_cache.get([0.5]).values
    b = line_cache.get([0.5 + cell]).values
    assert np.max(np.abs(b[1:] - a[:-1])) < 1e-10


def test_feasibility_gate():
    dom = Domain.interval(0.0, 1.0, EPS)
    with pytest.raises(InfeasibleConfiguration):
        Configuration(dom, [[0.4], [0.4 + 7 * EPS]], 8.0).require_feasible()
    # a spike ρε/2 from the wall sits exactly ρε from its own mirror image
    assert Configuration(dom, [[4 * EPS]], 8.0).is_feasible()
    assert not Configuration(dom, [[3.9 * EPS]], 8.0).is_feasible()
    assert Configuration(dom, np.zeros((0, 1)), 8.0).is_feasible()


def test_cache_reuses_spikes(gs1, line):
    cache = SpikeCache(gs1, line)
    first = cache.get([0.31])
    assert cache.get([0.31]) is first
    assert cache.hits == 1 and len(cache) == 1
