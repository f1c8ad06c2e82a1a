import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import sparse
from scipy.sparse import linalg as spla

from interior_spikes import Domain, MeshTooCoarse, PointOutsideDomain, build_grid

SQUARE = Domain.rectangle((0, 1), (0, 1), 0.05)


@pytest.fixture(scope="module")
def coarse_square():
    return build_grid(SQUARE, 0.25)


@pytest.fixture(scope="module")
def disk_grid():
    return build_grid(Domain.disk((0, 0), 1.0, 0.1), 0.25)


def test_square_node_count_and_row_sums(coarse_square):
    assert coarse_square.shape == (80, 80)
    assert coarse_square.n_nodes == 6400
    rows = np.asarray(coarse_square.stiffness.sum(axis=1)).ravel()
    assert np.max(np.abs(rows)) < 1e-10


def test_weights_sum_to_rescaled_measure(coarse_square):
    assert coarse_square.integrate(np.ones(coarse_square.n_nodes)) == pytest.approx(400.0, rel=1e-8)


def test_constant_is_lowest_helmholtz_mode(coarse_square):
    g = coarse_square
    vals, vecs = spla.eigsh(g.helmholtz_matrix, k=1, M=sparse.diags(g.weights),
                            sigma=0.0, which="LM")
    assert vals[0] == pytest.approx(1.0, abs=1e-8)
    v = vecs[:, 0] / vecs[0, 0]
    assert np.max(np.abs(v - 1)) < 1e-6


def test_disk_area(disk_grid):
    area = disk_grid.integrate(np.ones(disk_grid.n_nodes))
    assert abs(area - math.pi / 0.1**2) < 1e-3 * math.pi / 0.1**2


def test_disk_operator_symmetric_with_zero_rows(disk_grid):
    S = disk_grid.stiffness
    assert abs(S - S.T).max() < 1e-12
    assert np.max(np.abs(np.asarray(S.sum(axis=1)).ravel())) < 1e-10


@pytest.mark.parametrize("domain, q, distance, mirror", [
    (Domain.interval(0, 1, 0.05), [0.3], 0.3, [-0.3]),
    (Domain.disk((0, 0), 1.0, 0.05), [0.5, 0.0], 0.5, [1.5, 0.0]),
    (SQUARE, [0.5, 0.2], 0.2, [0.5, -0.2]),
])
def test_reflection_examples(domain, q, distance, mirror):
    g = domain.reflect_point(q)
    assert g.distance == pytest.approx(distance, abs=1e-15)
    assert np.allclose(g.reflection, mirror, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(x=st.floats(0.01, 0.99), y=st.floats(0.01, 0.99),
       shape=st.sampled_from(["rectangle", "disk"]))
def test_reflection_geometry(x, y, shape):
    if shape == "rectangle":
        dom, q = SQUARE, np.array([x, y])
    else:
        dom = Domain.disk((0, 0), 1.0, 0.05)
        q = np.array([x, y]) * 0.7
    g = dom.reflect_point(q)
    assert abs(np.linalg.norm(q - g.reflection) - 2 * g.distance) < 1e-12
    assert np.allclose(g.nearest, 0.5 * (q + g.reflection), atol=1e-12)
    assert abs(dom.boundary_distance(g.nearest)) < 1e-12


def test_outside_point_rejected():
    with pytest.raises(PointOutsideDomain):
        SQUARE.reflect_point([1.2, 0.5])


def test_mesh_too_coarse():
    with pytest.raises(MeshTooCoarse):
        build_grid(SQUARE, 0.5)


def test_mesh_must_divide_extent():
    with pytest.raises(ValueError):
        build_grid(Domain.interval(0, 1, 0.05), 0.15)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), which=st.sampled_from(["square", "disk", "interval"]))
def test_discrete_green_identity(seed, which):
    grid = {
        "square": lambda: build_grid(Domain.rectangle((0, 0.4), (0, 0.3), 0.05), 0.25),
        "disk": lambda: build_grid(Domain.disk((0, 0), 0.5, 0.1), 0.25),
        "interval": lambda: build_grid(Domain.interval(0, 1, 0.05), 0.25),
    }[which]()
    rng = np.random.default_rng(seed)
    u, v = rng.standard_normal((2, grid.n_nodes))
    lhs = grid.inner(grid.laplacian(u), v)
    rhs = grid.inner(u, grid.laplacian(v))
    assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


def _helmholtz_error(h, order):
    # u = cos(π y / L) has zero flux at both ends of [0, L]
    dom = Domain.interval(0, 1, 0.05)
    grid = build_grid(dom, h, order=order)
    L = 20.0
    y = grid.coords[:, 0]
    k = math.pi / L
    exact = np.cos(k * y)
    u = grid.solve_helmholtz((k**2 + 1) * exact)
    return np.max(np.abs(u - exact))


@pytest.mark.parametrize("order, expected", [(2, 2.0), (4, 4.0)])
def test_convergence_order(order, expected):
    errors = [_helmholtz_error(h, order) for h in (0.25, 0.125, 0.0625)]
    rates = np.log2(np.array(errors[:-1]) / np.array(errors[1:]))
    assert np.all(rates > expected - 0.3)


def test_2d_convergence_order():
    errs = []
    for h in (0.25, 0.125):
        grid = build_grid(Domain.rectangle((0, 0.5), (0, 0.5), 0.05), h, order=2)
        k = math.pi / 10.0
        x, y = grid.coords.T
        exact = np.cos(k * x) * np.cos(k * y)
        u = grid.solve_helmholtz((2 * k**2 + 1) * exact)
        errs.append(np.max(np.abs(u - exact)))
    assert math.log2(errs[0] / errs[1]) > 1.7
