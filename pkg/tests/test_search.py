import math

import numpy as np
import pytest

from interior_spikes import Configuration, Domain, NoClearance, build_grid
from interior_spikes.search import (
    EnergyEvaluator, SearchState, clearance, clearance_map, energy_gradient, insert_spike,
    local_maximize, refine_critical_point, run_ladder, verify_energy_step,
    verify_interior_maximizer,
)

EPS = 0.04


@pytest.fixture(scope="module")
def line():
    return build_grid(Domain.interval(0.0, 1.0, EPS), 0.01)


@pytest.fixture(scope="module")
def evaluator(gs1, line):
    return EnergyEvaluator(gs1, line)


def _empty(domain, rho=8.0):
    return Configuration(domain, np.zeros((0, domain.dim)), rho)


def test_first_insertion_in_disk_is_centre():
    dom = Domain.disk((0.3, -0.2), 1.0, 0.05)
    config = insert_spike(_empty(dom))
    assert np.allclose(config.points[0], [0.3, -0.2], atol=1e-9)


def test_first_insertion_in_square_is_centre():
    dom = Domain.rectangle((0, 1), (0, 1), 0.05)
    config = insert_spike(_empty(dom))
    assert np.allclose(config.points[0], [0.5, 0.5], atol=1e-9)


def test_clearance_plateau_resolved_lexicographically():
    # every point of the segment x = 0.5, 0.5 <= y <= 1.5 is equally clear
    dom = Domain.rectangle((0, 1), (0, 2), 0.05)
    config = insert_spike(_empty(dom))
    assert np.allclose(config.points[0], [0.5, 0.5], atol=1e-9)


@pytest.mark.parametrize("factor", [1.0, 3.0])
def test_repeated_insertion_count(factor):
    eps, rho = 0.02, 8.0
    config = _empty(Domain.interval(0, 1, eps), rho)
    with pytest.raises(NoClearance):
        while True:
            config = insert_spike(config, clearance_factor=factor)
    assert config.k >= math.floor(1 / (3 * rho * eps)) - 1
    assert config.is_feasible()


def test_packing_budget_stops_insertion():
    config = _empty(Domain.interval(0, 1, 0.02))
    # δ/(ρε) = 0.2/0.16 leaves room for one spike
    config = insert_spike(config, delta=0.2)
    with pytest.raises(NoClearance):
        insert_spike(config, delta=0.2)


def test_clearance_map_properties():
    dom = Domain.rectangle((0, 1), (0, 1), 0.05)
    config = Configuration(dom, [[0.3, 0.3], [0.7, 0.6]], 4.0)
    cmap = clearance_map(config, spacing=0.05)
    assert np.all(cmap.values >= 0)
    assert clearance(config, [0.3, 0.3]) == 0.0
    best = cmap.argmax()
    assert cmap.values.max() == pytest.approx(clearance(config, best, 1.0))


def test_clearance_ties_break_lexicographically():
    dom = Domain.interval(0, 1, 0.02)
    config = Configuration(dom, [[0.5]], 8.0)
    new = insert_spike(config, boundary_factor=1.0)
    assert new.points[-1, 0] == pytest.approx(0.25)


def test_centre_start_accepts_no_moves(gs1, line, evaluator):
    state = local_maximize(Configuration(line.domain, [[0.5]], 8.0), evaluator)
    assert state.history == []
    assert state.config.points[0, 0] == 0.5


def test_single_spike_moves_to_centre(gs1, line, evaluator):
    start = Configuration(line.domain, [[0.3]], 8.0)
    state = local_maximize(start, evaluator)
    # one-parameter scan oracle
    xs = np.linspace(0.2, 0.8, 61)
    scan = [evaluator(start.with_points([[x]])) for x in xs]
    assert abs(state.config.points[0, 0] - xs[int(np.argmax(scan))]) <= 0.01
    assert state.M >= max(scan) - 1e-12
    grad = energy_gradient(evaluator, state.config)
    assert np.max(np.abs(grad)) < 1e-6 * gs1.I_w / EPS


def test_pair_balances_wall_and_mutual_repulsion(gs1, line, evaluator):
    start = Configuration(line.domain, [[0.3], [0.65]], 8.0)
    state = local_maximize(start, evaluator)
    state, _ = refine_critical_point(state, evaluator)
    a, b = np.sort(state.config.points[:, 0])
    assert a + b == pytest.approx(1.0, abs=1e-3)
    mutual = gs1.w((b - a) / EPS)
    wall = gs1.w(2 * a / EPS)
    assert abs(mutual / wall - 1) < 0.25


@pytest.mark.parametrize("start", [[[0.2], [0.6]], [[0.16], [0.84]], [[0.5], [0.84]]])
def test_maximization_never_lowers_energy(gs1, line, evaluator, start):
    config = Configuration(line.domain, start, 8.0)
    before = evaluator(config)
    state = local_maximize(config, evaluator, budget=60)
    assert state.M >= before
    assert state.config.is_feasible()
    assert state.C[2] == state.M


def test_refinement_shrinks_multipliers(gs1, line, evaluator):
    state = local_maximize(Configuration(line.domain, [[0.3], [0.7]], 8.0), evaluator)
    state, report = refine_critical_point(state, evaluator)
    assert report.c_after <= report.c_before
    assert report.c_after < 1e-9


def test_first_step_passes(gs1, line, evaluator):
    empty = SearchState(_empty(line.domain), 0.0)
    one = local_maximize(Configuration(line.domain, [[0.5]], 8.0), evaluator)
    report = verify_energy_step(empty, one, gs1)
    assert report.status == "PASS"
    assert abs(report.margin) < 1e-6
    assert report.threshold == pytest.approx(-gs1.gamma / 4 * math.exp(-8))


def test_infeasible_next_state_rejected(gs1, line):
    empty = SearchState(_empty(line.domain), 0.0)
    bad = SearchState(Configuration(line.domain, [[0.01]], 8.0), 1.0)
    assert verify_energy_step(empty, bad, gs1).status == "REJECTED"


def test_clamped_pair_fails_interiority():
    dom = Domain.interval(0, 1, EPS)
    config = Configuration(dom, [[0.4], [0.4 + 8 * EPS]], 8.0)
    report = verify_interior_maximizer(config)
    assert not report.passed
    assert report.active == ["pair (0, 1)"]


def test_single_centre_spike_is_interior():
    dom = Domain.disk((0, 0), 1.0, 0.05)
    assert verify_interior_maximizer(Configuration(dom, [[0.0, 0.0]], 8.0)).passed


def test_short_ladder(gs1, line):
    result = run_ladder(gs1, line, 8.0, k_max=2)
    assert [s.k for s in result.steps] == [1, 2]
    assert result.all_steps_pass
    for s in result.steps:
        assert s.interior.passed and s.certificate.passed
    row = result.steps[-1].row()
    assert row["step_status"] == "PASS" and row["certificate"] == "PASS"
    assert len(row["Q"].split()) == 2
