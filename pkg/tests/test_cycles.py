import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from orbitshift import fields as F
from orbitshift.cycles import (classify_multipliers, closure_residuals, cycle_to_dict,
                               eigen_decomposition, evolve_jacobian, find_cycle,
                               full_period_jacobian, poincare_section, ribbon_columns, ribbon_rows,
                               rotation_number, scan_seeds, smallest_period)
from orbitshift.errors import ConvergenceError, DegenerateCycleError


def test_standard_map_fixed_point(map_fixed_point):
    assert np.allclose(map_fixed_point.point, [0.0, 0.0], atol=1e-10)
    assert np.allclose(map_fixed_point.jac_full[0], [[2.0, 1.0], [1.0, 1.0]])
    assert map_fixed_point.classification == "X_cycle"


def test_map_period_two_jacobian_is_square(standard_map, map_fixed_point):
    c2 = find_cycle(standard_map, np.array([0.05, -0.02]), 2)
    assert np.allclose(c2.point, 0.0, atol=1e-10)
    J = map_fixed_point.jac_full[0]
    assert np.allclose(c2.jac_full[0], J @ J, atol=1e-9)


def test_toroidal_axis_cycle(axis_cycle):
    assert np.allclose(axis_cycle.point, [1.0, 0.0], atol=1e-10)
    assert abs(np.linalg.det(axis_cycle.jac_full[0]) - 1.0) <= 1e-8
    assert axis_cycle.classification == "O_cycle"


def test_x_cycle_closure_and_class(x_cycle):
    assert x_cycle.residual <= 1e-10
    assert x_cycle.classification == "X_cycle"
    assert np.all(closure_residuals(x_cycle) <= 1e-9)
    dets = [np.linalg.det(J) for J in x_cycle.jac_full]
    assert np.ptp(dets) <= 1e-6 and abs(dets[0] - 1.0) <= 1e-7


def test_x_cycle_symmetry_partner(toroidal, x_cycle):
    # (R, Z, phi) -> (R, -Z, -phi) maps field lines to field lines, so the
    # other point of the period-2 orbit on phi = 0 is the mirror image
    from orbitshift.cycles import return_map
    partner = return_map(toroidal, x_cycle.point, 1)[0]
    assert np.allclose(partner, x_cycle.point * [1.0, -1.0], atol=1e-9)


def test_grid_scan_seeds_the_x_cycle(toroidal, x_cycle):
    seeds = scan_seeds(toroidal, 2, ((0.85, 1.0), (-0.32, -0.2)), (5, 5), keep=2)
    c = find_cycle(toroidal, seeds[0][1], 2)
    assert np.allclose(c.point, x_cycle.point, atol=1e-9)


def test_newton_quadratic_convergence(x_cycle):
    h = x_cycle.history
    pairs = [(a, b) for a, b in zip(h, h[1:]) if a <= 1e-4]
    assert pairs
    for a, b in pairs:
        assert b <= max(1e3 * a * a, 1e-11)


def test_evolved_jacobian_matches_direct(x_cycle):
    idx = int(np.argmin(np.abs(x_cycle.sections - math.pi)))
    direct = full_period_jacobian(x_cycle, idx)
    J = x_cycle.jac_full[idx]
    assert np.linalg.norm(J - direct) <= 1e-6 * np.linalg.norm(direct)
    again = evolve_jacobian(x_cycle)
    assert np.allclose(again, x_cycle.jac_full, rtol=0, atol=1e-12)


def test_spectrum_is_section_independent(x_cycle):
    ref = x_cycle.eigvals[0]
    for vals in x_cycle.eigvals[1:]:
        assert np.max(np.abs(vals - ref) / np.abs(ref)) <= 1e-8


def test_commutator_vanishes_on_axisymmetric_axis():
    clean = F.make_system("model_toroidal", {"island_amp": 0.0})
    c = find_cycle(clean, np.array([1.01, 0.0]), 1)
    assert np.allclose(c.jac_full, c.jac_full[0], atol=1e-9)


def test_flow_cycles_have_field_eigenvector():
    hopf = F.make_system("hopf")
    c = find_cycle(hopf, np.array([0.75, 0.05]), 1)
    assert c.period == pytest.approx(2 * math.pi, rel=1e-9)
    for J, x in zip(c.jac_full, c.points):
        b = hopf(x)
        assert np.linalg.norm(J @ b - b) <= 1e-6 * np.linalg.norm(b)
    assert np.allclose(c.multipliers(), [math.exp(-2 * math.pi)], rtol=1e-6)


def test_3d_embedding_reproduces_reduced_multipliers(x_cycle3d, x_cycle):
    assert x_cycle3d.classification == "X_cycle"
    assert np.allclose(np.sort(x_cycle3d.multipliers().real), np.sort(x_cycle.eigvals[0].real),
                       rtol=1e-6)
    for J, x in zip(x_cycle3d.jac_full, x_cycle3d.points):
        b = x_cycle3d.system(x)
        assert np.linalg.norm(J @ b - b) <= 1e-6 * np.linalg.norm(b)


@pytest.mark.parametrize("vals,cls", [
    ([1.94965374, 0.51291252], "X_cycle"),
    ([np.exp(0.3j), np.exp(-0.3j)], "O_cycle"),
    ([1.0, 1.0], "degenerate"),
    ([1.0 + 3e-5, 1.0 - 3e-5], "degenerate"),
    ([-1.0, -1.0], "nonhyperbolic_other"),
    ([1.5, np.exp(0.2j)], "nonhyperbolic_other"),
])
def test_classification(vals, cls):
    assert classify_multipliers(vals) == cls


@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4))
def test_eigen_normalization(entries):
    M = np.array(entries).reshape(2, 2) + 0.1 * np.eye(2)
    vals, vecs = eigen_decomposition(M)
    for i in range(2):
        v = vecs[:, i]
        assert np.linalg.norm(v) == pytest.approx(1.0)
        assert np.allclose(M @ v, vals[i] * v, atol=1e-8 * max(1.0, np.abs(M).max()))
        first = v[np.flatnonzero(np.abs(v) > 1e-12)[0]]
        assert first.real > 0 or (abs(first.real) < 1e-12 and first.imag >= 0)


def test_degenerate_resonance_is_reported():
    clean = F.make_system("model_toroidal", {"island_amp": 0.0})
    r = F.resonant_radius(0.5)
    try:
        c = find_cycle(clean, np.array([1.0 + r, 0.0]), 2)
    except DegenerateCycleError:
        return
    assert c.classification == "degenerate"


def test_newton_failure_raises(toroidal):
    with pytest.raises(ConvergenceError) as err:
        find_cycle(toroidal, np.array([1.2, 0.1]), 2, max_iter=1)
    assert len(err.value.history) >= 1
    with pytest.raises(ValueError):
        find_cycle(toroidal, np.array([1.2, 0.1]), 0)


def test_smallest_period(standard_map):
    clean = F.make_system("model_toroidal", {"island_amp": 0.0})
    r = F.resonant_radius(0.5)
    assert smallest_period(clean, np.array([1.0 + r, 0.0]), 4, tol=1e-6) == 2
    assert smallest_period(standard_map, np.array([0.0, 0.0]), 3) == 1


def test_poincare_axis_is_fixed(toroidal):
    (sec,) = poincare_section(toroidal, [[1.0, 0.0]], 10)
    assert sec.flag == "ok" and np.allclose(sec.points, [1.0, 0.0], atol=1e-9)


def test_poincare_integrable_standard_map():
    sm = F.make_system("standard_map", {"K": 0.0})
    (sec,) = poincare_section(sm, [[0.3, 0.7]], 20)
    assert np.allclose(sec.points[:, 1], 0.7)


def test_poincare_flags_domain_exit():
    henon = F.make_system("henon")
    good, bad = poincare_section(henon, [[0.1, 0.05], [5.0, 5.0]], 40)
    assert good.flag == "ok" and bad.flag == "domain_exit"
    assert np.all(np.isfinite(good.points)) and len(bad.points) == 40


def test_island_chain_rotation_number(toroidal, x_cycle):
    seed = x_cycle.point + np.array([0.0, 0.003])
    (sec,) = poincare_section(toroidal, [seed], 60)
    assert len(sec.points) == 60
    # pinned to the X-cycle, the orbit winds once per two turns on average
    assert rotation_number(toroidal, seed, 60, (1.0, 0.0)) == pytest.approx(0.5, abs=0.03)


def test_cycle_export(x_cycle):
    record = json.loads(json.dumps(cycle_to_dict(x_cycle)))
    assert record["class"] == "X_cycle" and len(record["sections"]) == x_cycle.n_sections
    assert len(record["sections"][0]["jacobian"]) == 4
    rows = ribbon_rows(x_cycle)
    assert len(rows[0]) == len(ribbon_columns(x_cycle))
