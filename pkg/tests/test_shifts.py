import numpy as np
import pytest

from orbitshift import fields as F
from orbitshift.cycles import find_cycle, return_map
from orbitshift.errors import DegenerateCycleError
from orbitshift.oracle import finite_difference
from orbitshift.shifts import (cycle_shift, cycle_shift_perpendicular, cycle_shift_section,
                               delta_return_map, eigenvalue_derivatives, evolve_cycle_shift,
                               evolve_delta_return, jacobian_total_derivative,
                               map_cycle_shift_series, shifted_curve)


@pytest.fixture(scope="module")
def kick(standard_map):
    return F.make_perturbation("standard_map_kick", base=standard_map)


def test_zero_perturbation_gives_zero_shift(x_cycle, toroidal):
    zero = F.make_perturbation("constant", {"vector": (0.0, 0.0, 0.0)}, base=toroidal)
    assert np.array_equal(cycle_shift_section(x_cycle, zero), [0.0, 0.0])
    jd = jacobian_total_derivative(x_cycle, zero)
    assert np.allclose(jd.djac, 0.0, atol=1e-14)


def test_standard_map_kick_shift(map_fixed_point, kick):
    # dP = (1, 1) at the origin and (DP - I)^-1 (1, 1) = (1, 0)
    assert np.allclose(delta_return_map(map_fixed_point, kick), [1.0, 1.0])
    assert np.allclose(cycle_shift_section(map_fixed_point, kick), [-1.0, 0.0])
    scaled = cycle_shift(map_fixed_point, F.Perturbation(kick, 0.5))
    assert scaled.form == "map" and np.allclose(scaled.shifts[0], [-0.5, 0.0])


def test_delta_return_matches_fd(toroidal, mode, x_cycle):
    dP = delta_return_map(x_cycle, mode)

    def end(k):
        return return_map(F.perturbed_system(toroidal, mode, k), x_cycle.point, 2,
                          tol=(1e-12, 1e-14))[0]

    est = finite_difference(end, 1e-4)
    assert np.linalg.norm(dP - est.extrapolated) <= 1e-5 * np.linalg.norm(dP)


def test_evolution_matches_per_section(x_cycle, mode):
    direct = cycle_shift(x_cycle, mode)
    dP, closure = evolve_delta_return(x_cycle, mode)
    assert np.allclose(dP, direct.delta_return, rtol=0, atol=1e-5 * np.abs(dP).max())
    assert np.linalg.norm(closure - dP[0]) <= 1e-6 * np.linalg.norm(dP[0])
    dx, closure = evolve_cycle_shift(x_cycle, mode)
    assert np.allclose(dx, direct.shifts, rtol=0, atol=1e-5 * np.abs(dx).max())
    assert np.linalg.norm(closure - dx[0]) <= 1e-6 * np.linalg.norm(dx[0])
    curve = shifted_curve(x_cycle, mode, 0.0)
    assert np.allclose(curve(x_cycle.sections[3]), x_cycle.points[3], atol=1e-8)


def test_map_evolution_closes(standard_map, kick):
    c2 = find_cycle(standard_map, np.array([3.0, 0.1]), 2)
    if c2.classification == "degenerate":
        pytest.skip("seed landed on a degenerate orbit")
    direct = cycle_shift(c2, kick)
    dx, closure = evolve_cycle_shift(c2, kick)
    assert np.allclose(dx, direct.shifts, atol=1e-10)
    assert np.allclose(closure, dx[0], atol=1e-10)
    dP, closure = evolve_delta_return(c2, kick)
    assert np.allclose(dP, direct.delta_return, atol=1e-10)
    assert np.allclose(closure, dP[0], atol=1e-10)


def test_shift_is_linear_in_perturbation(toroidal, x_cycle, mode):
    d2 = F.make_perturbation("param_derivative", {"param": "B0"}, base=toroidal)
    both = F.perturbed_system(mode, d2, 1.0)
    s1, s2, s12 = (cycle_shift_section(x_cycle, d) for d in (mode, d2, both))
    assert np.allclose(s1 + s2, s12, rtol=1e-7, atol=1e-12)


def test_perpendicular_shift_is_normal_to_field(x_cycle3d, mode3d):
    shifts = cycle_shift_perpendicular(x_cycle3d, mode3d, sections=[0, 3, 5])
    for i, v in zip([0, 3, 5], shifts):
        b = x_cycle3d.system(x_cycle3d.points[i])
        assert abs(v @ b) <= 1e-10 * np.linalg.norm(v) * np.linalg.norm(b)
    with pytest.raises(ValueError):
        evolve_cycle_shift(x_cycle3d, mode3d)
    with pytest.raises(ValueError):
        cycle_shift_section(x_cycle3d, mode3d)


def test_jacobian_derivative_identities(x_cycle, mode):
    ev = jacobian_total_derivative(x_cycle, mode)
    assert ev.det_identity_residual() <= 1e-8
    # DP^m is conjugate around the cycle, so tr dDP is section independent
    tr = np.trace(ev.djac, axis1=1, axis2=2)
    assert np.ptp(tr) <= 1e-6 * max(1.0, np.abs(tr).max())
    direct = jacobian_total_derivative(x_cycle, mode, method="direct")
    assert np.allclose(ev.djac, direct.djac, rtol=0, atol=1e-6 * np.abs(direct.djac).max())
    assert len(ev.rows()[0]) == len(ev.columns())


def test_eigenvalue_derivatives_on_diagonal():
    vals, dl = eigenvalue_derivatives(np.diag([2.0, 0.5]), np.array([[0.3, 1.0], [4.0, -0.1]]))
    order = np.argsort(vals.real)
    assert np.allclose(dl[order], [-0.1, 0.3])


def test_degenerate_cycle_refused():
    # K = 0: every point with p = 0 is fixed and DP = [[1, 1], [0, 1]]
    sm = F.make_system("standard_map", {"K": 0.0})
    c = find_cycle(sm, np.array([0.0, 0.0]), 1)
    assert c.classification == "degenerate"
    kick = F.make_perturbation("standard_map_kick", base=sm)
    with pytest.raises(DegenerateCycleError):
        cycle_shift_section(c, kick)
    with pytest.raises(DegenerateCycleError):
        cycle_shift(c, kick)


def test_map_series_first_orders(map_fixed_point, kick):
    # the fixed point of the kicked map is (-arcsin k, 0), so the series is -1, 0, -1
    d1, d2, d3 = map_cycle_shift_series(map_fixed_point, kick)
    assert np.allclose(d1, [-1.0, 0.0], atol=1e-4)
    assert np.allclose(d2, [0.0, 0.0], atol=1e-6)
    assert np.allclose(d3, [-1.0, 0.0], atol=1e-2)
