import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from orbitshift import fields as F
from orbitshift.errors import DerivativeOrderError, DomainError
from orbitshift.oracle import finite_difference

coord = st.floats(-1.5, 1.5)
point3 = st.tuples(coord, coord, coord).map(np.array)
# an annulus around the magnetic axis, inside the resonant surface region
section_pt = st.tuples(st.floats(0.7, 1.3), st.floats(-0.3, 0.3)).map(np.array)
angle = st.floats(0.0, 2 * math.pi)


def test_abc_at_origin():
    assert np.allclose(F.eval_field(F.make_system("abc"), np.zeros(3)), [1.0, 1.0, 1.0])


def test_planar_rotation_value_and_gradient():
    rot = F.make_system("planar_rotation")
    assert np.allclose(F.eval_field(rot, np.array([1.0, 0.0])), [0.0, 1.0])
    d = F.eval_derivatives(rot, np.array([0.3, -2.0]), 1)
    assert np.array_equal(d.grad, [[0.0, -1.0], [1.0, 0.0]])


def test_abc_hessian_entry():
    d = F.eval_derivatives(F.make_system("abc"), np.zeros(3), 2)
    # xdot = A sin z + C cos y, so d2 xdot / dy2 = -C cos y
    assert d.hess[0, 1, 1] == pytest.approx(-1.0)


def test_toroidal_axis_is_field_line(toroidal):
    assert np.allclose(F.eval_field(toroidal, np.array([1.0, 0.0]), 0.3), 0.0, atol=1e-15)


def test_toroidal_domain_errors(toroidal):
    with pytest.raises(DomainError):
        toroidal(np.array([0.0, 0.1]))
    with pytest.raises(DomainError):
        toroidal(np.array([-1.0, 0.1]))
    with pytest.raises(DomainError):
        toroidal(np.array([np.nan, 0.1]))


def test_catalog_rejects_unknown_ids_and_params():
    with pytest.raises(ValueError):
        F.make_system("no_such_field")
    with pytest.raises(ValueError):
        F.make_system("abc", {"D": 1.0})
    with pytest.raises(ValueError):
        F.make_system("abc", {"A": math.inf})


def test_catalog_lists_required_systems():
    ids = {row["id"] for row in F.list_fields()}
    assert {"abc", "planar_rotation", "model_toroidal", "standard_map", "henon"} <= ids


def test_mismatched_perturbation_rejected(toroidal):
    with pytest.raises(ValueError):
        F.make_perturbation("standard_map_kick", base=toroidal)


def _central_jacobian(func, x, h):
    cols = []
    for j in range(len(x)):
        e = np.zeros(len(x))
        e[j] = h
        cols.append((func(x + e) - func(x - e)) / (2 * h))
    return np.array(cols).T


def test_toroidal_A_against_central_differences(toroidal):
    for R in np.linspace(0.75, 1.25, 4):
        for Z in np.linspace(-0.25, 0.25, 4):
            x = np.array([R, Z])
            A = toroidal.jacobian(x, 0.7)
            fd = _central_jacobian(lambda y: toroidal(y, 0.7), x, 1e-5)
            assert np.linalg.norm(A - fd) <= 1e-6 * np.linalg.norm(A)


@pytest.mark.parametrize("name", ["abc", "model_toroidal_3d", "henon", "hopf"])
@given(x=point3)
def test_derivative_tensor_symmetry(name, x):
    system = F.make_system(name)
    x = x[:system.dim] + (np.array([1.0, 0.0, 0.0]) if name == "model_toroidal_3d" else 0.0)
    d = system.derivatives(x, 0.0, 3)
    assert np.allclose(d.hess, d.hess.transpose(0, 2, 1), atol=1e-12)
    for perm in [(0, 2, 1, 3), (0, 1, 3, 2), (0, 3, 2, 1)]:
        assert np.allclose(d.third, d.third.transpose(perm), atol=1e-12)


@given(x=point3)
def test_divergence_free_abc(x):
    abc = F.make_system("abc")
    assert abs(np.trace(abc.jacobian(x))) <= 1e-10
    assert abs(np.trace(abc.with_mode("finite_difference").jacobian(x))) <= 1e-6


@given(x=point3)
def test_divergence_free_toroidal_3d(x):
    system = F.make_system("model_toroidal_3d")
    p = np.array([1.0, 0.0, 0.0]) + 0.2 * x
    assert abs(np.trace(system.jacobian(p))) <= 1e-10
    assert abs(np.trace(system.with_mode("finite_difference").jacobian(p))) <= 1e-6


@pytest.mark.parametrize("name", ["abc", "hopf", "henon", "model_toroidal"])
@given(x=point3, s=angle)
def test_fd_mode_matches_analytic(name, x, s):
    system = F.make_system(name)
    x = x[:system.dim]
    if system.kind == "flow_toroidal":
        x = np.array([1.0, 0.0]) + 0.2 * x
    a = system.derivatives(x, s, 2)
    f = system.with_mode("finite_difference").derivatives(x, s, 2)
    scale_g = max(np.linalg.norm(a.grad), 1e-12)
    scale_h = max(np.linalg.norm(a.hess), 1e-3)
    assert np.linalg.norm(f.grad - a.grad) <= 1e-6 * scale_g
    assert np.linalg.norm(f.hess - a.hess) <= 1e-4 * scale_h


@pytest.mark.parametrize("base,pert", [("abc", ("param_derivative", {"param": "B"})),
                                       ("henon", ("param_derivative", {"param": "a"})),
                                       ("standard_map", ("standard_map_kick", {})),
                                       ("model_toroidal", ("resonant_mode", {}))])
@given(x=point3, k=st.floats(-2.0, 2.0))
def test_linearity_of_perturbed_system(base, pert, x, k):
    system = F.make_system(base)
    direction = F.make_perturbation(pert[0], pert[1], base=system)
    x = x[:system.dim]
    if system.kind == "flow_toroidal":
        x = np.array([1.0, 0.0]) + 0.2 * x
        lhs = F.perturbed_system(system, direction, k).raw(x, 0.4)
        rhs = system.raw(x, 0.4) + k * direction.raw(x, 0.4)
    else:
        lhs = F.perturbed_system(system, direction, k)(x)
        rhs = system(x) + k * direction(x)
    assert np.allclose(lhs, rhs, rtol=1e-14, atol=1e-15)


def test_delta_reduced_field_zero_and_parallel(toroidal):
    x = np.array([1.1, 0.05])
    zero = F.make_perturbation("constant", {"vector": (0.0, 0.0, 0.0)}, base=toroidal)
    assert np.array_equal(F.delta_reduced_field(toroidal, zero, x), [0.0, 0.0])
    # without the island term dB/dB0 = B/B0, and R B_pol / B_phi is homogeneous of degree 0
    clean = F.make_system("model_toroidal", {"island_amp": 0.0})
    parallel = F.make_perturbation("param_derivative", {"param": "B0"}, base=clean)
    assert np.allclose(F.delta_reduced_field(clean, parallel, x, 0.3), 0.0, atol=1e-15)


@given(x=section_pt, phi=angle)
def test_delta_reduced_field_matches_fd(toroidal, mode, x, phi):
    pred = F.delta_reduced_field(toroidal, mode, x, phi)
    est = finite_difference(lambda k: F.perturbed_system(toroidal, mode, k)(x, phi), 1e-2)
    assert np.allclose(pred, est.extrapolated, rtol=1e-8, atol=1e-12)
    # the stencil error is O(h^2): halving h divides it by about 4
    if est.error > 1e-10:
        assert 3.0 < est.ratio < 5.0


def test_quotient_rule_beats_printed_expansion(toroidal, mode):
    """The variation with a second-order dB_pol dB_phi term misses the O(1) slope."""
    x, phi = np.array([1.1, 0.1]), 0.4
    raw, draw = toroidal.raw(x, phi), mode.raw(x, phi)
    R = x[0]
    printed = R * draw[:2] / raw[2] - R * draw[:2] / raw[2] ** 2 * draw[2]
    truth = finite_difference(lambda k: F.perturbed_system(toroidal, mode, k)(x, phi),
                              1e-4).extrapolated
    ours = F.delta_reduced_field(toroidal, mode, x, phi)
    assert np.linalg.norm(ours - truth) < 1e-9
    assert np.linalg.norm(printed - truth) > 1e-4


def test_perturbation_scale_multiplies(toroidal, mode):
    x = np.array([1.1, 0.1])
    base = F.delta_reduced_field(toroidal, mode, x)
    assert np.allclose(F.delta_reduced_field(toroidal, F.Perturbation(mode, 3.0), x), 3 * base)


def test_derivative_order_bounds(toroidal):
    with pytest.raises(DerivativeOrderError):
        toroidal.derivatives(np.array([1.0, 0.1]), 0.0, 4)


def test_resonant_radius_profile():
    r = F.resonant_radius(0.5)
    assert F.rotational_transform(r) == pytest.approx(0.5, abs=1e-12)
    assert 0.0 < r < 0.5
