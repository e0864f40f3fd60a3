"""First-order response of cycles to a perturbation of the field.

* :func:`cycle_shift_section` solves ``dx_cyc = -(DP^m - I)^-1 dP^m`` on a
  section (toroidal systems, maps).
* :func:`cycle_shift_perpendicular` is the N-D flow form on the local plane
  normal to the field, ``[I - (I - bb^T) DX_T]^-1 (I - bb^T) dX_T``.
* :func:`evolve_delta_return` and :func:`evolve_cycle_shift` carry ``dX_T``,
  ``dP^m`` and ``dx_cyc`` around the cycle instead of recomputing them at
  every section.
* :func:`jacobian_total_derivative` gives ``(dB . d/dB) DP^m`` including the
  motion of the cycle itself, together with multiplier derivatives.

All first-order outputs are for the perturbation scale carried by a
:class:`~orbitshift.fields.Perturbation` (1 for a bare direction field).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cycles import (Cycle, _guard_condition, eigen_decomposition, find_cycle,
                     left_eigenvectors)
from .errors import DegenerateCycleError, DomainError
from .fields import as_direction, perturbed_system, section_direction
from .propagate import integrate_variations, iterate_map, solve


@dataclass(frozen=True)
class CycleShift:
    """Per-section shift of a cycle and the return-map variation it came from.

    ``form`` is ``"section"`` (toroidal), ``"perpendicular"`` (N-D flow,
    shifts normal to the field) or ``"map"``.
    """

    cycle: Cycle
    scale: float
    sections: np.ndarray
    shifts: np.ndarray
    delta_return: np.ndarray
    form: str

    def rows(self):
        return np.hstack([self.sections[:, None], self.cycle.points, self.shifts, self.delta_return])

    def columns(self):
        coords = ["R", "Z"] if self.cycle.kind == "flow_toroidal" else \
            [f"x{i}" for i in range(self.cycle.system.dim)]
        return (["s"] + coords + [f"shift_{c}" for c in coords]
                + [f"delta_return_{c}" for c in coords])


@dataclass(frozen=True)
class JacobianDerivative:
    """``(dB . d/dB) DP^m`` at each section with multiplier derivatives ``dlambda_i/dk``."""

    sections: np.ndarray
    jac: np.ndarray
    djac: np.ndarray
    eigvals: np.ndarray
    eig_derivatives: np.ndarray
    scale: float = 1.0

    def det_identity_residual(self):
        """Max deviation from ``d det/dk = det * tr(DP^-1 dDP/dk)`` over sections."""
        worst = 0.0
        for J, dJ in zip(self.jac, self.djac):
            n = len(J)
            ddet = sum(np.linalg.det(np.where(np.arange(n)[:, None] == i, dJ, J)) for i in range(n))
            jacobi = np.linalg.det(J) * np.trace(np.linalg.solve(J, dJ))
            worst = max(worst, abs(ddet - jacobi))
        return worst

    def rows(self):
        rows = []
        for j, s in enumerate(self.sections):
            row = [float(s), *self.djac[j].ravel().tolist()]
            for lam, dlam in zip(self.eigvals[j], self.eig_derivatives[j]):
                row += [lam.real, lam.imag, dlam.real, dlam.imag]
            rows.append(row)
        return rows

    def columns(self):
        d = self.jac.shape[1]
        cols = ["s"] + [f"dDP_{a}{b}" for a in range(d) for b in range(d)]
        for i in range(d):
            cols += [f"lambda{i + 1}_re", f"lambda{i + 1}_im", f"dlambda{i + 1}_re", f"dlambda{i + 1}_im"]
        return cols


def _section_args(cycle, section):
    return cycle.points[section], float(cycle.sections[section])


def _unit_delta_return(cycle, direction, section):
    x, s = _section_args(cycle, section)
    system = cycle.system
    if system.kind == "map":
        return iterate_map(system, x, cycle.m, direction, order=1, with_jac=False).var1[-1]
    span = (s, s + cycle.period)
    b = integrate_variations(system, x, span, direction, order=1, tol=cycle.tol, samples=[span[1]],
                             method=cycle.method, with_jac=False)
    return b.var1[-1]


def delta_return_map(cycle, pert, section=0):
    """``dP^m`` (toroidal, map) or ``dX_T`` (N-D flow, fixed period) at one section.

    The first-variation equation is integrated over one full period from the
    section point with zero initial variation.
    """
    direction, scale = as_direction(pert)
    return scale * _unit_delta_return(cycle, direction, section)


def _section_shift(jac, dP):
    n = len(dP)
    M = jac - np.eye(n)
    _guard_condition(M, "DP^m - I")
    return -np.linalg.solve(M, dP)


def cycle_shift_section(cycle, pert, section=0, jac=None):
    """First-order cycle shift on a section: ``-(DP^m - I)^-1 dP^m``.

    Raises :class:`DegenerateCycleError` when ``DP^m - I`` is singular or its
    condition number exceeds 1e12.
    """
    if cycle.kind == "flow_autonomous":
        raise ValueError("N-D flow cycles use cycle_shift_perpendicular")
    if cycle.classification == "degenerate":
        raise DegenerateCycleError("cycle has a unit multiplier; its shift is undefined")
    jac = cycle.jac_full[section] if jac is None else jac
    return _section_shift(jac, delta_return_map(cycle, pert, section))


def _perpendicular_shift(system, x, s, DX, dXT):
    b = system(x, s)
    norm = np.linalg.norm(b)
    if norm == 0.0:
        raise DomainError(f"|B| = 0 on the cycle at {x}")
    b = b / norm
    proj = np.eye(len(b)) - np.outer(b, b)
    M = np.eye(len(b)) - proj @ DX
    _guard_condition(M, "I - (I - bb^T) DX_T")
    return np.linalg.solve(M, proj @ dXT)


def cycle_shift_perpendicular(cycle, pert, sections=None, delta_XT=None):
    """Shift of an N-D flow cycle within the plane normal to the field at each point.

    ``delta_XT`` (unit scale, one row per section) may be supplied, e.g. from
    :func:`evolve_delta_return`; otherwise it is recomputed at every section.
    Returns an array ``(len(sections), N)``.
    """
    if cycle.kind != "flow_autonomous":
        raise ValueError("cycle_shift_perpendicular needs an autonomous-flow cycle")
    direction, scale = as_direction(pert)
    idx = range(cycle.n_sections) if sections is None else sections
    out = []
    for j, i in enumerate(idx):
        x, s = _section_args(cycle, i)
        dXT = _unit_delta_return(cycle, direction, i) if delta_XT is None else delta_XT[j]
        out.append(_perpendicular_shift(cycle.system, x, s, cycle.jac_full[i], dXT))
    return scale * np.array(out)


def cycle_shift(cycle, pert):
    """:class:`CycleShift` at every stored section, in the form suited to the cycle."""
    direction, scale = as_direction(pert)
    deltas = np.array([_unit_delta_return(cycle, direction, j) for j in range(cycle.n_sections)])
    if cycle.kind == "flow_autonomous":
        shifts = cycle_shift_perpendicular(cycle, direction, delta_XT=deltas)
        form = "perpendicular"
    else:
        if cycle.classification == "degenerate":
            raise DegenerateCycleError("cycle has a unit multiplier; its shift is undefined")
        shifts = np.array([_section_shift(cycle.jac_full[j], deltas[j])
                           for j in range(cycle.n_sections)])
        form = "map" if cycle.kind == "map" else "section"
    return CycleShift(cycle, scale, cycle.sections.copy(), scale * shifts, scale * deltas, form)


# ---------------------------------------------------------------------------
# evolution along the cycle


def _closure_grid(cycle):
    return np.append(cycle.sections, cycle.s0 + cycle.period)


def evolve_delta_return(cycle, pert, which=None):
    """Carry ``dX_T`` (``which='XT'``) or ``dP^m`` (``which='Pm'``) around the cycle.

    Integrates ``d/ds delta = A delta - (DP - I) g`` together with the orbit
    and the commutator equation for ``DP``, where ``g`` is ``dB`` (flow) or
    the reduced-field variation (toroidal).  Maps use the discrete analogue
    ``delta_{n+1} = J_n delta_n - (DP_{n+1} - I) dP(x_n)``.

    Returns ``(values, closure)``: one row per section and the value after a
    full period, which should reproduce ``values[0]``.
    """
    expected = "XT" if cycle.kind == "flow_autonomous" else "Pm"
    which = which or expected
    if which != expected:
        raise ValueError(f"{cycle.kind} cycles carry d{expected}, not d{which}")
    direction, scale = as_direction(pert)
    system, n = cycle.system, cycle.system.dim
    g_field = section_direction(system, direction)
    d0 = _unit_delta_return(cycle, direction, 0)
    jac0 = cycle.jac_full[0]
    if cycle.kind == "map":
        return _evolve_map_delta(cycle, g_field, d0, jac0, scale)

    def rhs(s, y):
        x = y[:n]
        d = system.derivatives(x, s, 1)
        A = d.grad
        DP = y[n:n + n * n].reshape(n, n)
        delta = y[n + n * n:]
        g = g_field(x, s)
        return np.concatenate([d.value, (A @ DP - DP @ A).ravel(),
                               A @ delta - (DP - np.eye(n)) @ g])

    y0 = np.concatenate([cycle.point, jac0.ravel(), d0])
    grid = _closure_grid(cycle)
    _, ys, _ = solve(rhs, (grid[0], grid[-1]), y0, cycle.tol, grid, cycle.method)
    vals = scale * ys[n + n * n:, :].T
    return vals[:-1].copy(), vals[-1].copy()


def _evolve_map_delta(cycle, g_field, d0, jac0, scale):
    system = cycle.system
    x, DP, delta = np.asarray(cycle.point, float), np.asarray(jac0, float), d0
    vals = [delta]
    for i in range(cycle.m):
        J = system.jacobian(x, float(i))
        DP_next = J @ DP @ np.linalg.inv(J)
        delta = J @ delta - (DP_next - np.eye(len(x))) @ g_field(x, float(i))
        x, DP = system(x, float(i)), DP_next
        vals.append(delta)
    vals = scale * np.array(vals)
    return vals[:-1].copy(), vals[-1].copy()


def evolve_cycle_shift(cycle, pert):
    """Carry the section shift around a toroidal (or map) cycle.

    ``d/dphi dx_cyc = A dx_cyc + d(R B_pol / B_phi)``, seeded with the
    section formula at section 0.  Maps use
    ``dx_{n+1} = J_n dx_n + dP(x_n)``.  Returns ``(values, closure)``.
    N-D flows are not supported: the shift normal to a rotating field
    direction has no comparably compact evolution law, so
    :func:`cycle_shift_perpendicular` recomputes it pointwise.
    """
    if cycle.kind == "flow_autonomous":
        raise ValueError("N-D flow cycles have no in-place shift evolution; "
                         "use cycle_shift_perpendicular at each point")
    direction, scale = as_direction(pert)
    system, n = cycle.system, cycle.system.dim
    g_field = section_direction(system, direction)
    dx0 = cycle_shift_section(cycle, direction, 0)
    if cycle.kind == "map":
        x, dx = np.asarray(cycle.point, float), dx0
        vals = [dx]
        for i in range(cycle.m):
            dx = system.jacobian(x, float(i)) @ dx + g_field(x, float(i))
            x = system(x, float(i))
            vals.append(dx)
        vals = scale * np.array(vals)
        return vals[:-1].copy(), vals[-1].copy()

    def rhs(s, y):
        x, dx = y[:n], y[n:]
        d = system.derivatives(x, s, 1)
        return np.concatenate([d.value, d.grad @ dx + g_field(x, s)])

    grid = _closure_grid(cycle)
    _, ys, dense = solve(rhs, (grid[0], grid[-1]), np.concatenate([cycle.point, dx0]),
                         cycle.tol, grid, cycle.method)
    vals = scale * ys[n:, :].T
    return vals[:-1].copy(), vals[-1].copy()


def shifted_curve(cycle, pert, k):
    """Dense first-order prediction ``s -> x_cyc(s) + k dx_cyc(s)`` for a toroidal cycle.

    Returns a callable over one period starting at ``cycle.s0``.
    """
    if cycle.kind != "flow_toroidal":
        raise ValueError("shifted_curve needs a toroidal cycle")
    direction, scale = as_direction(pert)
    system, n = cycle.system, cycle.system.dim
    g_field = section_direction(system, direction)
    dx0 = cycle_shift_section(cycle, direction, 0)

    def rhs(s, y):
        x, dx = y[:n], y[n:]
        d = system.derivatives(x, s, 1)
        return np.concatenate([d.value, d.grad @ dx + g_field(x, s)])

    span = (cycle.s0, cycle.s0 + cycle.period)
    _, _, dense = solve(rhs, span, np.concatenate([cycle.point, dx0]), cycle.tol, None, cycle.method)

    def curve(s):
        y = dense(s)
        return y[:n] + k * scale * y[n:]

    return curve


# ---------------------------------------------------------------------------
# total derivative of the full-period Jacobian


def _delta_A(d, g, dx):
    # partial variation of A plus convection of A by the cycle shift
    return g.grad + np.einsum("ilj,j->il", d.hess, dx)


def _seed_rhs(system, g_field, n):
    def rhs(s, y):
        x = y[:n]
        M = y[n:n + n * n].reshape(n, n)
        dx = y[n + n * n:2 * n + n * n]
        dM = y[2 * n + n * n:].reshape(n, n)
        d = system.derivatives(x, s, 2)
        g = g_field.derivatives(x, s, 1)
        A = d.grad
        return np.concatenate([d.value, (A @ M).ravel(), A @ dx + g.value,
                               (_delta_A(d, g, dx) @ M + A @ dM).ravel()])

    return rhs


def _evolve_rhs(system, g_field, n):
    def rhs(s, y):
        x = y[:n]
        DP = y[n:n + n * n].reshape(n, n)
        dx = y[n + n * n:2 * n + n * n]
        dDP = y[2 * n + n * n:].reshape(n, n)
        d = system.derivatives(x, s, 2)
        g = g_field.derivatives(x, s, 1)
        A = d.grad
        dA = _delta_A(d, g, dx)
        return np.concatenate([d.value, (A @ DP - DP @ A).ravel(), A @ dx + g.value,
                               (dA @ DP - DP @ dA + A @ dDP - dDP @ A).ravel()])

    return rhs


def _toroidal_seed(cycle, g_field, x, s, dx):
    n = cycle.system.dim
    y0 = np.concatenate([x, np.eye(n).ravel(), dx, np.zeros(n * n)])
    span = (s, s + cycle.period)
    _, ys, _ = solve(_seed_rhs(cycle.system, g_field, n), span, y0, cycle.tol, [span[1]],
                     cycle.method)
    y = ys[:, -1]
    return y[n:n + n * n].reshape(n, n), y[2 * n + n * n:].reshape(n, n)


def eigenvalue_derivatives(jac, djac):
    """``(lambda_i, dlambda_i)`` from ``u_i^T dDP v_i / (u_i^T v_i)``."""
    vals, vecs = eigen_decomposition(jac)
    left = left_eigenvectors(jac, vals)
    dl = []
    for i in range(len(vals)):
        u, v = left[:, i], vecs[:, i]
        denom = u @ v
        if abs(denom) < 1e-14:
            raise DegenerateCycleError("defective Jacobian: eigenvalue derivative undefined")
        dl.append((u @ djac @ v) / denom)
    return vals, np.array(dl)


def jacobian_total_derivative(cycle, pert, method="evolve"):
    """Total derivative ``(dB . d/dB) DP^m`` at every section of a toroidal or map cycle.

    Along the orbit ``d/dphi dDP = dA DP + A dDP`` from ``dDP = 0`` over one
    period, with ``dA`` the explicit variation of ``A`` plus its convection
    by the evolved cycle shift.  ``method='evolve'`` seeds section 0 this way
    and carries the result around the cycle with the differentiated
    commutator equation; ``method='direct'`` repeats the seed integration
    from every section.
    """
    if cycle.kind == "flow_autonomous":
        raise ValueError("the Jacobian total derivative is implemented for toroidal and map cycles")
    if method not in ("evolve", "direct"):
        raise ValueError("method must be 'evolve' or 'direct'")
    direction, scale = as_direction(pert)
    system, n = cycle.system, cycle.system.dim
    g_field = section_direction(system, direction)
    if cycle.kind == "map":
        jacs, djacs = _map_total_derivative(cycle, direction)
    else:
        dx0 = cycle_shift_section(cycle, direction, 0)
        if method == "direct":
            dxs, _ = evolve_cycle_shift(cycle, direction)
            pairs = [_toroidal_seed(cycle, g_field, cycle.points[j], float(cycle.sections[j]), dxs[j])
                     for j in range(cycle.n_sections)]
            jacs = np.array([p[0] for p in pairs])
            djacs = np.array([p[1] for p in pairs])
        else:
            J0, dJ0 = _toroidal_seed(cycle, g_field, cycle.point, cycle.s0, dx0)
            y0 = np.concatenate([cycle.point, J0.ravel(), dx0, dJ0.ravel()])
            grid = cycle.sections
            if len(grid) == 1:
                ys = y0[:, None]
            else:
                _, ys, _ = solve(_evolve_rhs(system, g_field, n), (grid[0], grid[-1]), y0,
                                 cycle.tol, grid, cycle.method)
            Y = ys.T
            jacs = Y[:, n:n + n * n].reshape(-1, n, n)
            djacs = Y[:, 2 * n + n * n:].reshape(-1, n, n)
    eig = [eigenvalue_derivatives(J, dJ) for J, dJ in zip(jacs, djacs)]
    return JacobianDerivative(cycle.sections.copy(), jacs, scale * djacs,
                              np.array([e[0] for e in eig]), scale * np.array([e[1] for e in eig]),
                              scale)


def _map_total_derivative(cycle, direction):
    system, m = cycle.system, cycle.m
    dxs, _ = evolve_cycle_shift(cycle, direction)
    Js, dJs = [], []
    for i in range(m):
        x = cycle.points[i]
        d = system.derivatives(x, float(i), 2)
        g = direction.derivatives(x, float(i), 1)
        Js.append(d.grad)
        dJs.append(_delta_A(d, g, dxs[i]))
    jacs, djacs = [], []
    for start in range(m):
        J = np.eye(system.dim)
        dJ = np.zeros_like(J)
        for step in range(m):
            i = (start + step) % m
            dJ = dJs[i] @ J + Js[i] @ dJ
            J = Js[i] @ J
        jacs.append(J)
        djacs.append(dJ)
    return np.array(jacs), np.array(djacs)


# ---------------------------------------------------------------------------
# experimental: higher-order shifts of map periodic orbits


def map_cycle_shift_series(cycle, pert, order=3, h=1e-2, newton_tol=1e-13):
    """Experimental higher-order shift coefficients ``d^j x_cyc`` (j = 1..order) for maps.

    Each stencil point relocates the periodic orbit of ``P + k dP`` by Newton
    iteration started from the first-order prediction, and central
    differences in ``k`` extract the coefficients.  Not covered by the
    acceptance suite.
    """
    if cycle.kind != "map":
        raise ValueError("map_cycle_shift_series is only available for maps")
    if not 1 <= order <= 3:
        raise ValueError("order must be in 1..3")
    direction, scale = as_direction(pert)
    dx = cycle_shift_section(cycle, direction, 0)

    def x_at(k):
        if k == 0:
            return cycle.point
        sys_k = perturbed_system(cycle.system, direction, k)
        return find_cycle(sys_k, cycle.point + k * dx, cycle.m, newton_tol=newton_tol).point

    pts = {j: x_at(j * h) for j in (-2, -1, 0, 1, 2)}
    coeffs = [(pts[1] - pts[-1]) / (2 * h),
              (pts[1] - 2 * pts[0] + pts[-1]) / h ** 2,
              (pts[2] - 2 * pts[1] + 2 * pts[-1] - pts[-2]) / (2 * h ** 3)]
    return [scale ** (j + 1) * c for j, c in enumerate(coeffs[:order])]
