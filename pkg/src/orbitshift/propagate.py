"""Trajectories of flows and maps with the Jacobian and the variation hierarchy.

The augmented state ``(x, DX, dX, d2X, d3X)`` is integrated as one ODE so
that the adaptive step control covers the variations as well as the orbit.
Variations are stored for a unit-scale perturbation; scales enter only in
:func:`taylor_shift`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline

from .errors import DerivativeOrderError, IntegrationError
from .fields import as_direction, section_direction

DEFAULT_TOL = (1e-10, 1e-12)
DEFAULT_METHOD = "RK45"


@dataclass(frozen=True)
class Trajectory:
    """Samples ``x[i]`` at independent-variable values ``s[i]`` plus a dense interpolant."""

    s: np.ndarray
    x: np.ndarray
    dense: Callable | None = None
    kind: str = "flow_autonomous"

    def __post_init__(self):
        if len(self.s) > 1 and not (np.all(np.diff(self.s) > 0) or np.all(np.diff(self.s) < 0)):
            raise ValueError("trajectory samples must be strictly monotone")

    def __call__(self, s):
        if self.dense is None:
            raise ValueError("trajectory has no dense output")
        return self.dense(s)

    @property
    def final(self):
        return self.x[-1]


@dataclass(frozen=True)
class VariationBundle:
    """Trajectory plus ``DX`` and the first three functional variations.

    ``jac`` has shape ``(n, N, N)``; ``var1``..``var3`` have shape ``(n, N)``
    and are ``None`` above ``order``.
    """

    base: Trajectory
    jac: np.ndarray | None
    var1: np.ndarray | None = None
    var2: np.ndarray | None = None
    var3: np.ndarray | None = None
    order: int = 0
    dense: Callable | None = None

    @property
    def s(self):
        return self.base.s

    @property
    def x(self):
        return self.base.x

    def variation(self, j):
        if j > self.order:
            raise DerivativeOrderError(f"bundle only holds variations up to order {self.order}")
        return (self.var1, self.var2, self.var3)[j - 1]


def _layout(n, with_jac, order):
    sizes = [n] + ([n * n] if with_jac else []) + [n] * order
    return np.cumsum([0] + sizes)


def hierarchy_terms(d, g, v1=None, v2=None, v3=None, order=0):
    """Right-hand sides of the variation hierarchy at one point.

    ``d`` holds derivative tensors of the field (order >= ``order``) and
    ``g`` those of the direction field (order >= ``order - 1``).  For flows
    these are time derivatives; for maps they are the next iterates.
    """
    out = []
    J = d.grad
    if order >= 1:
        out.append(g.value + J @ v1)
    if order >= 2:
        out.append(2.0 * g.grad @ v1 + np.einsum("ijk,j,k->i", d.hess, v1, v1) + J @ v2)
    if order >= 3:
        out.append(3.0 * g.grad @ v2
                   + 3.0 * np.einsum("ijk,j,k->i", g.hess, v1, v1)
                   + 3.0 * np.einsum("ijk,j,k->i", d.hess, v1, v2)
                   + np.einsum("ijkl,j,k,l->i", d.third, v1, v1, v1)
                   + J @ v3)
    return out


def _check_order(system, direction, order):
    if not 0 <= order <= 3:
        raise DerivativeOrderError(f"variation order must be in 0..3, got {order}")
    if order >= 1 and direction is None:
        raise ValueError("variations of order >= 1 need a perturbation")
    if order >= 2 and system.kind == "flow_toroidal":
        raise DerivativeOrderError(
            "toroidal systems support first-order variations only: the reduced field "
            "is not linear in the perturbation scale")


def _augmented_step(system, g_field, order, with_jac):
    n = system.dim
    bounds = _layout(n, with_jac, order)
    need = max(1, order) if (with_jac or order) else 0

    def step(s, y):
        x = y[:n]
        d = system.derivatives(x, s, need)
        parts = [d.value]
        k = 1
        if with_jac:
            parts.append((d.grad @ y[bounds[1]:bounds[2]].reshape(n, n)).ravel())
            k = 2
        if order:
            g = g_field.derivatives(x, s, order - 1)
            vs = [y[bounds[k + j]:bounds[k + j + 1]] for j in range(order)] + [None] * (3 - order)
            parts.extend(hierarchy_terms(d, g, *vs, order=order))
        return np.concatenate(parts)

    return step, bounds


def _initial_state(x0, n, with_jac, order):
    parts = [np.asarray(x0, dtype=float)]
    if with_jac:
        parts.append(np.eye(n).ravel())
    parts.extend(np.zeros(n) for _ in range(order))
    return np.concatenate(parts)


def _eval_grid(span, samples):
    if samples is None:
        return None
    if isinstance(samples, (int, np.integer)):
        return np.linspace(span[0], span[1], int(samples))
    return np.asarray(samples, dtype=float)


def solve(rhs, span, y0, tol=DEFAULT_TOL, samples=None, method=DEFAULT_METHOD, **kwargs):
    """Thin wrapper over ``solve_ivp`` raising :class:`IntegrationError` on failure."""
    span = (float(span[0]), float(span[1]))
    if not all(map(math.isfinite, span)):
        raise ValueError(f"integration span must be finite, got {span}")
    rtol, atol = tol
    if rtol <= 0 or atol <= 0:
        raise ValueError("tolerances must be positive")
    t_eval = _eval_grid(span, samples)
    if span[0] == span[1]:
        y0 = np.asarray(y0, dtype=float)
        ts = np.array([span[0]]) if t_eval is None else t_eval
        ys = np.repeat(y0[:, None], len(ts), axis=1)
        return ts, ys, (lambda s: np.asarray(y0) if np.ndim(s) == 0 else np.repeat(y0[:, None], len(s), 1))
    sol = solve_ivp(rhs, span, y0, method=method, rtol=rtol, atol=atol, t_eval=t_eval,
                    dense_output=True, **kwargs)
    if sol.status != 0:
        raise IntegrationError(f"integration failed at s={sol.t[-1] if sol.t.size else span[0]}: "
                               f"{sol.message}")
    return sol.t, sol.y, sol.sol


def integrate_flow(system, x0, span, tol=DEFAULT_TOL, samples=None, method=DEFAULT_METHOD):
    """Trajectory of ``dx/ds = B(x, s)`` over ``span`` (``s`` is ``phi`` for toroidal systems)."""
    if system.kind == "map":
        raise ValueError("integrate_flow needs a flow; use iterate_map for maps")
    x0 = system.check_point(x0)
    ts, ys, dense = solve(lambda s, y: system(y, s), span, x0, tol, samples, method)
    return Trajectory(ts, ys.T.copy(), dense, system.kind)


def integrate_variations(system, x0, span, pert=None, order=0, tol=DEFAULT_TOL, samples=None,
                         method=DEFAULT_METHOD, with_jac=True):
    """Integrate the orbit with ``DX`` and variations ``dX``..``d^order X``.

    All right-hand sides are evaluated on the unperturbed trajectory; the
    initial point is held fixed, so ``DX(s0) = I`` and every variation starts
    at zero.  A :class:`Perturbation` scale is ignored (unit-scale storage).
    """
    if system.kind == "map":
        raise ValueError("integrate_variations needs a flow; use iterate_map for maps")
    direction, _ = as_direction(pert)
    _check_order(system, direction, order)
    g_field = section_direction(system, direction) if order else None
    x0 = system.check_point(x0)
    n = system.dim
    rhs, bounds = _augmented_step(system, g_field, order, with_jac)
    ts, ys, dense = solve(rhs, span, _initial_state(x0, n, with_jac, order), tol, samples, method)
    return _bundle(ts, ys.T, dense, n, bounds, with_jac, order, system.kind)


def _bundle(ts, Y, dense, n, bounds, with_jac, order, kind):
    base_dense = None if dense is None else (lambda s: dense(s)[:n])
    base = Trajectory(ts, Y[:, :n].copy(), base_dense, kind)
    k = 1
    jac = None
    if with_jac:
        jac = Y[:, bounds[1]:bounds[2]].reshape(-1, n, n).copy()
        k = 2
    vs = [Y[:, bounds[k + j]:bounds[k + j + 1]].copy() for j in range(order)]
    vs += [None] * (3 - order)
    return VariationBundle(base, jac, *vs, order=order, dense=dense)


def iterate_map(system, x0, n, pert=None, order=0, with_jac=True):
    """Iterate a map ``n`` times together with ``DX`` and the variation hierarchy.

    The discrete recursions follow from the flow recursions by replacing the
    time derivative with the next iterate; all derivatives of ``P`` are taken
    at ``X(n)``.
    """
    if system.kind != "map":
        raise ValueError("iterate_map needs a map")
    if n < 0:
        raise ValueError("n must be non-negative")
    direction, _ = as_direction(pert)
    _check_order(system, direction, order)
    step, bounds = _augmented_step(system, direction, order, with_jac)
    dim = system.dim
    y = _initial_state(system.check_point(x0), dim, with_jac, order)
    Y = [y]
    for i in range(n):
        y = step(float(i), y)
        if not np.all(np.isfinite(y)):
            raise IntegrationError(f"non-finite iterate at step {i + 1}")
        Y.append(y)
    ts = np.arange(n + 1, dtype=float)
    return _bundle(ts, np.array(Y), None, dim, bounds, with_jac, order, "map")


def taylor_shift(bundle, k, order=1):
    """Predicted perturbed trajectory ``X + k dX + k^2 d2X/2! + k^3 d3X/3!``."""
    if not 1 <= order <= 3:
        raise ValueError("Taylor order must be in 1..3")
    if bundle.order < order:
        raise DerivativeOrderError(f"bundle holds order {bundle.order} < requested {order}")
    x = bundle.x.copy()
    for j in range(1, order + 1):
        x += k ** j / math.factorial(j) * bundle.variation(j)
    dense = CubicSpline(bundle.s, x, axis=0) if len(bundle.s) > 1 else None
    return Trajectory(bundle.s, x, dense, bundle.base.kind)


def integrate_rk4(system, x0, span, n_steps):
    """Fixed-step classical RK4; the cross-check integrator for the adaptive pair."""
    if n_steps < 1:
        raise ValueError("n_steps must be positive")
    s0, s1 = map(float, span)
    h = (s1 - s0) / n_steps
    x = system.check_point(x0).copy()
    xs = [x.copy()]
    for i in range(n_steps):
        s = s0 + i * h
        k1 = system(x, s)
        k2 = system(x + 0.5 * h * k1, s + 0.5 * h)
        k3 = system(x + 0.5 * h * k2, s + 0.5 * h)
        k4 = system(x + h * k3, s + h)
        x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        xs.append(x.copy())
    ts = s0 + h * np.arange(n_steps + 1)
    return Trajectory(ts, np.array(xs), CubicSpline(ts, np.array(xs), axis=0), system.kind)


def column_names(system, order=0, with_jac=True, indep=None):
    """Documented CSV column order: independent variable, coordinates, DX (row-major),
    then variations ``d1_*``, ``d2_*``, ``d3_*``."""
    if system.kind == "flow_toroidal":
        coords, indep = ["R", "Z"], indep or "phi"
    else:
        coords = [f"x{i}" for i in range(system.dim)]
        indep = indep or ("n" if system.kind == "map" else "t")
    cols = [indep] + coords
    if with_jac:
        cols += [f"DX_{a}_{b}" for a in coords for b in coords]
    for j in range(1, order + 1):
        cols += [f"d{j}_{c}" for c in coords]
    return cols


def bundle_rows(bundle):
    """Rows matching :func:`column_names` for a bundle."""
    parts = [bundle.s[:, None], bundle.x]
    if bundle.jac is not None:
        parts.append(bundle.jac.reshape(len(bundle.s), -1))
    for j in range(1, bundle.order + 1):
        parts.append(bundle.variation(j))
    return np.hstack(parts)
