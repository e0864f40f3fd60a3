"""Periodic orbits of maps and cycles of flows.

Cycles are located by Newton shooting, their full-period Jacobian is
propagated around the orbit with the commutator equation
``d/ds DP = [A, DP]``, and multipliers are classified as X (hyperbolic),
O (elliptic), degenerate or other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.integrate import solve_ivp

from .errors import ConvergenceError, DegenerateCycleError, DomainError, IntegrationError
from .fields import FieldSystem
from .propagate import (DEFAULT_METHOD, DEFAULT_TOL, integrate_flow, integrate_variations,
                        iterate_map, solve)

NEWTON_TOL = 1e-10
MAX_ITER = 50
MAX_HALVINGS = 20
COND_LIMIT = 1e12
DEGENERATE_TOL = 1e-8
UNIT_CIRCLE_TOL = 1e-6

CLASSES = ("X_cycle", "O_cycle", "degenerate", "nonhyperbolic_other")


@dataclass(frozen=True)
class Cycle:
    """A periodic orbit (map) or closed orbit (flow) with per-section Jacobians.

    ``sections`` holds the independent variable at each stored point: the
    unwrapped toroidal angle for toroidal systems, time for autonomous flows
    and the iterate index for maps.  ``jac_full[j]`` is the full-period
    Jacobian at ``points[j]`` (``DP^m`` or ``DX_T``); eigenvectors are the
    columns of ``eigvecs[j]``.
    """

    system: FieldSystem
    m: int
    period: float
    sections: np.ndarray
    points: np.ndarray
    jac_full: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray
    classification: str
    residual: float
    history: tuple = ()
    tol: tuple = DEFAULT_TOL
    method: str = DEFAULT_METHOD
    newton_tol: float = NEWTON_TOL

    @property
    def kind(self):
        return self.system.kind

    @property
    def point(self):
        return self.points[0]

    @property
    def s0(self):
        return float(self.sections[0])

    @property
    def n_sections(self):
        return len(self.sections)

    def multipliers(self, index=0):
        """Section multipliers; for autonomous flows the unit multiplier along the
        field direction is removed."""
        vals = self.eigvals[index]
        if self.kind != "flow_autonomous":
            return vals
        return np.delete(vals, flow_direction_index(self, index))


# ---------------------------------------------------------------------------
# eigen-analysis


def _normalize(v):
    v = np.asarray(v, dtype=complex)
    v = v / np.linalg.norm(v)
    nz = np.flatnonzero(np.abs(v) > 1e-14)
    if nz.size:
        lead = v[nz[0]]
        v = v * (abs(lead) / lead)
    return v


def _sort_key(lam):
    return (-abs(lam), -lam.real, -lam.imag)


def eigen_decomposition(M):
    """Eigenvalues and unit eigenvectors (columns), sorted by decreasing modulus.

    2x2 matrices use the closed form; larger ones use LAPACK.  Each
    eigenvector's first nonzero component is made real and positive.
    """
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    if n == 2:
        a, b, c, d = M[0, 0], M[0, 1], M[1, 0], M[1, 1]
        half_tr = 0.5 * (a + d)
        disc = np.sqrt(complex(half_tr * half_tr - (a * d - b * c)))
        vals = [half_tr + disc, half_tr - disc]
        vecs = []
        for lam in vals:
            v1 = np.array([b, lam - a], dtype=complex)
            v2 = np.array([lam - d, c], dtype=complex)
            v = v1 if np.linalg.norm(v1) >= np.linalg.norm(v2) else v2
            if np.linalg.norm(v) < 1e-300:
                v = np.array([1.0, 0.0]) if len(vecs) == 0 else np.array([0.0, 1.0])
            vecs.append(_normalize(v))
        vals = np.array(vals)
        vecs = np.array(vecs).T
    else:
        vals, vecs = np.linalg.eig(M)
        vecs = np.array([_normalize(vecs[:, i]) for i in range(n)]).T
    order = sorted(range(n), key=lambda i: _sort_key(vals[i]))
    return np.asarray(vals, dtype=complex)[order], np.asarray(vecs, dtype=complex)[:, order]


def left_eigenvectors(M, vals):
    """Left eigenvectors ``u_i`` (columns) matched to the given eigenvalues."""
    lv, lvec = eigen_decomposition(np.asarray(M).T)
    cols = []
    used = set()
    for lam in vals:
        order = np.argsort(np.abs(lv - lam))
        j = next(int(i) for i in order if int(i) not in used)
        used.add(j)
        cols.append(lvec[:, j])
    return np.array(cols).T


def flow_direction_index(cycle, index=0):
    """Index of the eigenvector most aligned with the field direction."""
    b = cycle.system(cycle.points[index], cycle.sections[index])
    b = b / np.linalg.norm(b)
    vecs = cycle.eigvecs[index]
    return int(np.argmax(np.abs(vecs.T.conj() @ b)))


def classify_multipliers(vals, degenerate_tol=DEGENERATE_TOL, circle_tol=UNIT_CIRCLE_TOL):
    """Class of a set of section multipliers.

    A unit multiplier is flagged both directly and through
    ``|det(DP - I)| = |prod(lambda_i - 1)|``: a Jordan block at 1 splits into
    ``1 +- sqrt(noise)`` under integration error, which a per-eigenvalue test
    alone would call hyperbolic.
    """
    vals = np.asarray(vals, dtype=complex)
    if np.any(np.abs(vals - 1.0) < degenerate_tol) or abs(np.prod(vals - 1.0)) < degenerate_tol:
        return "degenerate"
    on_circle = np.abs(np.abs(vals) - 1.0) < circle_tol
    if np.all(on_circle) and not np.any(np.abs(vals + 1.0) < degenerate_tol):
        return "O_cycle"
    if not np.any(on_circle):
        return "X_cycle"
    return "nonhyperbolic_other"


def classify_cycle(cycle, degenerate_tol=DEGENERATE_TOL, circle_tol=UNIT_CIRCLE_TOL):
    """Classify a :class:`Cycle` (or a multiplier array) as X/O/degenerate/other."""
    vals = cycle.multipliers(0) if isinstance(cycle, Cycle) else cycle
    return classify_multipliers(vals, degenerate_tol, circle_tol)


# ---------------------------------------------------------------------------
# return maps


def return_map(system, x, m=1, s0=0.0, tol=DEFAULT_TOL, method=DEFAULT_METHOD):
    """``(P^m(x), DP^m(x))`` for a toroidal section at ``phi = s0`` or a map."""
    if system.kind == "map":
        b = iterate_map(system, x, m)
        return b.x[-1], b.jac[-1]
    if system.kind != "flow_toroidal":
        raise ValueError("return_map is defined for toroidal systems and maps")
    span = (s0, s0 + 2.0 * math.pi * m)
    b = integrate_variations(system, x, span, tol=tol, samples=[span[1]], method=method)
    return b.x[-1], b.jac[-1]


def flow_map(system, x, T, s0=0.0, tol=DEFAULT_TOL, method=DEFAULT_METHOD):
    """``(X(x, T), DX_T)`` for an autonomous flow."""
    b = integrate_variations(system, x, (s0, s0 + T), tol=tol, samples=[s0 + T], method=method)
    return b.x[-1], b.jac[-1]


def _guard_condition(M, what):
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise DegenerateCycleError(f"{what} is singular or ill-conditioned (cond={cond:.3g}); "
                                   "the cycle has a unit multiplier", cond)
    return cond


def _damped_newton(evaluate, step, z0, newton_tol, max_iter):
    """Generic damped Newton: ``evaluate(z) -> (residual_norm, state)``,
    ``step(z, state) -> dz``."""
    z = np.asarray(z0, dtype=float)
    r, state = evaluate(z)
    history = [r]
    for it in range(max_iter + 1):
        if r <= newton_tol:
            return z, r, state, tuple(history)
        if it == max_iter:
            break
        dz = step(z, state)
        alpha = 1.0
        for _ in range(MAX_HALVINGS + 1):
            zt = z + alpha * dz
            try:
                rt, st = evaluate(zt)
            except (DomainError, IntegrationError):
                rt, st = math.inf, None
            if rt < r:
                break
            alpha *= 0.5
        else:
            exc = ConvergenceError(f"damped Newton stalled at residual {r:.3e}", history)
            exc.state = state
            raise exc
        z, r, state = zt, rt, st
        history.append(r)
    exc = ConvergenceError(f"Newton did not converge in {max_iter} iterations "
                           f"(residual {r:.3e})", history)
    exc.state = state
    raise exc


def find_cycle(system, guess, m=1, *, s0=0.0, period_guess=None, newton_tol=NEWTON_TOL,
               max_iter=MAX_ITER, n_sections=8, tol=DEFAULT_TOL, method=DEFAULT_METHOD,
               max_period=1e4):
    """Locate a cycle by Newton shooting and return a fully populated :class:`Cycle`.

    Toroidal systems and maps solve ``P^m(x) - x = 0`` on the section
    ``phi = s0``.  Autonomous flows solve for ``(x, T)`` with the phase
    condition ``(x - guess) . B(guess) = 0``; ``period_guess`` defaults to the
    ``m``-th return to the plane through ``guess`` normal to the field.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    guess = system.check_point(guess)
    n = system.dim
    if system.kind == "flow_autonomous":
        if period_guess is None:
            period_guess = first_return_time(system, guess, m, tol=tol, method=method,
                                             max_period=max_period)
        f_ref = system(guess)

        def evaluate(z):
            x, T = z[:n], z[n]
            if T <= 0:
                raise DomainError("non-positive period")
            xT, DX = flow_map(system, x, T, tol=tol, method=method)
            return float(np.linalg.norm(xT - x)), (xT, DX)

        def step(z, state):
            x = z[:n]
            xT, DX = state
            J = np.zeros((n + 1, n + 1))
            J[:n, :n] = DX - np.eye(n)
            J[:n, n] = system(xT)
            J[n, :n] = f_ref
            _guard_condition(J, "shooting Jacobian [DX_T - I, B; B^T, 0]")
            rhs = np.concatenate([xT - x, [np.dot(x - guess, f_ref)]])
            return -np.linalg.solve(J, rhs)

        z, r, state, hist = _damped_newton(evaluate, step, np.append(guess, period_guess),
                                           newton_tol, max_iter)
        x, period = z[:n], float(z[n])
        jac0 = state[1]
        sections = s0 + period * np.arange(n_sections) / n_sections
    else:
        def evaluate(x):
            px, DP = return_map(system, x, m, s0, tol, method)
            return float(np.linalg.norm(px - x)), (px, DP)

        def step(x, state):
            px, DP = state
            J = DP - np.eye(n)
            _guard_condition(J, "DP^m - I")
            return -np.linalg.solve(J, px - x)

        try:
            x, r, state, hist = _damped_newton(evaluate, step, guess, newton_tol, max_iter)
        except ConvergenceError as exc:
            # a stall against a unit multiplier is a degenerate cycle, not a bad seed
            DP = exc.state[1]
            if classify_multipliers(eigen_decomposition(DP)[0]) == "degenerate":
                raise DegenerateCycleError(
                    f"{exc}; DP^m has a unit multiplier", np.linalg.cond(DP - np.eye(n))) from exc
            raise
        jac0 = state[1]
        if system.kind == "map":
            period = float(m)
            sections = np.arange(m, dtype=float)
        else:
            period = 2.0 * math.pi * m
            sections = s0 + period * np.arange(n_sections) / n_sections
    return _populate(system, m, period, sections, x, jac0, r, hist, tol, method, newton_tol)


def _populate(system, m, period, sections, x, jac0, residual, history, tol, method, newton_tol):
    n = system.dim
    stub = Cycle(system, m, period, np.asarray(sections, float), np.array([x]),
                 np.array([jac0]), np.zeros((1, n), complex), np.zeros((1, n, n), complex),
                 "degenerate", residual, history, tol, method, newton_tol)
    points, jacs = _propagate_along(stub, jac0)
    eig = [eigen_decomposition(J) for J in jacs]
    cyc = replace(stub, points=points, jac_full=jacs,
                  eigvals=np.array([e[0] for e in eig]), eigvecs=np.array([e[1] for e in eig]))
    return replace(cyc, classification=classify_cycle(cyc))


def first_return_time(system, x, m=1, tol=DEFAULT_TOL, method=DEFAULT_METHOD, max_period=1e4):
    """Time of the ``m``-th return to the plane through ``x`` normal to ``B(x)``."""
    f = system(x)

    def event(t, y):
        return float(np.dot(y - x, f))

    event.direction = 1.0
    event.terminal = m + 1
    sol = solve_ivp(lambda t, y: system(y, t), (0.0, max_period), x, method=method,
                    rtol=tol[0], atol=tol[1], events=event)
    # the start lies on the plane; drop the crossing reported there
    times = sol.t_events[0][sol.t_events[0] > 1e-9 * max(1.0, max_period)]
    if len(times) < m:
        raise ConvergenceError(f"no {m}-th return to the section within t={max_period}")
    return float(times[m - 1])


# ---------------------------------------------------------------------------
# jacobian propagation


def _commutator_rhs(system, n):
    def rhs(s, y):
        x = y[:n]
        d = system.derivatives(x, s, 1)
        DP = y[n:].reshape(n, n)
        A = d.grad
        return np.concatenate([d.value, (A @ DP - DP @ A).ravel()])

    return rhs


def _propagate_along(cycle, jac0, samples=None):
    """Points and full-period Jacobians at ``samples`` (default: the cycle sections)."""
    system, n = cycle.system, cycle.system.dim
    x0 = cycle.points[0]
    grid = cycle.sections if samples is None else np.asarray(samples, float)
    if system.kind == "map":
        xs, jacs = [np.asarray(x0, float)], [np.asarray(jac0, float)]
        for i in range(int(round(grid[-1]))):
            J = system.jacobian(xs[-1], float(i))
            jacs.append(J @ jacs[-1] @ np.linalg.inv(J))
            xs.append(system(xs[-1], float(i)))
        idx = [int(round(g)) for g in grid]
        return np.array([xs[i] for i in idx]), np.array([jacs[i] for i in idx])
    span = (cycle.s0, grid[-1])
    y0 = np.concatenate([x0, np.asarray(jac0, float).ravel()])
    if span[0] == span[1]:
        return np.array([x0]), np.array([jac0])
    ts, ys, _ = solve(_commutator_rhs(system, n), span, y0, cycle.tol, grid, cycle.method)
    Y = ys.T
    return Y[:, :n].copy(), Y[:, n:].reshape(-1, n, n).copy()


def evolve_jacobian(cycle, jac0=None, samples=None):
    """Full-period Jacobian propagated around the cycle by the commutator equation.

    ``jac0`` defaults to a direct computation at section 0.  Returns an array
    of shape ``(n_samples, d, d)``; ``samples`` defaults to the stored sections
    and may extend to ``s0 + period`` for a closure check.
    """
    if jac0 is None:
        jac0 = full_period_jacobian(cycle, 0)
    return _propagate_along(cycle, jac0, samples)[1]


def full_period_jacobian(cycle, section_index=0):
    """``DP^m`` (toroidal, map) or ``DX_T`` (flow) recomputed directly at one section."""
    x = cycle.points[section_index]
    s = float(cycle.sections[section_index])
    system = cycle.system
    if system.kind == "flow_autonomous":
        return flow_map(system, x, cycle.period, s, cycle.tol, cycle.method)[1]
    if system.kind == "map":
        J = np.eye(system.dim)
        y = np.asarray(x, float)
        for i in range(cycle.m):
            J = system.jacobian(y, float(i)) @ J
            y = system(y, float(i))
        return J
    return return_map(system, x, cycle.m, s, cycle.tol, cycle.method)[1]


def closure_residuals(cycle):
    """``|P^m(x_j) - x_j|`` at every stored section."""
    out = []
    for j in range(cycle.n_sections):
        x, s = cycle.points[j], float(cycle.sections[j])
        if cycle.kind == "flow_autonomous":
            xe = flow_map(cycle.system, x, cycle.period, s, cycle.tol, cycle.method)[0]
        else:
            xe = return_map(cycle.system, x, cycle.m, s, cycle.tol, cycle.method)[0] \
                if cycle.kind == "flow_toroidal" else iterate_map(cycle.system, x, cycle.m).x[-1]
        out.append(float(np.linalg.norm(xe - x)))
    return np.array(out)


def scan_seeds(system, m, bounds, n=(21, 21), s0=0.0, keep=5, tol=DEFAULT_TOL):
    """Grid points of a 2-D section ordered by closure residual ``|P^m(x) - x|``.

    ``bounds`` is ``((lo0, hi0), (lo1, hi1))``.  Returns the ``keep`` best
    ``(residual, point)`` pairs; points whose orbits leave the domain are
    skipped.  A coarse scan seeds :func:`find_cycle` for island chains.
    """
    if system.dim != 2 or system.kind == "flow_autonomous":
        raise ValueError("scan_seeds needs a 2-D section (toroidal system or planar map)")
    scored = []
    for a in np.linspace(*bounds[0], n[0]):
        for b in np.linspace(*bounds[1], n[1]):
            x = np.array([a, b])
            try:
                if system.kind == "map":
                    end = iterate_map(system, x, m, with_jac=False).x[-1]
                else:
                    end = integrate_flow(system, x, (s0, s0 + 2.0 * math.pi * m), tol=tol).final
            except (DomainError, IntegrationError):
                continue
            scored.append((float(np.linalg.norm(end - x)), x))
    scored.sort(key=lambda item: item[0])
    return scored[:keep]


def smallest_period(system, x, m_max=10, tol=1e-6, s0=0.0, sol_tol=DEFAULT_TOL):
    """Smallest ``m <= m_max`` with ``|P^m(x) - x| <= tol``, or ``None``."""
    if system.kind == "map":
        xs = iterate_map(system, x, m_max, with_jac=False).x
        for m in range(1, m_max + 1):
            if np.linalg.norm(xs[m] - xs[0]) <= tol:
                return m
        return None
    span = (s0, s0 + 2.0 * math.pi * m_max)
    grid = s0 + 2.0 * math.pi * np.arange(1, m_max + 1)
    ts, ys, _ = solve(lambda s, y: system(y, s), span, np.asarray(x, float), sol_tol, grid)
    for m in range(1, m_max + 1):
        if np.linalg.norm(ys[:, m - 1] - x) <= tol:
            return m
    return None


# ---------------------------------------------------------------------------
# Poincare plots


@dataclass
class SectionPoints:
    seed: np.ndarray
    points: np.ndarray  # (turns, 2), NaN after a domain exit
    flag: str = "ok"


def poincare_section(system, seeds, turns, s0=0.0, tol=DEFAULT_TOL, method=DEFAULT_METHOD):
    """Section crossings ``P^j(seed)``, ``j = 1..turns``, for toroidal systems or maps.

    A seed that leaves the domain keeps its rows (NaN) and is flagged
    ``domain_exit``; the other seeds are unaffected.
    """
    out = []
    for seed in np.atleast_2d(np.asarray(seeds, float)):
        # escaping map orbits overflow to inf before the finiteness check flags them
        with np.errstate(over="ignore", invalid="ignore"):
            pts, flag = _section_points(system, seed, turns, s0, tol, method)
        out.append(SectionPoints(seed, pts, flag))
    return out


def _section_points(system, seed, turns, s0, tol, method):
    pts = np.full((turns, system.dim), np.nan)
    try:
        if system.kind == "map":
            xs = iterate_map(system, seed, turns, with_jac=False).x[1:]
        elif system.kind == "flow_toroidal":
            grid = s0 + 2.0 * math.pi * np.arange(1, turns + 1)
            _, ys, _ = solve(lambda s, y: system(y, s), (s0, grid[-1]), seed, tol, grid, method)
            xs = ys.T
        else:
            raise ValueError("Poincare sections need a toroidal system or a map")
    except (DomainError, IntegrationError):
        return _partial_section(system, seed, turns, s0, tol, method), "domain_exit"
    pts[:len(xs)] = xs
    return pts, "ok"


def _partial_section(system, seed, turns, s0, tol, method):
    pts = np.full((turns, system.dim), np.nan)
    x = np.asarray(seed, float)
    for j in range(turns):
        try:
            if system.kind == "map":
                x = system(x, float(j))
            else:
                span = (s0 + 2 * math.pi * j, s0 + 2 * math.pi * (j + 1))
                _, ys, _ = solve(lambda s, y: system(y, s), span, x, tol, [span[1]], method)
                x = ys[:, -1]
        except (DomainError, IntegrationError):
            break
        pts[j] = x
    return pts


def rotation_number(system, seed, turns, center, s0=0.0, tol=DEFAULT_TOL, method=DEFAULT_METHOD,
                    samples_per_turn=32):
    """Mean poloidal winding per toroidal turn about ``center``.

    Toroidal orbits are sampled ``samples_per_turn`` times per turn so the
    unwrapped angle cannot alias; maps use their iterates, which assumes an
    advance below half a winding per step.
    """
    seed = np.asarray(seed, float)
    if system.kind == "map":
        pts = iterate_map(system, seed, turns, with_jac=False).x
        steps = turns
    else:
        grid = s0 + 2.0 * math.pi * np.arange(turns * samples_per_turn + 1) / samples_per_turn
        _, ys, _ = solve(lambda s, y: system(y, s), (grid[0], grid[-1]), seed, tol, grid, method)
        pts, steps = ys.T, turns
    theta = np.unwrap(np.arctan2(pts[:, 1] - center[1], pts[:, 0] - center[0]))
    return float((theta[-1] - theta[0]) / (2.0 * math.pi * steps))


# ---------------------------------------------------------------------------
# serialization


def _complex_pairs(a):
    a = np.asarray(a)
    return np.stack([a.real, a.imag], axis=-1).tolist()


def cycle_to_dict(cycle):
    """JSON-ready record: sections, Jacobians (row-major), eigen-data as (re, im) pairs."""
    spec = getattr(cycle.system, "spec", None)
    return {
        "system": spec if spec else {"name": cycle.system.name},
        "kind": cycle.kind,
        "m": cycle.m,
        "period": cycle.period,
        "class": cycle.classification,
        "residual": cycle.residual,
        "newton_history": list(cycle.history),
        "sections": [
            {
                "s": float(cycle.sections[j]),
                "point": cycle.points[j].tolist(),
                "jacobian": cycle.jac_full[j].ravel().tolist(),
                "eigenvalues": _complex_pairs(cycle.eigvals[j]),
                "eigenvectors": _complex_pairs(cycle.eigvecs[j].T),
            }
            for j in range(cycle.n_sections)
        ],
    }


def ribbon_rows(cycle):
    """Eigenvector ribbon table: s, point, then (lambda_i, v_i) per multiplier (real parts)."""
    rows = []
    for j in range(cycle.n_sections):
        row = [float(cycle.sections[j]), *cycle.points[j].tolist()]
        for i in range(len(cycle.eigvals[j])):
            row.append(float(cycle.eigvals[j][i].real))
            row.append(float(cycle.eigvals[j][i].imag))
            row.extend(cycle.eigvecs[j][:, i].real.tolist())
        rows.append(row)
    return rows


def ribbon_columns(cycle):
    coords = ["R", "Z"] if cycle.kind == "flow_toroidal" else [f"x{i}" for i in range(cycle.system.dim)]
    cols = ["s", *coords]
    for i in range(len(cycle.eigvals[0])):
        cols += [f"lambda{i + 1}_re", f"lambda{i + 1}_im"] + [f"v{i + 1}_{c}" for c in coords]
    return cols
