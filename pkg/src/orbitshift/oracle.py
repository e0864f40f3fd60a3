"""Brute-force references for the predictions in :mod:`propagate` and :mod:`shifts`.

Cycles are relocated by Newton shooting in the finitely perturbed system,
derivatives in ``k`` come from central differences with a Richardson error
estimate, and residual ladders are reduced to a fitted convergence order.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.optimize import brentq

from .cycles import find_cycle
from .errors import InsufficientDataError, OrbitShiftError
from .fields import as_direction, perturbed_system
from .propagate import integrate_flow, integrate_variations, iterate_map, taylor_shift
from .shifts import (cycle_shift_perpendicular, cycle_shift_section, eigenvalue_derivatives,
                     jacobian_total_derivative, shifted_curve)

K_LADDER = (1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 3e-4, 1e-4)
RESIDUAL_FLOOR = 1e-12


def validate_k_list(k_list):
    """Strictly decreasing positive ``k`` values, at least 3, spanning two decades."""
    k = np.asarray(k_list, dtype=float)
    if k.ndim != 1 or len(k) < 3:
        raise ValueError("k_list needs at least 3 values")
    if not np.all(np.isfinite(k)) or np.any(k <= 0):
        raise ValueError("k_list values must be positive and finite")
    if np.any(np.diff(k) >= 0):
        raise ValueError("k_list must be strictly decreasing")
    if math.log10(k[0] / k[-1]) < 2.0 - 1e-12:
        raise ValueError("k_list must span at least two decades")
    return k


def _parallel_map(func, items, workers):
    items = list(items)
    if workers is None or workers <= 1:
        return [func(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))


# ---------------------------------------------------------------------------
# relocation and finite differences


def relocate_cycle(system, pert, k, seed_cycle, predictor=True, newton_tol=None, tol=None):
    """Find the cycle of ``B + k dB`` by Newton shooting from ``seed_cycle``.

    The guess is the seed point, moved by the first-order prediction when
    ``predictor`` is true (toroidal systems and maps).  ``newton_tol``
    defaults to a hundredth of the seed's.
    """
    direction, scale = as_direction(pert)
    kk = k * scale
    newton_tol = seed_cycle.newton_tol / 100.0 if newton_tol is None else newton_tol
    tol = seed_cycle.tol if tol is None else tol
    guess = np.array(seed_cycle.point, dtype=float)
    if predictor and kk != 0.0 and seed_cycle.kind != "flow_autonomous":
        guess = guess + kk * cycle_shift_section(seed_cycle, direction, 0)
    target = system if kk == 0.0 else perturbed_system(system, direction, kk)
    kwargs = {}
    if seed_cycle.kind == "flow_autonomous":
        kwargs["period_guess"] = seed_cycle.period
    return find_cycle(target, guess, seed_cycle.m, s0=seed_cycle.s0, newton_tol=newton_tol,
                      n_sections=seed_cycle.n_sections, tol=tol, method=seed_cycle.method,
                      **kwargs)


@dataclass(frozen=True)
class FDEstimate:
    """Finite-difference estimate with a Richardson error estimate.

    ``value`` uses step ``h``; ``extrapolated`` combines ``h`` and ``h/2``;
    ``ratio`` is the observed ``|D(h) - D(h/2)| / |D(h/2) - D(h/4)|``, close to
    ``2^p`` for a scheme of order ``p`` in its asymptotic range.
    """

    value: np.ndarray
    extrapolated: np.ndarray
    error: float
    ratio: float
    h: float


_STENCILS = {
    ("central", 1): ((-1, -0.5), (1, 0.5)),
    ("central", 2): ((-1, 1.0), (0, -2.0), (1, 1.0)),
    ("central", 3): ((-2, -0.5), (-1, 1.0), (1, -1.0), (2, 0.5)),
    ("forward", 1): ((0, -1.0), (1, 1.0)),
}


def finite_difference(quantity, h, scheme="central", derivative=1, k0=0.0):
    """Estimate ``d^derivative quantity / dk^derivative`` at ``k0``.

    ``quantity(k)`` may return a scalar or an array.  Forward differences are
    available for the first derivative only.
    """
    key = (scheme, derivative)
    if key not in _STENCILS:
        raise ValueError(f"unsupported scheme/derivative {key}")
    if not h > 0:
        raise ValueError("h must be positive")
    cache = {}

    def q(j, step):
        kk = k0 + j * step
        if kk not in cache:
            cache[kk] = np.asarray(quantity(kk), dtype=float)
        return cache[kk]

    def stencil(step):
        return sum(c * q(j, step) for j, c in _STENCILS[key]) / step ** derivative

    d1, d2, d4 = stencil(h), stencil(h / 2), stencil(h / 4)
    p = 1 if scheme == "forward" else 2
    extrap = d2 + (d2 - d1) / (2 ** p - 1)
    e12 = float(np.max(np.abs(d1 - d2)))
    e24 = float(np.max(np.abs(d2 - d4)))
    ratio = e12 / e24 if e24 > 0 else math.inf
    return FDEstimate(d1, extrap, e12 / (2 ** p - 1), ratio, h)


def fit_order(k_list, residuals, floor=RESIDUAL_FLOOR):
    """Least-squares slope of ``log residual`` against ``log k`` with a 95% half-width.

    Residuals that are non-finite or below ``floor`` are dropped.  Raises
    :class:`InsufficientDataError` when fewer than 3 points remain.
    """
    k = np.asarray(k_list, dtype=float)
    r = np.asarray(residuals, dtype=float)
    keep = np.isfinite(r) & (r > max(floor, 100 * np.finfo(float).eps)) & (k > 0)
    if keep.sum() < 3:
        raise InsufficientDataError(f"only {int(keep.sum())} usable residuals above {floor:g}")
    fit = stats.linregress(np.log(k[keep]), np.log(r[keep]))
    dof = int(keep.sum()) - 2
    half = float(stats.t.ppf(0.975, dof) * fit.stderr) if dof > 0 else math.inf
    return float(fit.slope), half


# ---------------------------------------------------------------------------
# reports


def _plain(value):
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return _plain(value.item())
    if isinstance(value, complex):
        return [value.real, value.imag]
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


@dataclass
class ShiftReport:
    """Prediction-versus-reference ladder with its fitted order and pass flag."""

    case: str
    k_list: list
    predicted: list
    reference: list
    residuals: list
    expected_order: float
    order_tol: float
    fitted_order: float = math.nan
    half_width: float = math.nan
    passed: bool = False
    failures: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def evaluate(self, floor=RESIDUAL_FLOOR):
        try:
            self.fitted_order, self.half_width = fit_order(self.k_list, self.residuals, floor)
            self.passed = abs(self.fitted_order - self.expected_order) <= self.order_tol
        except InsufficientDataError as exc:
            self.failures["fit"] = str(exc)
            self.passed = False
        return self

    def to_dict(self):
        return _plain({
            "case": self.case, "k_list": self.k_list, "predicted": self.predicted,
            "reference": self.reference, "residuals": self.residuals,
            "expected_order": self.expected_order, "order_tol": self.order_tol,
            "fitted_order": self.fitted_order, "half_width": self.half_width,
            "pass": bool(self.passed), "failures": self.failures, "extra": self.extra,
        })

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def csv_rows(self):
        return [[k, r] for k, r in zip(self.k_list, self.residuals)]


def _ladder(case, k_list, compute, expected, order_tol, workers=None):
    k_list = validate_k_list(k_list)

    def one(k):
        try:
            return compute(float(k))
        except OrbitShiftError as exc:
            return exc

    out = _parallel_map(one, k_list, workers)
    pred, ref, res, failures = [], [], [], {}
    for k, item in zip(k_list, out):
        if isinstance(item, Exception):
            failures[f"{k:g}"] = f"{type(item).__name__}: {item}"
            pred.append(None)
            ref.append(None)
            res.append(math.nan)
        else:
            p, r, e = item
            pred.append(p)
            ref.append(r)
            res.append(e)
    report = ShiftReport(case, k_list.tolist(), pred, ref, res, expected, order_tol,
                         failures=failures)
    return report.evaluate()


def taylor_study(system, x0, span, pert, order, k_list=K_LADDER, samples=16, tol=None,
                 workers=None):
    """Residual of the order-``order`` Taylor trajectory against brute-force re-integration.

    The residual is the max over samples of the Euclidean distance; its
    expected order in ``k`` is ``order + 1``.  For maps ``span`` is the
    iterate count.
    """
    direction, _ = as_direction(pert)
    kwargs = {} if tol is None else {"tol": tol}
    if system.kind == "map":
        bundle = iterate_map(system, x0, int(span), direction, order, with_jac=False)

        def brute(k):
            return iterate_map(perturbed_system(system, direction, k), x0, int(span)).x
    else:
        bundle = integrate_variations(system, x0, span, direction, order, samples=samples,
                                      with_jac=False, **kwargs)

        def brute(k):
            return integrate_flow(perturbed_system(system, direction, k), x0, span,
                                  samples=bundle.s, **kwargs).x

    def compute(k):
        pred = taylor_shift(bundle, k, order).x
        ref = brute(k)
        return pred[-1], ref[-1], float(np.max(np.linalg.norm(pred - ref, axis=1)))

    return _ladder(f"taylor_order{order}", k_list, compute, order + 1.0, 0.1 * (order + 1),
                   workers)


def cycle_shift_study(cycle, pert, k_list=K_LADDER, newton_tol=None, tol=None, workers=None):
    """``|x_cyc(k) - x_cyc(0) - k dx_cyc|`` against brute-force relocation; expected order 2."""
    direction, scale = as_direction(pert)
    dx = cycle_shift_section(cycle, direction, 0)

    def compute(k):
        reloc = relocate_cycle(cycle.system, direction, k * scale, cycle, newton_tol=newton_tol,
                               tol=tol)
        pred = cycle.point + k * scale * dx
        return pred, reloc.point, float(np.linalg.norm(reloc.point - pred))

    report = _ladder("cycle_shift", k_list, compute, 2.0, 0.2, workers)
    report.extra["shift"] = scale * dx
    return report


def toroidal_angles(points):
    """Unwrapped toroidal angle ``atan2(y, x)`` along an ordered list of Cartesian points."""
    return np.unwrap([math.atan2(p[1], p[0]) for p in points])


def distance_to_toroidal_curve(curve, point, phi_guess, window=0.2):
    """Distance from a Cartesian ``point`` to ``phi -> (R, Z)(phi)`` embedded in 3-D.

    The foot point is found from the orthogonality condition within
    ``phi_guess +- window``.
    """
    def cart(ph):
        q = curve(ph)
        return np.array([q[0] * math.cos(ph), q[0] * math.sin(ph), q[1]])

    def g(ph, h=1e-5):
        return float(np.dot(point - cart(ph), (cart(ph + h) - cart(ph - h)) / (2 * h)))

    lo, hi = phi_guess - window, phi_guess + window
    if g(lo) * g(hi) > 0:
        grid = np.linspace(lo, hi, 41)
        ph = grid[np.argmin([np.linalg.norm(point - cart(p)) for p in grid])]
    else:
        ph = brentq(g, lo, hi, xtol=1e-14)
    return float(np.linalg.norm(point - cart(ph)))


def perpendicular_study(cycle3, pert3, cycle2, pert2, k_list=K_LADDER, workers=None):
    """Point-to-curve distance between the 3-D perpendicular-plane prediction and the
    reduced toroidal prediction of the same shifted cycle; expected order 2.

    ``cycle3`` is the cycle of the Cartesian embedding, ``cycle2`` the same
    cycle of the reduced system.
    """
    shifts3 = cycle_shift_perpendicular(cycle3, pert3)
    phis = toroidal_angles(cycle3.points)
    phis = phis - 2 * math.pi * round((phis[0] - cycle2.s0) / (2 * math.pi))
    span = cycle2.period

    def compute(k):
        curve = shifted_curve(cycle2, pert2, k)
        wrapped = lambda ph: curve(cycle2.s0 + (ph - cycle2.s0) % span)
        pts = cycle3.points + k * shifts3
        dist = [distance_to_toroidal_curve(wrapped, p, ph) for p, ph in zip(pts, phis)]
        return pts[0], None, float(max(dist))

    report = _ladder("perpendicular_vs_reduced", k_list, compute, 2.0, 0.2, workers)
    b = np.array([cycle3.system(x) for x in cycle3.points])
    b /= np.linalg.norm(b, axis=1)[:, None]
    report.extra["orthogonality"] = float(np.max(np.abs(np.sum(b * shifts3, axis=1))
                                                 / np.linalg.norm(shifts3, axis=1)))
    return report


def jacobian_fd_check(cycle, pert, k=1e-4, newton_tol=None, tol=None):
    """Relative error of the predicted ``dDP^m/dk`` against a central difference of
    relocated-and-recomputed ``DP^m`` at ``+-k``, per section."""
    direction, scale = as_direction(pert)
    pred = jacobian_total_derivative(cycle, direction)
    plus = relocate_cycle(cycle.system, direction, k, cycle, newton_tol=newton_tol, tol=tol)
    minus = relocate_cycle(cycle.system, direction, -k, cycle, newton_tol=newton_tol, tol=tol)
    fd = (plus.jac_full - minus.jac_full) / (2 * k)
    rel = [float(np.linalg.norm(p - f) / np.linalg.norm(f)) for p, f in zip(pred.djac, fd)]
    dlam_fd = (plus.eigvals - minus.eigvals) / (2 * k)
    lam_rel = float(np.max(np.abs(pred.eig_derivatives - dlam_fd) / np.abs(dlam_fd)))
    return {"relative_error": rel, "max_relative_error": max(rel),
            "eig_derivative_relative_error": lam_rel, "predicted": pred.djac[0] * scale,
            "reference": fd[0] * scale, "trace_identity": pred.det_identity_residual()}


def eigenvalue_drift_study(cycle, pert, k_list=K_LADDER, newton_tol=None, tol=None, workers=None):
    """``max_i |lambda_i(k) - lambda_i(0) - k dlambda_i/dk|`` against relocation; expected order 2."""
    direction, scale = as_direction(pert)
    lam0, dlam = eigenvalue_derivatives(cycle.jac_full[0], jacobian_total_derivative(
        cycle, direction).djac[0])

    def compute(k):
        kk = k * scale
        reloc = relocate_cycle(cycle.system, direction, kk, cycle, newton_tol=newton_tol, tol=tol)
        pred = lam0 + kk * dlam
        return pred, reloc.eigvals[0], float(np.max(np.abs(reloc.eigvals[0] - pred)))

    report = _ladder("eigenvalue_drift", k_list, compute, 2.0, 0.2, workers)
    report.extra["dlambda"] = [[complex(v).real, complex(v).imag] for v in scale * dlam]
    return report
