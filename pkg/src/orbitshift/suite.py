"""The verification suite run by ``orbitshift verify``.

Each criterion builds its own cases from the catalog, compares predictions
with independent references, and returns a :class:`CriterionResult`.  The
numbers in ``details`` are deterministic; wall-clock runtime is kept apart so
that serialized reports are byte-reproducible.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import fields as F
from .cycles import find_cycle, full_period_jacobian
from .errors import OrbitShiftError
from .oracle import (K_LADDER, _plain, cycle_shift_study, eigenvalue_drift_study,
                     finite_difference, jacobian_fd_check, perpendicular_study, taylor_study)
from .propagate import integrate_flow, integrate_variations
from .shifts import (cycle_shift_section, delta_return_map, evolve_cycle_shift,
                     evolve_delta_return)

TIGHT = (1e-12, 1e-14)
# Taylor order-3 residuals reach ~1e-12 at k = 3e-3; the reference must sit below that
TAYLOR_TOL = (1e-13, 1e-15)
# the X-cycle of the (2, 1) island chain, seeded below the axis on phi = 0
X_SEED = (1.0, -0.2978)


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    budget: float
    details: dict = field(default_factory=dict)
    runtime: float = math.nan
    error: str | None = None

    def to_dict(self):
        return _plain({"criterion": self.number, "name": self.name, "pass": bool(self.passed),
                       "runtime_budget_s": self.budget, "details": self.details,
                       "error": self.error})


def _rel(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def _max_rel(rows_a, rows_b):
    return max(_rel(a, b) for a, b in zip(rows_a, rows_b))


class _Cases:
    """Lazily built cycles shared between criteria."""

    def __init__(self, tol=None):
        self.tol = tol
        self._cache = {}

    def _get(self, key, build):
        if key not in self._cache:
            self._cache[key] = build()
        return self._cache[key]

    def _tol(self, default):
        return self.tol or default

    def toroidal(self):
        return self._get("tor", lambda: (F.make_system("model_toroidal"),))[0]

    def mode(self):
        return self._get("mode", lambda: F.make_perturbation("resonant_mode", base=self.toroidal()))

    def x_cycle(self, tol=TIGHT):
        tol = self._tol(tol)
        return self._get(("x", tol), lambda: find_cycle(self.toroidal(), np.array(X_SEED), 2,
                                                        tol=tol))

    def torus3d(self):
        return self._get("tor3", lambda: F.make_system("model_toroidal_3d"))

    def mode3d(self):
        return self._get("mode3", lambda: F.make_perturbation("resonant_mode_3d",
                                                              base=self.torus3d()))

    def x_cycle3d(self, tol=TIGHT, n_sections=16):
        tol = self._tol(tol)

        def build():
            R, Z = self.x_cycle(tol).point
            return find_cycle(self.torus3d(), np.array([R, 0.0, Z]), 2, tol=tol,
                              n_sections=n_sections)

        return self._get(("x3", tol, n_sections), build)


# ---------------------------------------------------------------------------


def _variation_fd(system, direction, x0, span, bundle, h, tol):
    """Central differences in k of brute-force trajectories (orders 1..3) at the span end."""
    def end(k):
        target = system if k == 0 else F.perturbed_system(system, direction, k)
        return integrate_flow(target, x0, span, tol=tol, samples=[span[1]]).x[-1]

    out = {}
    for j, (hj, rtol) in {1: (1e-3, 1e-6), 2: (1e-2, 1e-5), 3: (1e-2, 1e-4)}.items():
        est = finite_difference(end, hj if j > 1 else h, derivative=j)
        pred = bundle.variation(j)[-1]
        out[f"order{j}"] = {"relative_error": _rel(pred, est.extrapolated), "tolerance": rtol,
                            "richardson_ratio": est.ratio}
    return out


def criterion_1(cases, workers=None):
    """Variation hierarchy against FD in k and Taylor residual orders."""
    rot = F.make_system("planar_rotation")
    abc = F.make_system("abc")
    setups = {
        "planar_rotation": (rot, F.make_perturbation("expression", {"components": (
            "x1**2 + sin(x0)", "-x0*x1")}, base=rot), np.array([1.0, 0.0]), (0.0, 2.0)),
        "abc": (abc, F.make_perturbation("param_derivative", {"param": "A"}, base=abc),
                np.array([0.1, 0.2, 0.3]), (0.0, 2.0)),
    }
    details, ok = {}, True
    for name, (system, pert, x0, span) in setups.items():
        bundle = integrate_variations(system, x0, span, pert, 3, tol=TAYLOR_TOL,
                                      samples=[span[1]], with_jac=False)
        fd = _variation_fd(system, pert, x0, span, bundle, 1e-3, TAYLOR_TOL)
        ok &= all(v["relative_error"] <= v["tolerance"] for v in fd.values())
        orders = {}
        for order in (1, 2, 3):
            rep = taylor_study(system, x0, span, pert, order, K_LADDER, samples=9, tol=TAYLOR_TOL,
                               workers=workers)
            ok &= rep.passed
            orders[f"order{order}"] = {"fitted_order": rep.fitted_order,
                                       "half_width": rep.half_width,
                                       "expected": rep.expected_order, "pass": rep.passed,
                                       "residuals": rep.residuals}
        details[name] = {"fd_match": fd, "taylor": orders}
    return ok, details


def criterion_2(cases, workers=None):
    """det DX_T = 1 on divergence-free flows; DX_T B = B on flow cycles."""
    details, ok = {}, True
    dets = {}
    abc = F.make_system("abc")
    b = integrate_variations(abc, np.array([0.1, 0.2, 0.3]), (0.0, 10.0), samples=[10.0])
    dets["abc_t10"] = abs(np.linalg.det(b.jac[-1]) - 1.0)
    c3 = cases.x_cycle3d()
    dets["toroidal3d_x_cycle"] = max(abs(np.linalg.det(J) - 1.0) for J in c3.jac_full)
    rot = F.make_system("planar_rotation")
    br = integrate_variations(rot, np.array([1.0, 0.0]), (0.0, 2 * math.pi), samples=[2 * math.pi])
    dets["planar_rotation_2pi"] = abs(np.linalg.det(br.jac[-1]) - 1.0)
    ok &= all(v <= 1e-7 for v in dets.values())
    details["det_minus_one"] = dets

    cyc = {"toroidal3d_x_cycle": c3,
           "toroidal3d_axis": find_cycle(cases.torus3d(), np.array([1.01, 0.0, 0.0]), 1,
                                         tol=TIGHT),
           "hopf": find_cycle(F.make_system("hopf"), np.array([0.75, 0.05]), 1, tol=TIGHT),
           "planar_rotation": find_cycle(rot, np.array([1.0, 0.0]), 1, tol=TIGHT)}
    unit = {}
    for name, c in cyc.items():
        unit[name] = max(_rel(J @ c.system(x), c.system(x)) for J, x in zip(c.jac_full, c.points))
    ok &= all(v <= 1e-6 for v in unit.values())
    details["field_eigenvector_error"] = unit
    details["hopf_multiplier"] = [min(abs(cyc["hopf"].eigvals[0])), math.exp(-2 * math.pi)]
    return ok, details


def _spectrum_spread(cycle):
    ref = cycle.eigvals[0]
    return float(max(np.max(np.abs(v - ref) / np.abs(ref)) for v in cycle.eigvals))


def criterion_3(cases, workers=None):
    """Commutator-evolved DP^m against per-section recomputation; constant spectrum."""
    c = cases.x_cycle()
    direct = [full_period_jacobian(c, j) for j in range(c.n_sections)]
    rel = [_rel(J, D) for J, D in zip(c.jac_full, direct)]
    spread = _spectrum_spread(c)
    c3 = cases.x_cycle3d()
    spread3 = _spectrum_spread(c3)
    ok = max(rel) <= 1e-6 and spread <= 1e-8 and spread3 <= 1e-8
    return ok, {"n_sections": c.n_sections, "max_relative_error": max(rel),
                "eigenvalue_spread": spread, "eigenvalue_spread_3d": spread3,
                "eigenvalues": c.eigvals[0], "classification": c.classification}


def criterion_4(cases, workers=None):
    """Section-form cycle shift: analytic standard-map case and toroidal relocation order."""
    K, eps = 1.0, 1e-3
    sm = F.make_system("standard_map", {"K": K})
    fixed = find_cycle(sm, np.array([0.1, 0.1]), 1)
    kick = F.Perturbation(F.make_perturbation("standard_map_kick", base=sm), eps)
    shift = cycle_shift_section(fixed, kick)
    expected = np.array([-eps / K, 0.0])
    rel_map = _rel(shift, expected)
    rep = cycle_shift_study(cases.x_cycle(), cases.mode(), K_LADDER, newton_tol=1e-12, tol=TIGHT,
                            workers=workers)
    ok = rel_map <= 1e-10 and rep.passed
    return ok, {"standard_map": {"shift": shift, "expected": expected, "relative_error": rel_map},
                "toroidal_x_cycle": rep.to_dict()}


def criterion_5(cases, workers=None):
    """Along-cycle evolution of dP^m, dX_T and dx_cyc against per-section recomputation."""
    c, mode = cases.x_cycle(), cases.mode()
    out, ok = {}, True

    vals, closure = evolve_delta_return(c, mode, "Pm")
    direct = [delta_return_map(c, mode, j) for j in range(c.n_sections)]
    out["delta_Pm"] = {"relative_error": _max_rel(vals, direct), "closure": _rel(closure, vals[0])}

    vals, closure = evolve_cycle_shift(c, mode)
    direct = [cycle_shift_section(c, mode, j) for j in range(c.n_sections)]
    out["delta_x_cyc"] = {"relative_error": _max_rel(vals, direct),
                          "closure": _rel(closure, vals[0])}

    c3 = cases.x_cycle3d(n_sections=8)
    mode3 = cases.mode3d()
    vals, closure = evolve_delta_return(c3, mode3, "XT")
    direct = [delta_return_map(c3, mode3, j) for j in range(c3.n_sections)]
    out["delta_XT"] = {"relative_error": _max_rel(vals, direct), "closure": _rel(closure, vals[0])}

    for v in out.values():
        ok &= v["relative_error"] <= 1e-5 and v["closure"] <= 1e-6
    return ok, out


def criterion_6(cases, workers=None):
    """Perpendicular-plane shift of the 3-D embedding against the reduced prediction."""
    rep = perpendicular_study(cases.x_cycle3d(), cases.mode3d(), cases.x_cycle(), cases.mode(),
                              K_LADDER, workers=workers)
    orth = rep.extra["orthogonality"]
    return rep.passed and orth <= 1e-10, rep.to_dict()


def criterion_7(cases, workers=None):
    """Total Jacobian derivative against brute-force FD; eigenvalue drift order."""
    c, mode = cases.x_cycle(), cases.mode()
    fd = jacobian_fd_check(c, mode, k=1e-4, newton_tol=1e-13, tol=TIGHT)
    rep = eigenvalue_drift_study(c, mode, K_LADDER, newton_tol=1e-12, tol=TIGHT, workers=workers)
    ok = fd["max_relative_error"] <= 1e-4 and rep.passed and fd["trace_identity"] <= 1e-8
    return ok, {"fd_check": fd, "eigenvalue_drift": rep.to_dict()}


def criterion_8(cases, workers=None):
    """Product of the two quoted stellarator X-cycle multipliers is 1 (unit determinant)."""
    lam_u, lam_s = 1.94965374, 0.51291252
    product = lam_u * lam_s
    return abs(product - 1.0) <= 3e-6, {"lambda_u": lam_u, "lambda_s": lam_s, "product": product,
                                        "deviation": abs(product - 1.0)}


CRITERIA = {
    1: ("variational consistency", 10.0, criterion_1),
    2: ("Liouville and unit-eigenvalue invariants", 10.0, criterion_2),
    3: ("commutator evolution of DP^m", 30.0, criterion_3),
    4: ("cycle-shift first order", 60.0, criterion_4),
    5: ("evolution ODEs along the cycle", 60.0, criterion_5),
    6: ("perpendicular-plane form", 60.0, criterion_6),
    7: ("Jacobian total derivative", 120.0, criterion_7),
    8: ("multiplier-product sanity identity", 1.0, criterion_8),
}


def run_criterion(number, cases=None, workers=None):
    name, budget, func = CRITERIA[number]
    cases = cases or _Cases()
    t0 = time.perf_counter()
    try:
        ok, details = func(cases, workers)
        err = None
    except OrbitShiftError as exc:
        ok, details, err = False, {}, f"{type(exc).__name__}: {exc}"
    runtime = time.perf_counter() - t0
    # shared cycles are built on first use and charged to that criterion
    return CriterionResult(number, name, bool(ok) and runtime <= budget, budget, details, runtime,
                           err)


def run_suite(numbers=None, tol=None, workers=None):
    """Run the selected criteria (all by default) in order with shared cycle cases."""
    cases = _Cases(tol)
    return [run_criterion(n, cases, workers) for n in (numbers or sorted(CRITERIA))]
