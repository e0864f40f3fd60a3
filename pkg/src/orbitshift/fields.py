"""Field systems: autonomous flows, toroidal fields and maps.

A :class:`FieldSystem` evaluates a vector field (or a map) together with its
spatial derivative tensors up to third order.  Catalog systems are defined
symbolically; their derivative tensors are obtained by exact symbolic
differentiation and compiled lazily, one derivative order at a time.  Any
system can also be switched to ``finite_difference`` mode, and arbitrary
Python callables can be wrapped with :class:`CallableField` (finite
differences only).

Conventions
-----------
``grad[i, j] = dF_i/dx_j``, ``hess[i, j, k] = d2F_i/dx_j dx_k`` and
``third[i, j, k, l] = d3F_i/dx_j dx_k dx_l``.

For ``flow_toroidal`` systems the phase-space coordinates are the section
coordinates ``(R, Z)`` and the independent variable is the toroidal angle
``phi``.  ``raw`` returns the physical field ``(B_R, B_Z, B_phi)`` and
calling the system returns the reduced field ``R * B_pol / B_phi`` that
drives ``d(R, Z)/dphi``.  Its derivative tensors are those of the reduced
field, so ``grad`` is the 2x2 matrix ``A``.
"""

from __future__ import annotations

import functools
import itertools
import math
import threading
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
import sympy as sp

from .errors import DerivativeOrderError, DomainError

KINDS = ("flow_autonomous", "flow_toroidal", "map")

# FD step scales per derivative order.
FD_STEPS = {1: 1e-6, 2: 1e-4, 3: 1e-3}

T = sp.Symbol("t", real=True)
PHI = sp.Symbol("phi", real=True)
N_ITER = sp.Symbol("n", real=True)
R, Z = sp.symbols("R Z", real=True)


def coordinate_symbols(kind, dim):
    """Phase-space coordinate symbols and the independent-variable symbol."""
    if kind == "flow_toroidal":
        return (R, Z), PHI
    coords = sp.symbols(f"x0:{dim}", real=True)
    return tuple(coords), (T if kind == "flow_autonomous" else N_ITER)


@dataclass(frozen=True)
class DerivativeTensors:
    """Field value and spatial derivative tensors at one point.

    ``grad``, ``hess`` and ``third`` are ``None`` above the requested order.
    """

    value: np.ndarray
    grad: np.ndarray | None = None
    hess: np.ndarray | None = None
    third: np.ndarray | None = None

    @property
    def order(self):
        return sum(t is not None for t in (self.grad, self.hess, self.third))


class _Template:
    """Symbolic components with lazily compiled derivative evaluators.

    Parameters are kept symbolic so that one compilation serves every
    parameter value (in particular every perturbation scale ``k``).
    """

    def __init__(self, kind, coords, indep, params, exprs, raw=None, label="", param_names=()):
        self.kind = kind
        self.param_names = tuple(param_names)
        self.coords = tuple(coords)
        self.indep = indep
        self.params = tuple(params)
        self.exprs = tuple(sp.sympify(e) for e in exprs)
        self.raw = None if raw is None else tuple(sp.sympify(e) for e in raw)
        self.label = label
        self._compiled = {}
        self._diff_memo = {}
        self._lock = threading.Lock()

    @property
    def dim(self):
        return len(self.coords)

    def _diff(self, source, i, combo):
        key = (source, i, combo)
        if key not in self._diff_memo:
            if not combo:
                base = (self.exprs if source == "value" else self.raw)[i]
                self._diff_memo[key] = base
            else:
                parent = self._diff(source, i, combo[:-1])
                self._diff_memo[key] = sp.diff(parent, self.coords[combo[-1]])
        return self._diff_memo[key]

    def evaluator(self, order, source="value"):
        """Compiled function ``(x, s, p) -> tensor`` of the given derivative order."""
        key = (source, order)
        fn = self._compiled.get(key)
        if fn is None:
            with self._lock:
                fn = self._compiled.get(key)
                if fn is None:
                    fn = self._compile(order, source)
                    self._compiled[key] = fn
        return fn

    def _compile(self, order, source):
        exprs = self.exprs if source == "value" else self.raw
        if exprs is None:
            raise DerivativeOrderError(f"template {self.label!r} has no {source} components")
        n_out, n = len(exprs), self.dim
        combos = list(itertools.combinations_with_replacement(range(n), order))
        pos = {c: j for j, c in enumerate(combos)}
        unique = [self._diff(source, i, c) for i in range(n_out) for c in combos]
        args = [*self.coords, self.indep, *self.params]
        raw_fn = sp.lambdify(args, unique, modules="math", cse=True)
        shape = (n_out,) + (n,) * order
        index = np.array(
            [i * len(combos) + pos[tuple(sorted(rest))]
             for i, *rest in itertools.product(range(n_out), *[range(n)] * order)],
            dtype=int,
        )

        def fn(x, s, p):
            out = np.asarray(raw_fn(*x, s, *p), dtype=float)
            return out[index].reshape(shape)

        return fn


# ---------------------------------------------------------------------------
# finite differences


def _fd_steps(x, scale):
    return scale * np.maximum(1.0, np.abs(x))


def fd_derivatives(func, x, s=0.0, order=1, check=None):
    """Central-difference derivative tensors of ``func(x, s)`` up to ``order``.

    ``check(x)`` may raise :class:`DomainError` for stencil points; the error
    is re-raised with a note that the FD step left the domain.
    """
    x = np.asarray(x, dtype=float)
    n = x.size

    def f(y):
        if check is not None:
            try:
                check(y)
            except DomainError as exc:
                raise DomainError(f"finite-difference step leaves the domain: {exc}") from exc
        return np.asarray(func(y, s), dtype=float)

    value = f(x)
    m = value.size
    grad = hess = third = None
    if order >= 1:
        h = _fd_steps(x, FD_STEPS[1])
        grad = np.empty((m, n))
        for j in range(n):
            e = np.zeros(n)
            e[j] = h[j]
            grad[:, j] = (f(x + e) - f(x - e)) / (2 * h[j])
    if order >= 2:
        h = _fd_steps(x, FD_STEPS[2])
        hess = np.empty((m, n, n))
        for j, k in itertools.combinations_with_replacement(range(n), 2):
            acc = np.zeros(m)
            for sj, sk in itertools.product((1, -1), repeat=2):
                e = np.zeros(n)
                e[j] += sj * h[j]
                e[k] += sk * h[k]
                acc += sj * sk * f(x + e)
            hess[:, j, k] = hess[:, k, j] = acc / (4 * h[j] * h[k])
    if order >= 3:
        h = _fd_steps(x, FD_STEPS[3])
        third = np.empty((m, n, n, n))
        for combo in itertools.combinations_with_replacement(range(n), 3):
            acc = np.zeros(m)
            for signs in itertools.product((1, -1), repeat=3):
                e = np.zeros(n)
                for idx, sg in zip(combo, signs):
                    e[idx] += sg * h[idx]
                acc += np.prod(signs) * f(x + e)
            val = acc / (8 * np.prod([h[i] for i in combo]))
            for perm in set(itertools.permutations(combo)):
                third[(slice(None),) + perm] = val
    if order > 3:
        raise DerivativeOrderError("derivatives above third order are not supported")
    return DerivativeTensors(value, grad, hess, third)


# ---------------------------------------------------------------------------
# field systems


class FieldSystem:
    """Abstract field system; subclasses provide ``_value`` (and optionally
    ``_raw`` and ``_analytic``)."""

    kind: str
    dim: int
    name: str = "field"
    derivative_mode: str = "analytic"
    params: Mapping[str, float] = {}

    # -- subclass hooks
    def _value(self, x, s):
        raise NotImplementedError

    def _raw(self, x, s):
        raise DerivativeOrderError(f"{self.name}: raw field only exists for toroidal systems")

    def _analytic(self, x, s, order):
        raise DerivativeOrderError(f"{self.name}: no analytic derivatives")

    # -- public API
    def check_point(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise DomainError(f"{self.name}: expected a point of length {self.dim}, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise DomainError(f"{self.name}: non-finite coordinates {x}")
        if self.kind == "flow_toroidal" and x[0] <= 0.0:
            raise DomainError(f"{self.name}: R must be positive, got R={x[0]}")
        return x

    def __call__(self, x, s=0.0):
        x = self.check_point(x)
        v = self._guarded(self._value, x, s)
        if not np.all(np.isfinite(v)):
            raise DomainError(f"{self.name}: non-finite field value at {x}")
        return v

    def raw(self, x, s=0.0):
        """Physical field ``(B_R, B_Z, B_phi)`` of a toroidal system."""
        x = self.check_point(x)
        return self._guarded(self._raw, x, s)

    def derivatives(self, x, s=0.0, order=1):
        x = self.check_point(x)
        if not 0 <= order <= 3:
            raise DerivativeOrderError(f"derivative order must be in 0..3, got {order}")
        if order == 0:
            return DerivativeTensors(self(x, s))
        if self.derivative_mode == "analytic":
            d = self._guarded(self._analytic, x, s, order)
        else:
            d = fd_derivatives(lambda y, ss: self._guarded(self._value, y, ss), x, s, order,
                               check=self.check_point)
        if not np.all(np.isfinite(d.value)):
            raise DomainError(f"{self.name}: non-finite field value at {x}")
        return d

    def jacobian(self, x, s=0.0):
        return self.derivatives(x, s, 1).grad

    def with_mode(self, mode):
        """Copy of the system using ``analytic`` or ``finite_difference`` derivatives."""
        if mode not in ("analytic", "finite_difference"):
            raise ValueError(f"unknown derivative mode {mode!r}")
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.derivative_mode = mode
        return clone

    def _guarded(self, fn, *args):
        try:
            return fn(*args)
        except (ZeroDivisionError, OverflowError, ValueError) as exc:
            if isinstance(exc, DomainError):
                raise
            raise DomainError(f"{self.name}: evaluation failed at {args[0]}: {exc}") from exc

    def __repr__(self):
        return f"<{type(self).__name__} {self.name} kind={self.kind} dim={self.dim}>"


class SymbolicField(FieldSystem):
    """Field defined by a symbolic template plus numeric parameter values."""

    def __init__(self, template, values, name, params=None, derivative_mode="analytic", spec=None):
        self.template = template
        self.kind = template.kind
        self.dim = template.dim
        self.values = tuple(float(v) for v in values)
        if len(self.values) != len(template.params):
            raise ValueError("parameter value count does not match template")
        self.name = name
        self.params = dict(params or {})
        self.derivative_mode = derivative_mode
        self.spec = spec

    def _value(self, x, s):
        return self.template.evaluator(0)(x, s, self.values)

    def _raw(self, x, s):
        if self.template.raw is None:
            raise DerivativeOrderError(f"{self.name}: no raw field components")
        return self.template.evaluator(0, "raw")(x, s, self.values)

    def _analytic(self, x, s, order):
        ev = self.template.evaluator
        tensors = [ev(j)(x, s, self.values) for j in range(order + 1)]
        tensors += [None] * (4 - len(tensors))
        return DerivativeTensors(*tensors)


class CallableField(FieldSystem):
    """Wrap a Python callable; derivatives always by finite differences.

    For ``flow_toroidal`` the callable must return the raw field
    ``(B_R, B_Z, B_phi)`` at ``((R, Z), phi)``.
    """

    derivative_mode = "finite_difference"

    def __init__(self, kind, dim, func, name="callable", params=None):
        if kind not in KINDS:
            raise ValueError(f"unknown kind {kind!r}")
        if kind == "flow_toroidal" and dim != 2:
            raise ValueError("toroidal systems have two section coordinates")
        self.kind, self.dim, self.func, self.name = kind, dim, func, name
        self.params = dict(params or {})

    def _raw(self, x, s):
        if self.kind != "flow_toroidal":
            return super()._raw(x, s)
        return np.asarray(self.func(x, s), dtype=float)

    def _value(self, x, s):
        if self.kind == "flow_toroidal":
            return reduce_raw(x, self._raw(x, s))
        return np.asarray(self.func(x, s), dtype=float)

    def with_mode(self, mode):
        if mode != "finite_difference":
            raise DerivativeOrderError(f"{self.name}: callable fields only support finite differences")
        return self


def reduce_raw(x, raw):
    """Reduced toroidal field ``R * (B_R, B_Z) / B_phi``."""
    if raw[2] == 0.0:
        raise DomainError(f"B_phi = 0 at {x}: field tangent to the section")
    return x[0] * np.array([raw[0], raw[1]]) / raw[2]


class _NumericSum(FieldSystem):
    """``base + k * direction`` for systems without a shared symbolic form."""

    def __init__(self, base, direction, k):
        self.base, self.direction, self.k = base, direction, float(k)
        self.kind, self.dim = base.kind, base.dim
        self.name = f"{base.name}+{k:g}*{direction.name}"
        self.params = dict(base.params)
        analytic = base.derivative_mode == direction.derivative_mode == "analytic"
        self.derivative_mode = "analytic" if analytic and self.kind != "flow_toroidal" else "finite_difference"

    def _raw(self, x, s):
        return self.base._raw(x, s) + self.k * self.direction._raw(x, s)

    def _value(self, x, s):
        if self.kind == "flow_toroidal":
            return reduce_raw(x, self._raw(x, s))
        return self.base._value(x, s) + self.k * self.direction._value(x, s)

    def _analytic(self, x, s, order):
        a = self.base._analytic(x, s, order)
        b = self.direction._analytic(x, s, order)
        parts = [None if u is None else u + self.k * v for u, v in zip(
            (a.value, a.grad, a.hess, a.third), (b.value, b.grad, b.hess, b.third))]
        return DerivativeTensors(*parts)


class _NumericReducedVariation(FieldSystem):
    """First-order variation of the reduced toroidal field (finite-difference derivatives)."""

    derivative_mode = "finite_difference"

    def __init__(self, base, direction):
        self.base, self.direction = base, direction
        self.kind, self.dim = "flow_toroidal", 2
        self.name = f"delta[{base.name};{direction.name}]"

    def _value(self, x, s):
        return _quotient_variation(x, self.base._raw(x, s), self.direction._raw(x, s))


def _quotient_variation(x, raw, draw):
    if raw[2] == 0.0:
        raise DomainError(f"B_phi = 0 at {x}: reduced field undefined")
    bp, dbp = np.array(raw[:2]), np.array(draw[:2])
    return x[0] * dbp / raw[2] - x[0] * bp * draw[2] / raw[2] ** 2


# ---------------------------------------------------------------------------
# template algebra


def _reduce_exprs(raw):
    return (R * raw[0] / raw[2], R * raw[1] / raw[2])


@functools.lru_cache(maxsize=None)
def _sum_template(base_t, dir_t):
    k = sp.Dummy("k")
    params = base_t.params + dir_t.params + (k,)
    if base_t.kind == "flow_toroidal":
        raw = tuple(a + k * b for a, b in zip(base_t.raw, dir_t.raw))
        return _Template(base_t.kind, base_t.coords, base_t.indep, params, _reduce_exprs(raw), raw,
                         label=f"{base_t.label}+k*{dir_t.label}")
    exprs = tuple(a + k * b for a, b in zip(base_t.exprs, dir_t.exprs))
    return _Template(base_t.kind, base_t.coords, base_t.indep, params, exprs,
                     label=f"{base_t.label}+k*{dir_t.label}")


@functools.lru_cache(maxsize=None)
def _variation_template(base_t, dir_t):
    (b_r, b_z, b_phi), (d_r, d_z, d_phi) = base_t.raw, dir_t.raw
    exprs = (
        R * d_r / b_phi - R * b_r * d_phi / b_phi ** 2,
        R * d_z / b_phi - R * b_z * d_phi / b_phi ** 2,
    )
    return _Template("flow_toroidal", base_t.coords, base_t.indep, base_t.params + dir_t.params,
                     exprs, label=f"delta[{base_t.label};{dir_t.label}]")


@functools.lru_cache(maxsize=None)
def _param_derivative_template(base_t, index):
    p = base_t.params[index]
    if base_t.kind == "flow_toroidal":
        raw = tuple(sp.diff(e, p) for e in base_t.raw)
        return _Template(base_t.kind, base_t.coords, base_t.indep, base_t.params, (0, 0), raw,
                         label=f"d{base_t.label}/d{p}", param_names=base_t.param_names)
    exprs = tuple(sp.diff(e, p) for e in base_t.exprs)
    return _Template(base_t.kind, base_t.coords, base_t.indep, base_t.params, exprs,
                     label=f"d{base_t.label}/d{p}", param_names=base_t.param_names)


def _check_compatible(system, direction):
    if direction.kind != system.kind or direction.dim != system.dim:
        raise ValueError(
            f"perturbation {direction.name} ({direction.kind}, dim {direction.dim}) does not match "
            f"system {system.name} ({system.kind}, dim {system.dim})")


def perturbed_system(system, direction, k):
    """The system ``B + k * dB`` (or ``P + k * dP`` for maps)."""
    _check_compatible(system, direction)
    if isinstance(system, SymbolicField) and isinstance(direction, SymbolicField):
        tpl = _sum_template(system.template, direction.template)
        values = system.values + direction.values + (float(k),)
        mode = system.derivative_mode if system.derivative_mode == direction.derivative_mode \
            else "finite_difference"
        return SymbolicField(tpl, values, f"{system.name}+{k:g}*{direction.name}",
                             params=dict(system.params), derivative_mode=mode)
    return _NumericSum(system, direction, k)


def reduced_variation(system, direction):
    """Field system whose value is ``delta(R * B_pol / B_phi)`` for a toroidal pair.

    The first-order variation follows the quotient rule
    ``R dB_pol / B_phi - R B_pol dB_phi / B_phi**2``.  Its ``grad`` is the
    partial variation of ``A``.
    """
    if system.kind != "flow_toroidal":
        raise ValueError("reduced_variation is only defined for toroidal systems")
    _check_compatible(system, direction)
    if (isinstance(system, SymbolicField) and isinstance(direction, SymbolicField)
            and system.derivative_mode == direction.derivative_mode == "analytic"):
        tpl = _variation_template(system.template, direction.template)
        return SymbolicField(tpl, system.values + direction.values,
                             f"delta[{system.name};{direction.name}]")
    return _NumericReducedVariation(system, direction)


def section_direction(system, direction):
    """Direction field acting on the integrated phase-space coordinates.

    Flows and maps use ``direction`` itself; toroidal systems use the
    reduced-field variation.
    """
    if direction is None:
        return None
    if system.kind == "flow_toroidal":
        return reduced_variation(system, direction)
    _check_compatible(system, direction)
    return direction


@dataclass(frozen=True)
class Perturbation:
    """A direction field ``dB`` (``dP`` for maps) with a scale ``k``."""

    direction: FieldSystem
    scale: float = 1.0

    def applied_to(self, system):
        return perturbed_system(system, self.direction, self.scale)

    def scaled(self, k):
        return Perturbation(self.direction, float(k))


def as_direction(pert):
    """Split a ``Perturbation`` or bare direction into ``(direction, scale)``."""
    if pert is None:
        return None, 0.0
    if isinstance(pert, Perturbation):
        return pert.direction, pert.scale
    return pert, 1.0


# ---------------------------------------------------------------------------
# module-level operations


def eval_field(system, p, s=0.0):
    """Field vector (reduced field for toroidal systems) at ``p``."""
    return system(p, s)


def eval_derivatives(system, p, order=1, s=0.0):
    """Derivative tensors of ``system`` at ``p`` up to ``order``."""
    return system.derivatives(p, s, order)


def delta_reduced_field(system, pert, p, phi=0.0):
    """``delta(R * B_pol / B_phi)`` at ``(p, phi)`` for a toroidal system.

    ``pert`` may be a direction field or a :class:`Perturbation`; the scale
    multiplies the result.
    """
    direction, scale = as_direction(pert)
    if system.kind != "flow_toroidal":
        raise ValueError("delta_reduced_field requires a flow_toroidal system")
    p = system.check_point(p)
    raw = system.raw(p, phi)
    if raw[2] == 0.0:
        raise DomainError(f"B_phi = 0 at {p}: reduced system undefined")
    return scale * _quotient_variation(p, raw, direction.raw(p, phi))


# ---------------------------------------------------------------------------
# catalog


def _dummies(names):
    return tuple(sp.Dummy(n, real=True) for n in names)


@dataclass(frozen=True)
class CatalogEntry:
    id: str
    role: str  # "system" or "perturbation"
    kind: str
    dim: int | None
    defaults: Mapping[str, float]
    description: str
    builder: Callable
    structural: tuple = ()


CATALOG: dict[str, CatalogEntry] = {}


def _register(id, role, kind, dim, defaults, description, structural=()):
    def deco(builder):
        CATALOG[id] = CatalogEntry(id, role, kind, dim, dict(defaults), description, builder,
                                   tuple(structural))
        return builder

    return deco


def _resolve_params(entry, params):
    params = dict(params or {})
    unknown = sorted(set(params) - set(entry.defaults))
    if unknown:
        raise ValueError(f"{entry.id}: unknown parameter(s) {', '.join(unknown)}")
    merged = {**entry.defaults, **params}
    for key, val in merged.items():
        if key in entry.structural:
            if isinstance(val, (list, tuple)):
                continue
            if float(val) != int(val):
                raise ValueError(f"{entry.id}: parameter {key} must be an integer, got {val}")
            merged[key] = int(val)
        elif not isinstance(val, (list, tuple, str)):
            if not math.isfinite(float(val)):
                raise ValueError(f"{entry.id}: parameter {key} must be finite, got {val}")
            merged[key] = float(val)
    return merged


def _symbolic(kind, dim, names, values, exprs_fn, name, spec, raw=False):
    coords, indep = coordinate_symbols(kind, dim)
    syms = _dummies(names)
    out = exprs_fn(coords, indep, dict(zip(names, syms)))
    if raw:
        tpl = _Template(kind, coords, indep, syms, _reduce_exprs(out), out, label=name,
                        param_names=names)
    else:
        tpl = _Template(kind, coords, indep, syms, out, label=name, param_names=names)
    return tpl, SymbolicField(tpl, [values[n] for n in names], name, params=values, spec=spec)


_TEMPLATE_CACHE: dict = {}


def _cached_field(key, kind, dim, names, params, exprs_fn, name, spec, raw=False):
    """Build the template once per structural key; bind fresh parameter values."""
    tpl = _TEMPLATE_CACHE.get(key)
    if tpl is None:
        tpl, field = _symbolic(kind, dim, names, params, exprs_fn, name, spec, raw)
        _TEMPLATE_CACHE[key] = tpl
        return field
    return SymbolicField(tpl, [params[n] for n in names], name, params=params, spec=spec)


@_register("abc", "system", "flow_autonomous", 3, {"A": 1.0, "B": 1.0, "C": 1.0},
           "Arnold-Beltrami-Childress flow (divergence-free, 3-D).")
def _abc(params, spec):
    def exprs(x, t, p):
        A, B, C = p["A"], p["B"], p["C"]
        return (A * sp.sin(x[2]) + C * sp.cos(x[1]),
                B * sp.sin(x[0]) + A * sp.cos(x[2]),
                C * sp.sin(x[1]) + B * sp.cos(x[0]))

    return _cached_field("abc", "flow_autonomous", 3, ("A", "B", "C"), params, exprs, "abc", spec)


@_register("planar_rotation", "system", "flow_autonomous", 2, {"omega": 1.0},
           "Rigid rotation dx/dt = (-omega*y, omega*x).")
def _planar_rotation(params, spec):
    def exprs(x, t, p):
        return (-p["omega"] * x[1], p["omega"] * x[0])

    return _cached_field("planar_rotation", "flow_autonomous", 2, ("omega",), params, exprs,
                         "planar_rotation", spec)


@_register("hopf", "system", "flow_autonomous", 2, {"mu": 0.5, "omega": 1.0},
           "Hopf normal form; stable limit cycle of radius sqrt(mu), multiplier exp(-4*pi*mu/omega).")
def _hopf(params, spec):
    def exprs(x, t, p):
        r2 = x[0] ** 2 + x[1] ** 2
        return (p["mu"] * x[0] - p["omega"] * x[1] - x[0] * r2,
                p["omega"] * x[0] + p["mu"] * x[1] - x[1] * r2)

    return _cached_field("hopf", "flow_autonomous", 2, ("mu", "omega"), params, exprs, "hopf", spec)


@_register("standard_map", "system", "map", 2, {"K": 1.0},
           "Chirikov standard map p' = p + K sin x, x' = x + p' on state (x, p).")
def _standard_map(params, spec):
    def exprs(x, n, p):
        kick = x[1] + p["K"] * sp.sin(x[0])
        return (x[0] + kick, kick)

    return _cached_field("standard_map", "map", 2, ("K",), params, exprs, "standard_map", spec)


@_register("henon", "system", "map", 2, {"a": 1.4, "b": 0.3},
           "Henon map x' = 1 - a x^2 + y, y' = b x.")
def _henon(params, spec):
    def exprs(x, n, p):
        return (1 - p["a"] * x[0] ** 2 + x[1], p["b"] * x[0])

    return _cached_field("henon", "map", 2, ("a", "b"), params, exprs, "henon", spec)


def _model_toroidal_raw(R_, Z_, ph, p, m, n):
    """Cylindrical (B_R, B_Z, B_phi) of the model field plus an (m, n) island mode."""
    dR = R_ - p["R0"]
    r2 = dR ** 2 + Z_ ** 2
    q = p["q0"] + p["q2"] * r2
    base = (-p["B0"] * Z_ / (q * R_), p["B0"] * dR / (q * R_), p["B0"] * p["R0"] / R_)
    mode = _resonant_mode_raw(R_, Z_, ph, p["R0"], p["island_amp"], m, n, p["phase"], 0)
    return tuple(b + d for b, d in zip(base, mode))


def _resonant_mode_raw(R_, Z_, ph, R0, amp, m, n, phase, toroidal_amp):
    """Divergence-free field grad(psi) x grad(phi) with psi = amp r^m cos(m theta - n phi - phase),
    plus an axisymmetric toroidal component toroidal_amp / R."""
    re, im = sp.expand((R_ - R0 + sp.I * Z_) ** m).as_real_imag()
    psi = amp * (re * sp.cos(n * ph + phase) + im * sp.sin(n * ph + phase))
    return (-sp.diff(psi, Z_) / R_, sp.diff(psi, R_) / R_, toroidal_amp / R_)


_TOROIDAL_DEFAULTS = {"R0": 1.0, "B0": 1.0, "q0": 1.2, "q2": 8.0, "island_amp": 2e-3,
                      "m": 2, "n": 1, "phase": 0.0}
_MODE_DEFAULTS = {"R0": 1.0, "amp": 2e-3, "m": 2, "n": 1, "phase": 0.5 * math.pi,
                  "toroidal_amp": 0.02}


def _cylindrical_to_cartesian(raw_fn):
    """Turn a cylindrical raw-field builder into Cartesian components on (x, y, z)."""

    def exprs(x, t, p):
        rr = sp.sqrt(x[0] ** 2 + x[1] ** 2)
        ph = sp.atan2(x[1], x[0])
        b_r, b_z, b_phi = (e.subs({R: rr, Z: x[2], PHI: ph}, simultaneous=True)
                           for e in raw_fn(R, Z, PHI, p))
        c, s = x[0] / rr, x[1] / rr
        return (b_r * c - b_phi * s, b_r * s + b_phi * c, b_z)

    return exprs


_TOROIDAL_NAMES = ("R0", "B0", "q0", "q2", "island_amp", "phase")
_MODE_NAMES = ("R0", "amp", "phase", "toroidal_amp")


@_register("model_toroidal", "system", "flow_toroidal", 2, _TOROIDAL_DEFAULTS,
           "Circular-surface model field B0 R0/R e_phi + B0 r/(q R) e_theta, q = q0 + q2 r^2, "
           "with an (m, n) resonant island mode of amplitude island_amp.",
           structural=("m", "n"))
def _model_toroidal(params, spec):
    m, n = params["m"], params["n"]

    def raw(R_, Z_, ph, p):
        return _model_toroidal_raw(R_, Z_, ph, p, m, n)

    return _cached_field(("model_toroidal", m, n), "flow_toroidal", 2, _TOROIDAL_NAMES,
                         params, lambda c, i, p: raw(c[0], c[1], i, p), "model_toroidal", spec,
                         raw=True)


@_register("model_toroidal_3d", "system", "flow_autonomous", 3, _TOROIDAL_DEFAULTS,
           "The model_toroidal field as a 3-D autonomous flow in Cartesian (x, y, z).",
           structural=("m", "n"))
def _model_toroidal_3d(params, spec):
    m, n = params["m"], params["n"]
    exprs = _cylindrical_to_cartesian(lambda R_, Z_, ph, p: _model_toroidal_raw(R_, Z_, ph, p, m, n))
    return _cached_field(("model_toroidal_3d", m, n), "flow_autonomous", 3, _TOROIDAL_NAMES,
                         params, exprs, "model_toroidal_3d", spec)


@_register("resonant_mode", "perturbation", "flow_toroidal", 2, _MODE_DEFAULTS,
           "Resonant (m, n) island mode grad(psi) x grad(phi), psi = amp r^m cos(m theta - n phi - phase), "
           "plus toroidal component toroidal_amp / R.", structural=("m", "n"))
def _resonant_mode(params, spec):
    m, n = params["m"], params["n"]

    def raw(c, i, p):
        return _resonant_mode_raw(c[0], c[1], i, p["R0"], p["amp"], m, n, p["phase"], p["toroidal_amp"])

    return _cached_field(("resonant_mode", m, n), "flow_toroidal", 2, _MODE_NAMES, params, raw,
                         "resonant_mode", spec, raw=True)


@_register("resonant_mode_3d", "perturbation", "flow_autonomous", 3, _MODE_DEFAULTS,
           "The resonant_mode perturbation in Cartesian (x, y, z).", structural=("m", "n"))
def _resonant_mode_3d(params, spec):
    m, n = params["m"], params["n"]
    exprs = _cylindrical_to_cartesian(
        lambda R_, Z_, ph, p: _resonant_mode_raw(R_, Z_, ph, p["R0"], p["amp"], m, n, p["phase"],
                                                 p["toroidal_amp"]))
    return _cached_field(("resonant_mode_3d", m, n), "flow_autonomous", 3, _MODE_NAMES, params,
                         exprs, "resonant_mode_3d", spec)


@_register("vertical_field", "perturbation", "flow_toroidal", 2, {"amp": 1e-3},
           "Uniform vertical field B_Z = amp (axisymmetric; shifts the magnetic axis radially).")
def _vertical_field(params, spec):
    return _cached_field("vertical_field", "flow_toroidal", 2, ("amp",), params,
                         lambda c, i, p: (sp.Integer(0), p["amp"], sp.Integer(0)),
                         "vertical_field", spec, raw=True)


@_register("vertical_field_3d", "perturbation", "flow_autonomous", 3, {"amp": 1e-3},
           "Uniform vertical field B_z = amp in Cartesian (x, y, z).")
def _vertical_field_3d(params, spec):
    return _cached_field("vertical_field_3d", "flow_autonomous", 3, ("amp",), params,
                         lambda c, i, p: (sp.Integer(0), sp.Integer(0), p["amp"]),
                         "vertical_field_3d", spec)


@_register("standard_map_kick", "perturbation", "map", 2, {"eps": 1.0},
           "Constant momentum kick: p' = p + K sin x + eps, hence dP = (eps, eps).")
def _standard_map_kick(params, spec):
    return _cached_field("standard_map_kick", "map", 2, ("eps",), params,
                         lambda c, i, p: (p["eps"], p["eps"]), "standard_map_kick", spec)


@_register("constant", "perturbation", None, None, {"vector": (1.0,)},
           "Spatially uniform direction field with components `vector` (matches the base system).")
def _constant(params, spec, base):
    vec = [float(v) for v in params["vector"]]
    kind, dim = base.kind, base.dim
    expected = 3 if kind == "flow_toroidal" else dim
    if len(vec) != expected:
        raise ValueError(f"constant: vector needs {expected} components for {base.name}")
    names = tuple(f"c{i}" for i in range(len(vec)))
    values = dict(zip(names, vec))
    return _cached_field(("constant", kind, dim), kind, dim, names, values,
                         lambda c, i, p: tuple(p[n] for n in names), "constant",
                         spec, raw=(kind == "flow_toroidal"))


@_register("param_derivative", "perturbation", None, None, {"param": ""},
           "Parameter-derivative direction dB = dB/d(param) of the base system.")
def _param_derivative(params, spec, base):
    name = params["param"]
    if not isinstance(base, SymbolicField):
        raise ValueError("param_derivative requires a symbolic catalog system")
    names = list(base.template.param_names)
    if name not in names:
        raise ValueError(f"param_derivative: {base.name} has no continuous parameter {name!r}")
    index = names.index(name)
    tpl = _param_derivative_template(base.template, index)
    return SymbolicField(tpl, base.values, f"d{base.name}/d{name}", params=dict(base.params),
                         spec=spec)


@_register("expression", "perturbation", None, None, {"components": ()},
           "Direction field from sympy expressions in x0..x{N-1} (R, Z, phi for toroidal; "
           "toroidal components are B_R, B_Z, B_phi).")
def _expression(params, spec, base):
    comps = list(params["components"])
    kind, dim = base.kind, base.dim
    coords, indep = coordinate_symbols(kind, dim)
    expected = 3 if kind == "flow_toroidal" else dim
    if len(comps) != expected:
        raise ValueError(f"expression: need {expected} components for {base.name}")
    local = {str(c): c for c in coords}
    local[str(indep)] = indep
    exprs = tuple(sp.sympify(c, locals=local) for c in comps)
    free = set().union(*(e.free_symbols for e in exprs)) - set(coords) - {indep}
    if free:
        raise ValueError(f"expression: unknown symbols {sorted(map(str, free))}")
    key = ("expression", kind, dim, tuple(comps))
    return _cached_field(key, kind, dim, (), {}, lambda c, i, p: exprs, "expression", spec,
                         raw=(kind == "flow_toroidal"))


def make_system(id, params=None):
    """Build a catalog system by identifier."""
    entry = _entry(id, "system")
    merged = _resolve_params(entry, params)
    return entry.builder(merged, {"id": id, "params": merged})


def make_perturbation(id, params=None, base=None):
    """Build a catalog perturbation direction field, matched to ``base`` when required."""
    entry = _entry(id, "perturbation")
    merged = _resolve_params(entry, params)
    spec = {"id": id, "params": merged}
    if entry.kind is None:
        if base is None:
            raise ValueError(f"perturbation {id!r} needs the base system")
        return entry.builder(merged, spec, base)
    field = entry.builder(merged, spec)
    if base is not None:
        _check_compatible(base, field)
    return field


def _entry(id, role):
    entry = CATALOG.get(id)
    if entry is None or entry.role != role:
        known = sorted(k for k, e in CATALOG.items() if e.role == role)
        raise ValueError(f"unknown {role} {id!r}; known: {', '.join(known)}")
    return entry


def list_fields():
    """Catalog summary rows: id, role, kind, dim, defaults, description."""
    return [
        {"id": e.id, "role": e.role, "kind": e.kind or "same as base", "dim": e.dim,
         "defaults": {k: (list(v) if isinstance(v, tuple) else v) for k, v in e.defaults.items()},
         "description": e.description}
        for e in sorted(CATALOG.values(), key=lambda e: (e.role != "system", e.id))
    ]


def rotational_transform(r, R0=1.0, q0=1.2, q2=8.0):
    """Rotational transform of the unperturbed model_toroidal field on the circle of radius r.

    Along a surface ``dtheta/dphi = (1 + (r/R0) cos theta) / q(r)``, which
    integrates to ``iota = sqrt(1 - (r/R0)**2) / q(r)``.
    """
    return math.sqrt(1.0 - (r / R0) ** 2) / (q0 + q2 * r * r)


def resonant_radius(iota, R0=1.0, q0=1.2, q2=8.0):
    """Minor radius where the unperturbed model field has rotational transform ``iota``."""
    from scipy.optimize import brentq

    return brentq(lambda r: rotational_transform(r, R0, q0, q2) - iota, 1e-9, 0.999 * R0)
