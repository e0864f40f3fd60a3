"""Command-line front end.

Every subcommand reads one JSON config (``--config``), validates it against a
strict schema and writes plot-ready CSV/JSON files to ``--out``.  Outputs are
deterministic: floats are written with 17 significant digits, JSON keys are
sorted, and each file carries the SHA-256 of the run manifest (config echo,
library versions, tolerances).

Exit codes: 0 ok, 1 runtime failure, 2 config error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import platform
import sys
from pathlib import Path
from typing import Any, Literal, Optional, Union

import numpy as np
import pydantic
import scipy
import sympy
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import __version__
from . import fields as F
from .cycles import (cycle_to_dict, find_cycle, poincare_section, ribbon_columns, ribbon_rows,
                     rotation_number)
from .errors import ConfigError, DegenerateCycleError, OrbitShiftError
from .oracle import (K_LADDER, _plain, cycle_shift_study, eigenvalue_drift_study,
                     jacobian_fd_check, validate_k_list)
from .propagate import (DEFAULT_METHOD, DEFAULT_TOL, bundle_rows, column_names,
                        integrate_variations, iterate_map)
from .shifts import cycle_shift, jacobian_total_derivative
from .suite import run_suite

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_VERIFY = 0, 1, 2, 3


# ---------------------------------------------------------------------------
# schema


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", allow_inf_nan=False)


class SystemBlock(_Strict):
    id: str
    params: dict[str, Any] = Field(default_factory=dict)


class PerturbationBlock(_Strict):
    id: str
    params: dict[str, Any] = Field(default_factory=dict)
    scale: float = 1.0
    k: Optional[float] = None
    k_list: Optional[list[float]] = None

    @field_validator("k_list")
    @classmethod
    def _ladder(cls, v):
        if v is not None:
            validate_k_list(v)
        return v


class IntegrationBlock(_Strict):
    rtol: float = Field(DEFAULT_TOL[0], gt=0)
    atol: float = Field(DEFAULT_TOL[1], gt=0)
    method: Literal["RK45", "DOP853", "RK23"] = DEFAULT_METHOD


class TraceBlock(_Strict):
    x0: list[float]
    span: Optional[tuple[float, float]] = None
    n: Optional[int] = Field(None, ge=0)
    samples: Union[int, list[float]] = 101
    order: int = Field(0, ge=0, le=3)
    with_jac: bool = True


class PoincareBlock(_Strict):
    seeds: list[list[float]]
    turns: int = Field(ge=1)
    section: float = 0.0
    center: Optional[list[float]] = None


class CycleBlock(_Strict):
    guess: list[float]
    m: int = Field(1, ge=1)
    s0: float = 0.0
    period_guess: Optional[float] = Field(None, gt=0)
    newton_tol: float = Field(1e-10, gt=0)
    max_iter: int = Field(50, ge=1)
    n_sections: int = Field(8, ge=1)


class ShiftBlock(_Strict):
    verify: bool = False


class JacobianShiftBlock(_Strict):
    method: Literal["evolve", "direct"] = "evolve"
    verify: bool = False
    k_fd: float = Field(1e-4, gt=0)


class VerifyBlock(_Strict):
    criteria: Optional[list[int]] = None

    @field_validator("criteria")
    @classmethod
    def _known(cls, v):
        if v is not None and not set(v) <= set(range(1, 9)):
            raise ValueError("criteria must be drawn from 1..8")
        return v


class OutputBlock(_Strict):
    csv: bool = True
    json_: bool = Field(True, alias="json")


class RunConfig(_Strict):
    system: Optional[SystemBlock] = None
    perturbation: Optional[PerturbationBlock] = None
    integration: IntegrationBlock = Field(default_factory=IntegrationBlock)
    trace: Optional[TraceBlock] = None
    poincare: Optional[PoincareBlock] = None
    cycle: Optional[CycleBlock] = None
    shift: Optional[ShiftBlock] = None
    jacobian_shift: Optional[JacobianShiftBlock] = None
    verify: Optional[VerifyBlock] = None
    output: OutputBlock = Field(default_factory=OutputBlock)


REQUIRED = {
    "trace": ("system", "trace"),
    "poincare": ("system", "poincare"),
    "find-cycle": ("system", "cycle"),
    "shift": ("system", "perturbation", "cycle"),
    "jacobian-shift": ("system", "perturbation", "cycle"),
    "verify": (),
    "list-fields": (),
}


def _config_error(exc):
    if isinstance(exc, ValidationError):
        details = [{"loc": ".".join(str(p) for p in e["loc"]), "msg": e["msg"], "type": e["type"]}
                   for e in exc.errors()]
        keys = [d["loc"] for d in details if d["type"] == "extra_forbidden"]
        msg = f"unknown key(s): {', '.join(keys)}" if keys else "invalid configuration"
    else:
        details, msg = [], str(exc)
    return {"error": {"type": "ConfigError", "message": msg, "details": details}}


def load_config(path, command, tol_rel=None, tol_abs=None):
    """Parse and validate a config file for ``command``; raises ConfigError or ValidationError."""
    if path is None:
        raw = {}
    else:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    cfg = RunConfig.model_validate(raw)
    missing = [b for b in REQUIRED[command] if getattr(cfg, b.replace("-", "_")) is None]
    if missing:
        raise ConfigError(f"{command} needs config block(s): {', '.join(missing)}")
    if tol_rel is not None or tol_abs is not None:
        override = cfg.integration.model_copy(update={
            k: v for k, v in (("rtol", tol_rel), ("atol", tol_abs)) if v is not None})
        IntegrationBlock.model_validate(override.model_dump())
        cfg = cfg.model_copy(update={"integration": override})
    return cfg


# ---------------------------------------------------------------------------
# output helpers


def manifest(cfg, command):
    return {
        "command": command,
        "config": cfg.model_dump(mode="json", by_alias=True, exclude_none=True),
        "tolerances": [cfg.integration.rtol, cfg.integration.atol],
        "method": cfg.integration.method,
        "versions": {"orbitshift": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__, "sympy": sympy.__version__,
                     "pydantic": pydantic.VERSION, "python": platform.python_version()},
    }


def _dumps(obj):
    return json.dumps(_plain(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def manifest_hash(man):
    return hashlib.sha256(_dumps(man).encode()).hexdigest()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


class Writer:
    """Writes outputs into one directory, stamping every file with the manifest hash."""

    def __init__(self, out, cfg, command):
        self.out = Path(out)
        self.cfg = cfg
        self.manifest = manifest(cfg, command)
        self.hash = manifest_hash(self.manifest)
        self.written = []

    def _path(self, name):
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out / name

    def json(self, name, payload, force=False):
        if not (self.cfg.output.json_ or force):
            return
        self._path(name).write_text(_dumps({**payload, "manifest_sha256": self.hash}))
        self.written.append(name)

    def csv(self, name, columns, rows):
        if not self.cfg.output.csv:
            return
        buf = io.StringIO()
        buf.write(f"# manifest_sha256={self.hash}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
        self._path(name).write_text(buf.getvalue())
        self.written.append(name)

    def finish(self):
        self.json("manifest.json", {"manifest": self.manifest, "files": sorted(self.written)},
                  force=True)


def _build(cfg):
    try:
        system = F.make_system(cfg.system.id, cfg.system.params)
        pert = None
        if cfg.perturbation is not None:
            direction = F.make_perturbation(cfg.perturbation.id, cfg.perturbation.params, system)
            pert = F.Perturbation(direction, cfg.perturbation.scale)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return system, pert


def _tol(cfg):
    return (cfg.integration.rtol, cfg.integration.atol)


def _cycle(cfg, system):
    c = cfg.cycle
    return find_cycle(system, np.asarray(c.guess, float), c.m, s0=c.s0,
                      period_guess=c.period_guess, newton_tol=c.newton_tol, max_iter=c.max_iter,
                      n_sections=c.n_sections, tol=_tol(cfg), method=cfg.integration.method)


def _require_nondegenerate(cycle):
    if cycle.classification == "degenerate":
        raise DegenerateCycleError(
            f"cycle at {cycle.point.tolist()} has a unit multiplier "
            f"(eigenvalues {[[v.real, v.imag] for v in cycle.eigvals[0]]})")


# ---------------------------------------------------------------------------
# commands


def cmd_trace(cfg, w, workers=None):
    system, pert = _build(cfg)
    t = cfg.trace
    if len(t.x0) != system.dim:
        raise ConfigError(f"trace.x0 must have {system.dim} components")
    if t.order and pert is None:
        raise ConfigError("trace.order >= 1 needs a perturbation block")
    direction = None if pert is None else pert.direction
    if system.kind == "map":
        if t.n is None:
            raise ConfigError("map traces need trace.n")
        bundle = iterate_map(system, t.x0, t.n, direction, t.order, t.with_jac)
    else:
        if t.span is None:
            raise ConfigError("flow traces need trace.span")
        bundle = integrate_variations(system, t.x0, t.span, direction, t.order, _tol(cfg),
                                      t.samples, cfg.integration.method, t.with_jac)
    w.csv("trace.csv", column_names(system, t.order, t.with_jac), bundle_rows(bundle))
    return EXIT_OK


def cmd_poincare(cfg, w, workers=None):
    system, _ = _build(cfg)
    p = cfg.poincare
    if any(len(s) != system.dim for s in p.seeds):
        raise ConfigError(f"poincare seeds must have {system.dim} components")
    sections = poincare_section(system, p.seeds, p.turns, p.section, _tol(cfg),
                                cfg.integration.method)
    coords = ["R", "Z"] if system.kind == "flow_toroidal" else [f"x{i}" for i in range(system.dim)]
    rows, summary = [], []
    center = p.center
    if center is None and system.kind == "flow_toroidal":
        center = [float(system.params.get("R0", 1.0)), 0.0]
    for i, sec in enumerate(sections):
        for j, x in enumerate(sec.points):
            rows.append([i, j + 1, *x.tolist(), sec.flag])
        entry = {"seed": i, "start": sec.seed, "flag": sec.flag}
        if center is not None and sec.flag == "ok":
            entry["rotation_number"] = rotation_number(system, sec.seed, p.turns, center,
                                                       p.section, _tol(cfg),
                                                       cfg.integration.method)
        summary.append(entry)
    w.csv("poincare.csv", ["seed", "turn", *coords, "flag"], rows)
    w.json("poincare.json", {"seeds": summary, "turns": p.turns, "section": p.section})
    return EXIT_OK


def cmd_find_cycle(cfg, w, workers=None):
    system, _ = _build(cfg)
    if len(cfg.cycle.guess) != system.dim:
        raise ConfigError(f"cycle.guess must have {system.dim} components")
    cycle = _cycle(cfg, system)
    _require_nondegenerate(cycle)
    w.json("cycle.json", {"cycle": cycle_to_dict(cycle)})
    w.csv("ribbon.csv", ribbon_columns(cycle), ribbon_rows(cycle))
    return EXIT_OK


def cmd_shift(cfg, w, workers=None):
    system, pert = _build(cfg)
    cycle = _cycle(cfg, system)
    _require_nondegenerate(cycle)
    result = cycle_shift(cycle, pert)
    payload = {"cycle": cycle_to_dict(cycle), "form": result.form, "scale": result.scale,
               "sections": [{"s": s, "shift": d, "delta_return": r}
                            for s, d, r in zip(result.sections, result.shifts, result.delta_return)]}
    w.csv("shift.csv", result.columns(), result.rows())
    code = EXIT_OK
    if cfg.shift is not None and cfg.shift.verify:
        if cycle.kind == "flow_autonomous":
            raise ConfigError("shift.verify supports toroidal systems and maps")
        k_list = cfg.perturbation.k_list or list(K_LADDER)
        rep = cycle_shift_study(cycle, pert, k_list, workers=workers)
        payload["verification"] = rep.to_dict()
        w.csv("shift_residuals.csv", ["k", "residual"], rep.csv_rows())
        code = EXIT_OK if rep.passed else EXIT_VERIFY
    w.json("shift.json", payload)
    return code


def cmd_jacobian_shift(cfg, w, workers=None):
    system, pert = _build(cfg)
    cycle = _cycle(cfg, system)
    _require_nondegenerate(cycle)
    opts = cfg.jacobian_shift or JacobianShiftBlock()
    jd = jacobian_total_derivative(cycle, pert, opts.method)
    payload = {"cycle": cycle_to_dict(cycle), "method": opts.method,
               "det_identity_residual": jd.det_identity_residual(),
               "sections": [{"s": s, "djac": d.ravel(), "eigenvalues": v, "eig_derivatives": dv}
                            for s, d, v, dv in zip(jd.sections, jd.djac, jd.eigvals,
                                                   jd.eig_derivatives)]}
    w.csv("jacobian_shift.csv", jd.columns(), jd.rows())
    code = EXIT_OK
    if opts.verify:
        fd = jacobian_fd_check(cycle, pert, opts.k_fd)
        k_list = cfg.perturbation.k_list or list(K_LADDER)
        drift = eigenvalue_drift_study(cycle, pert, k_list, workers=workers)
        ok = fd["max_relative_error"] <= 1e-4 and drift.passed
        payload["verification"] = {"fd_check": fd, "eigenvalue_drift": drift.to_dict(), "pass": ok}
        w.csv("eigen_drift.csv", ["k", "residual"], drift.csv_rows())
        code = EXIT_OK if ok else EXIT_VERIFY
    w.json("jacobian_shift.json", payload)
    return code


def run_verify(cfg, w, workers=None, log=sys.stderr):
    """Run the suite, write ``verify_report.json``; returns ``(exit_code, results)``."""
    numbers = cfg.verify.criteria if cfg.verify is not None else None
    tol = None
    if cfg.integration.rtol != DEFAULT_TOL[0] or cfg.integration.atol != DEFAULT_TOL[1]:
        tol = _tol(cfg)
    results = run_suite(numbers, tol=tol, workers=workers)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"criterion {r.number} ({r.name}): {status} in {r.runtime:.2f} s "
              f"(budget {r.budget:g} s)", file=log)
    passed = all(r.passed for r in results)
    w.json("verify_report.json", {"criteria": [r.to_dict() for r in results], "pass": passed},
           force=True)
    return (EXIT_OK if passed else EXIT_VERIFY), results


def cmd_verify(cfg, w, workers=None):
    return run_verify(cfg, w, workers)[0]


def cmd_list_fields(cfg, w, workers=None):
    sys.stdout.write(_dumps({"fields": F.list_fields()}))
    return EXIT_OK


COMMANDS = {
    "trace": cmd_trace,
    "poincare": cmd_poincare,
    "find-cycle": cmd_find_cycle,
    "shift": cmd_shift,
    "jacobian-shift": cmd_jacobian_shift,
    "verify": cmd_verify,
    "list-fields": cmd_list_fields,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="orbitshift", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--out", default=".", help="output directory (default: .)")
        p.add_argument("--threads", type=int, default=1, help="workers for k ladders")
        p.add_argument("--tol-rel", type=float, help="override integration.rtol")
        p.add_argument("--tol-abs", type=float, help="override integration.atol")
    return parser


def _emit_error(kind, exc, command):
    payload = {"error": {"type": kind, "message": str(exc), "command": command}}
    cond = getattr(exc, "condition", None)
    if cond is not None:
        payload["error"]["condition"] = cond if math.isfinite(cond) else None
    hist = getattr(exc, "history", None)
    if hist:
        payload["error"]["history"] = list(hist)
    sys.stdout.write(_dumps(payload))


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.config is None and REQUIRED[args.command]:
        sys.stdout.write(_dumps(_config_error(ConfigError(f"{args.command} needs --config"))))
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, args.command, args.tol_rel, args.tol_abs)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
    except (ValidationError, ConfigError) as exc:
        sys.stdout.write(_dumps(_config_error(exc)))
        return EXIT_CONFIG
    writer = Writer(args.out, cfg, args.command)
    try:
        code = COMMANDS[args.command](cfg, writer, args.threads)
    except ConfigError as exc:
        sys.stdout.write(_dumps(_config_error(exc)))
        return EXIT_CONFIG
    except (OrbitShiftError, ValueError, ArithmeticError) as exc:
        _emit_error(type(exc).__name__, exc, args.command)
        return EXIT_RUNTIME
    if args.command != "list-fields":
        writer.finish()
    return code


if __name__ == "__main__":
    sys.exit(main())
