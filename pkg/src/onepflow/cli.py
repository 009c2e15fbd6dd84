"""Command line front end: ``onepflow run|steady|sweep|diagnose --config F --out D``.

Exit status: 0 when every hard assertion passes, 2 when one fails, 1 on any
runtime or contract error.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import math
import os
import re
import sys
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import bench
from .diagnostics import (Cylinder, DiagnosticsReport, delta_sweep, eps_convergence_study,
                          facet_measure, holder_seminorm, max_principle_check, provenance,
                          stationary, sup_v_eps, superlevel_measure)
from .errors import OnePFlowError, ParseError
from .grid import write_checkpoint, write_csv
from .model import (Parameters, SamplingPlan, constant_forcing, make_model, time_forcing,
                    validate_exponents, validate_structure)
from .solver import Scenario, SolverConfig, run, solve_steady

SECTIONS = ("params", "coefficients", "forcing", "solver", "diagnostics")

_PARAM_KEYS = {"preset": str, "p": float, "eps": float, "delta": float, "q": float,
               "r": float, "beta0": float, "tau": float, "t_end": float, "n": int, "N": int,
               "resolution": int, "seed": int, "c": float}
_COEFF_KEYS = {"gamma": str, "a1": float, "ap": float, "Gamma0": float, "kappa0": float}
_FORCING_KEYS = {"kind": str, "value": float, "before": float, "after": float,
                 "t_switch": float}
_SOLVER_KEYS = {f.name: f.type for f in fields(SolverConfig)}
_DIAG_KEYS = {"kind": str, "eps_list": "floats", "delta_list": "floats", "alpha": float,
              "pairs": int, "center": "floats", "t0": float, "rho": float, "nu": float,
              "mu": float, "holder_delta": float, "facet_delta": float}
_SCHEMA = {"params": _PARAM_KEYS, "coefficients": _COEFF_KEYS, "forcing": _FORCING_KEYS,
           "solver": _SOLVER_KEYS, "diagnostics": _DIAG_KEYS}

_PRESET_DEFAULTS = {
    "radial-steady": dict(p=2.0, eps=1e-4, delta=0.05, tau=10.0, t_end=1.0, n=2, N=1,
                          resolution=64),
    "bingham-pipe": dict(p=2.0, eps=1e-3, delta=0.05, tau=0.1, t_end=1.0, n=2, N=1,
                         resolution=32),
    "constant": dict(p=2.0, eps=1e-3, delta=0.05, tau=0.1, t_end=1.0, n=2, N=1,
                     resolution=8),
}


@dataclass(frozen=True)
class DiagnosticsPlan:
    kind: str = "eps"
    eps_list: tuple = ()
    delta_list: tuple = (0.2, 0.1, 0.05)
    alpha: float = 0.5
    pairs: int = 10_000
    center: Optional[tuple] = None
    t0: Optional[float] = None
    rho: Optional[float] = None
    nu: float = 0.5
    mu: Optional[float] = None
    holder_delta: Optional[float] = None
    facet_delta: Optional[float] = None
    seed: int = 0


def _line_of(text: str, section: str, key: Optional[str]) -> Optional[int]:
    current = None
    for i, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        m = re.match(r"^\[(.+)\]$", s)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return i
            continue
        if current == section and key is not None and re.match(rf"^{re.escape(key)}\s*[=:]", s):
            return i
    return None


def _convert(raw: str, kind, section, key, text):
    try:
        if kind == "floats":
            return tuple(float(v) for v in raw.replace(",", " ").split())
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ParseError(f"[{section}] {key}: cannot parse {raw!r}",
                         line=_line_of(text, section, key), field=key) from None


def read_config(path) -> dict:
    """Parse the sectioned key-value file into typed dictionaries (unknown keys rejected)."""
    if not os.path.isfile(path):
        raise ParseError(f"config file {path} does not exist")
    with open(path) as fh:
        text = fh.read()
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ParseError(f"malformed config: {exc}", line=getattr(exc, "lineno", None)) from None
    out = {s: {} for s in SECTIONS}
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ParseError(f"unknown section [{section}]", line=_line_of(text, section, None),
                             field=section)
        schema = _SCHEMA[section]
        for key, raw in cp.items(section):
            if key not in schema:
                raise ParseError(f"unknown key {key!r} in [{section}]",
                                 line=_line_of(text, section, key), field=key)
            out[section][key] = _convert(raw, schema[key], section, key, text)
    return out


def _forcing_from(cfg: dict, preset: str, n: int, N: int):
    kind = cfg.get("kind", "constant")
    if kind == "constant":
        default = -float(n) if preset == "radial-steady" else 0.0
        return constant_forcing(cfg.get("value", default), N), True
    if kind == "step":
        missing = [k for k in ("before", "after", "t_switch") if k not in cfg]
        if missing:
            raise ParseError(f"step forcing needs {missing}", field=missing[0])
        fn = bench.step_forcing(cfg["before"], cfg["after"], cfg["t_switch"])
        return time_forcing(fn, N, fn.descriptor), False
    raise ParseError(f"unknown forcing kind {kind!r}", field="kind")


def build_scenario(cfg: dict, seed: int = 0):
    """Turn parsed sections into a validated Scenario."""
    pcfg = dict(cfg["params"])
    preset = pcfg.pop("preset", "radial-steady")
    if preset not in _PRESET_DEFAULTS:
        raise ParseError(f"unknown preset {preset!r}", field="preset")
    c = pcfg.pop("c", 1.0)
    pcfg.pop("seed", None)
    kwargs = dict(_PRESET_DEFAULTS[preset], **pcfg)
    for key in ("q", "r"):
        if key in kwargs and kwargs[key] <= 0:
            raise ParseError(f"{key} must be positive", field=key)
    params = Parameters(**kwargs)
    validate_exponents(params)
    n, N = params.n, params.N
    coeff = cfg["coefficients"]
    model = make_model(n=n, p=params.p, gamma=coeff.get("gamma", "identity-gamma"),
                       a1=coeff.get("a1", 1.0), ap=coeff.get("ap", 1.0),
                       Gamma0=coeff.get("Gamma0", 4.0), kappa0=coeff.get("kappa0"))
    validate_structure(model, params.p, SamplingPlan(seed=seed))
    forcing, autonomous = _forcing_from(cfg["forcing"], preset, n, N)

    if preset == "radial-steady":
        if n != 2 or N != 1:
            raise ParseError("radial-steady needs n = 2 and N = 1", field="n")
        box = ((-2.0, 2.0), (-2.0, 2.0))

        def boundary(X, t):
            return bench.exact_radial(params.p, n, X)[0][:, None]
        u0 = None
    elif preset == "bingham-pipe":
        box = ((-1.0, 1.0),) * n

        def boundary(X, t):
            return np.zeros((np.shape(X)[0], N))
        u0 = None
    else:
        box = ((0.0, 1.0),) * n

        def boundary(X, t):
            return np.full((np.shape(X)[0], N), c)
        u0 = None
    sc = bench.box_scenario(params, model, forcing, boundary, box, u0=u0,
                            descriptor={"preset": preset, "c": c, "forcing": forcing.descriptor},
                            autonomous=autonomous)
    return sc


def parse_config(path, seed: Optional[int] = None):
    """Return ``(Scenario, SolverConfig, DiagnosticsPlan)`` for a config file."""
    cfg = read_config(path)
    seed = cfg["params"].get("seed", 0) if seed is None else seed
    scenario = build_scenario(cfg, seed)
    config = SolverConfig(**cfg["solver"])
    plan = DiagnosticsPlan(**cfg["diagnostics"], seed=seed)
    return scenario, config, plan


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_table(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def _default_cylinder(sc: Scenario, plan: DiagnosticsPlan, t_last: float, steady: bool):
    box = sc.mesh.box
    center = plan.center or tuple(0.5 * (lo + hi) for lo, hi in box)
    half = min(hi - lo for lo, hi in box) / 2
    rho = plan.rho or max(2 * sc.mesh.h, 0.75 * half)
    if steady:
        t0 = 0.0
    else:
        t0 = plan.t0 if plan.t0 is not None else t_last
        rho = min(rho, math.sqrt(max(t0, 0.0))) if plan.rho is None else rho
    return Cylinder(center, t0, rho)


def _standard_report(sc, traj, plan, steady=False) -> DiagnosticsReport:
    rep = DiagnosticsReport(provenance=provenance(sc, command_seed=plan.seed))
    p = sc.params
    rep.extend(max_principle_check(traj, sc))
    rep.add("sup_v_eps", sup_v_eps(traj))
    final = traj.final
    fd = plan.facet_delta or p.delta
    if fd > p.eps:
        rep.add("facet_measure", facet_measure(sc, final, fd), refs=[f"delta={fd!r}"])
    hd = plan.holder_delta or p.delta
    try:
        cyl = _default_cylinder(sc, plan, traj.times[-1], steady)
        if p.eps < hd / 4 and cyl.rho >= 2 * sc.mesh.h:
            rep.add("holder_seminorm", holder_seminorm(traj, hd, cyl, plan.alpha, plan.pairs,
                                                       plan.seed),
                    refs=[f"alpha={plan.alpha!r}", f"pairs={plan.pairs}", f"seed={plan.seed}",
                          f"cylinder={cyl.center!r},{cyl.t0!r},{cyl.rho!r}"])
            mu = plan.mu or 2 * p.delta
            meas, ratio, ordered = superlevel_measure(traj, cyl, mu, plan.nu, p.delta)
            rep.add("superlevel_measure", meas)
            rep.add("superlevel_ratio", ratio, threshold=1.0, passed=0 <= ratio <= 1)
    except OnePFlowError as exc:
        rep.add("cylinder_diagnostics", None, refs=[f"skipped: {exc}"])
    if p.eps * 4 < min(plan.delta_list):
        rows = delta_sweep(traj, plan.delta_list)
        for r in rows:
            rep.add(f"delta_sweep.{r['delta']!r}", r["dist_eps"], threshold=r["bound"],
                    passed=r["pass"])
    return rep


def cmd_run(sc, config, plan, out) -> int:
    ck = os.path.join(out, "checkpoints")
    os.makedirs(ck, exist_ok=True)
    traj = run(sc, config, checkpoint_dir=ck)
    traj.write_log(os.path.join(out, "steps.csv"))
    rep = _standard_report(sc, traj, plan)
    with open(os.path.join(out, "diagnostics.json"), "w") as fh:
        fh.write(rep.to_json())
    return 0 if rep.passed else 2


def cmd_steady(sc, config, plan, out) -> int:
    res = solve_steady(sc, config)
    traj = stationary(sc, res.field)
    traj.records = list(res.records)
    traj.write_log(os.path.join(out, "steps.csv"))
    write_checkpoint(os.path.join(out, "steady.ckpt"), res.field)
    write_csv(os.path.join(out, "steady.csv"), res.field)
    rep = _standard_report(sc, traj, plan, steady=True)
    rep.add("steady_increment", res.increment, threshold=config.steady_tol,
            passed=res.increment <= config.steady_tol)
    if sc.descriptor.get("preset") == "radial-steady" and sc.forcing.descriptor.get(
            "value") == [-float(sc.params.n)]:
        exact = bench.exact_radial(sc.params.p, sc.params.n, sc.mesh.nodes)[0]
        err = np.abs(res.field.values[:, 0] - exact)
        l2 = float(np.sqrt(np.sum(sc.mesh.lumped_mass * err ** 2)))
        _write_table(os.path.join(out, "error_vs_exact.csv"),
                     [{"resolution": sc.params.resolution, "linf_error": float(err.max()),
                       "l2_error": l2}], ["resolution", "linf_error", "l2_error"])
        rep.add("radial.linf_error", float(err.max()))
        fm = facet_measure(sc, res.field, sc.params.delta)
        rep.add("radial.facet_rel_error", abs(fm - math.pi) / math.pi, threshold=0.1,
                passed=abs(fm - math.pi) <= 0.1 * math.pi)
    with open(os.path.join(out, "diagnostics.json"), "w") as fh:
        fh.write(rep.to_json())
    return 0 if rep.passed else 2


def cmd_sweep(sc, config, plan, out, kind: str) -> int:
    rep = DiagnosticsReport(provenance=provenance(sc, sweep=kind))
    if kind == "eps":
        eps_list = plan.eps_list or tuple(0.1 * 2.0 ** -k for k in range(5))
        table = eps_convergence_study(sc, config, eps_list, s=2.0)
        _write_table(os.path.join(out, "sweep_eps.csv"), table["rows"],
                     ["eps_k", "eps_k1", "grad_diff", "trunc_sup_diff"])
        rep.add("eps_sweep.cauchy", table["cauchy"], threshold="non-increasing",
                passed=table["cauchy"])
    elif kind == "delta":
        traj = run(sc, config)
        rows = delta_sweep(traj, plan.delta_list)
        _write_table(os.path.join(out, "sweep_delta.csv"), rows,
                     ["delta", "dist_eps", "dist_limit", "bound", "pass"])
        for r in rows:
            rep.add(f"delta_sweep.{r['delta']!r}", r["dist_eps"], threshold=r["bound"],
                    passed=r["pass"])
    else:
        raise ParseError(f"unknown sweep kind {kind!r}", field="kind")
    with open(os.path.join(out, "diagnostics.json"), "w") as fh:
        fh.write(rep.to_json())
    return 0 if rep.passed else 2


def cmd_diagnose(sc, config, plan, out) -> int:
    traj = run(sc, config)
    traj.write_log(os.path.join(out, "steps.csv"))
    rep = _standard_report(sc, traj, plan)
    with open(os.path.join(out, "diagnostics.json"), "w") as fh:
        fh.write(rep.to_json())
    return 0 if rep.passed else 2


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="onepflow", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=("run", "steady", "sweep", "diagnose"))
    ap.add_argument("--config", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--kind", choices=("eps", "delta"), default=None,
                    help="sweep variable (defaults to the [diagnostics] kind)")
    args = ap.parse_args(argv)
    try:
        sc, config, plan = parse_config(args.config, args.seed)
        os.makedirs(args.out, exist_ok=True)
        if args.command == "run":
            return cmd_run(sc, config, plan, args.out)
        if args.command == "steady":
            return cmd_steady(sc, config, plan, args.out)
        if args.command == "sweep":
            return cmd_sweep(sc, config, plan, args.out, args.kind or plan.kind)
        return cmd_diagnose(sc, config, plan, args.out)
    except ParseError as exc:
        where = "".join(f" {k}={v}" for k, v in (("line", exc.line), ("field", exc.field)) if v)
        print(f"onepflow: parse error{where}: {exc}", file=sys.stderr)
        return 1
    except (OnePFlowError, ValueError, RuntimeError, OSError) as exc:
        print(f"onepflow: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
