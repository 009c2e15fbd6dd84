"""Diagnostics on computed trajectories: gradient bounds, facets, truncated-gradient
regularity, level sets, maximum principle, and convergence/stability studies."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (CylinderOutOfDomain, DomainError, MismatchedDiscretization,
                     TruncationOrder)
from .flux import batch_sigma, batch_trunc
from .grid import VectorField, gradient_values
from .model import ForcingTerm, lq_lr_norm
from .solver import Scenario, SolverConfig, Trajectory, run


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def _clean(x):
    if isinstance(x, (np.floating, np.integer)):
        x = x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    return x


@dataclass
class DiagnosticsReport:
    entries: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def add(self, key: str, value, threshold=None, passed: Optional[bool] = None, refs=()):
        if passed is not None and threshold is None:
            raise DomainError(f"entry {key!r} has a verdict but no threshold")
        self.entries.append({"key": key, "value": _clean(value), "threshold": _clean(threshold),
                             "pass": None if passed is None else bool(passed),
                             "refs": list(refs)})
        return self

    def extend(self, entries):
        for e in entries:
            self.add(e["key"], e["value"], e.get("threshold"), e.get("pass"), e.get("refs", ()))
        return self

    def __getitem__(self, key):
        for e in self.entries:
            if e["key"] == key:
                return e
        raise KeyError(key)

    @property
    def passed(self) -> bool:
        return all(e["pass"] is not False for e in self.entries)

    def to_json(self) -> str:
        return json.dumps({"entries": self.entries, "provenance": _clean(self.provenance)},
                          indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DiagnosticsReport":
        data = json.loads(text)
        return cls(entries=data["entries"], provenance=data["provenance"])


def provenance(scenario: Scenario, **extra) -> dict:
    p = scenario.params
    return dict({"scenario_hash": scenario.hash, "mesh": scenario.mesh.descriptor(),
                 "eps": p.eps, "delta": p.delta}, **extra)


# ---------------------------------------------------------------------------
# space-time selection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Cylinder:
    """``B_rho(center) x (t0 - rho^2, t0]``."""
    center: tuple
    t0: float
    rho: float

    def __post_init__(self):
        if not self.rho > 0:
            raise DomainError("cylinder radius must be positive")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @property
    def t_start(self) -> float:
        return self.t0 - self.rho ** 2


def stationary(scenario: Scenario, state: VectorField) -> Trajectory:
    """Wrap a single field as a time-independent trajectory."""
    return Trajectory(scenario, [state], [0])


def _is_stationary(traj: Trajectory) -> bool:
    return len(traj.states) == 1


def _check_cylinder(traj: Trajectory, cyl: Cylinder):
    mesh = traj.scenario.mesh
    if len(cyl.center) != mesh.n:
        raise CylinderOutOfDomain("cylinder centre has the wrong dimension")
    if cyl.rho < 2 * mesh.h - 1e-12:
        raise CylinderOutOfDomain(f"radius {cyl.rho} is below two mesh cells ({2 * mesh.h})")
    for c, (lo, hi) in zip(cyl.center, mesh.box):
        if c - cyl.rho < lo - 1e-12 or c + cyl.rho > hi + 1e-12:
            raise CylinderOutOfDomain("spatial ball leaves the box")
    if not _is_stationary(traj):
        t = traj.times
        if cyl.t_start < t[0] - 1e-12 or cyl.t0 > t[-1] + 1e-12:
            raise CylinderOutOfDomain(
                f"time window ({cyl.t_start}, {cyl.t0}] not inside [{t[0]}, {t[-1]}]")


def _ball(traj: Trajectory, cyl: Optional[Cylinder]) -> np.ndarray:
    mesh = traj.scenario.mesh
    if cyl is None:
        return np.ones(mesh.n_elements, dtype=bool)
    d = np.linalg.norm(mesh.centroids - np.asarray(cyl.center), axis=1)
    return d < cyl.rho


def _slices(traj: Trajectory, cyl: Optional[Cylinder]):
    """States representing the time window, with their slice widths.

    State ``k`` stands for ``(t_{k-1}, t_k]`` (implicit Euler is piecewise
    constant in time).  The initial field only counts for stationary data.
    """
    if _is_stationary(traj):
        w = 1.0 if cyl is None else cyl.rho ** 2
        return [(traj.states[0], w)]
    t = traj.times
    lo, hi = (t[0], t[-1]) if cyl is None else (cyl.t_start, cyl.t0)
    out = []
    for k in range(1, len(traj.states)):
        a, b = max(t[k - 1], lo), min(t[k], hi)
        if b > a + 1e-14:
            out.append((traj.states[k], b - a))
    if not out:
        k = int(np.searchsorted(t, hi - 1e-14))
        out.append((traj.states[min(max(k, 1), len(t) - 1)], 0.0))
    return out


def _gradients(traj: Trajectory, state: VectorField):
    mesh = traj.scenario.mesh
    _, _, G = traj.scenario.model.evaluate(mesh.centroids, state.time)
    Z = gradient_values(mesh, state.values)
    return G, Z


def _prepare(traj, cyl):
    if cyl is not None:
        _check_cylinder(traj, cyl)
    return _ball(traj, cyl), _slices(traj, cyl)


# ---------------------------------------------------------------------------
# pointwise diagnostics
# ---------------------------------------------------------------------------

def sup_v_eps(traj: Trajectory, cyl: Optional[Cylinder] = None) -> float:
    mask, slices = _prepare(traj, cyl)
    eps = traj.scenario.params.eps
    best = 0.0
    for state, _ in slices:
        G, Z = _gradients(traj, state)
        v = np.sqrt(eps * eps + batch_sigma(G, Z))[mask]
        if v.size:
            best = max(best, float(v.max()))
    return best


def facet_measure(scenario: Scenario, state: VectorField, delta: float) -> float:
    """Volume of the elements where ``|Du|_gamma < delta``."""
    if not delta > scenario.params.eps:
        raise TruncationOrder(f"facet threshold delta={delta} must exceed eps")
    traj = stationary(scenario, state)
    G, Z = _gradients(traj, state)
    small = np.sqrt(batch_sigma(G, Z)) < delta
    return float(np.sum(scenario.mesh.volumes[small]))


def _require_order(eps, delta, factor=4.0):
    if not eps * factor < delta:
        raise TruncationOrder(f"need eps < delta/{factor:g}, got eps={eps}, delta={delta}")


def truncated_field(traj: Trajectory, state: VectorField, delta: float,
                    level: float = 2.0) -> np.ndarray:
    """``G_{level*delta, eps}(Du)`` at the element centroids, ``(E, N, n)``."""
    G, Z = _gradients(traj, state)
    return batch_trunc(G, Z, traj.scenario.params.eps, level * delta)


def holder_seminorm(traj: Trajectory, delta: float, cyl: Optional[Cylinder] = None,
                    alpha: float = 0.5, sample_count: int = 10_000, seed: int = 0) -> float:
    """Sampled ``(alpha, alpha/2)`` Holder quotient of the truncated gradient.

    Pairs of (element, time slice) are drawn with a fixed seed; pairs closer
    than two mesh cells in the parabolic metric are discarded.
    """
    if not 0 < alpha < 1:
        raise DomainError("alpha must lie in (0, 1)")
    _require_order(traj.scenario.params.eps, delta)
    mask, slices = _prepare(traj, cyl)
    mesh = traj.scenario.mesh
    elems = np.flatnonzero(mask)
    if elems.size == 0:
        return 0.0
    vals = np.stack([truncated_field(traj, s, delta)[elems] for s, _ in slices])
    vals = vals.reshape(len(slices), elems.size, -1)
    times = np.array([s.time for s, _ in slices])
    if _is_stationary(traj):
        times = np.zeros(1)
    X = mesh.centroids[elems]
    pairs = sample_pairs(X, times, 2 * mesh.h, sample_count, seed)
    if pairs is None:
        return 0.0
    (i1, k1), (i2, k2), d = pairs
    diff = np.linalg.norm(vals[k1, i1] - vals[k2, i2], axis=1)
    return float(np.max(diff / d ** alpha))


def sample_pairs(X, times, min_sep, count, seed):
    """Seeded draw of ``count`` point pairs with parabolic distance ``>= min_sep``."""
    rng = np.random.default_rng(seed)
    m, K = X.shape[0], times.size
    got_i1, got_k1, got_i2, got_k2, got_d = [], [], [], [], []
    total, rounds = 0, 0
    while total < count and rounds < 50:
        draw = 2 * (count - total) + 16
        i1, i2 = rng.integers(0, m, draw), rng.integers(0, m, draw)
        k1, k2 = rng.integers(0, K, draw), rng.integers(0, K, draw)
        d = np.maximum(np.linalg.norm(X[i1] - X[i2], axis=1),
                       np.sqrt(np.abs(times[k1] - times[k2])))
        keep = np.flatnonzero(d >= min_sep)[: count - total]
        for lst, arr in zip((got_i1, got_k1, got_i2, got_k2, got_d), (i1, k1, i2, k2, d)):
            lst.append(arr[keep])
        total += keep.size
        rounds += 1
    if total == 0:
        return None
    cat = [np.concatenate(v) for v in (got_i1, got_k1, got_i2, got_k2, got_d)]
    return (cat[0], cat[1]), (cat[2], cat[3]), cat[4]


def superlevel_measure(traj: Trajectory, cyl: Cylinder, mu: float, nu: float,
                       delta: float):
    """Measure of ``{v_eps - delta > (1 - nu) mu}`` in the cylinder and its ratio to ``|Q|``.

    Returns ``(measure, ratio, mu_above_delta)``.
    """
    if not 0 < nu < 1:
        raise DomainError("nu must lie in (0, 1)")
    mask, slices = _prepare(traj, cyl)
    vols = traj.scenario.mesh.volumes
    eps = traj.scenario.params.eps
    measure = total = 0.0
    for state, dt in slices:
        G, Z = _gradients(traj, state)
        v = np.sqrt(eps * eps + batch_sigma(G, Z))
        hit = mask & (v - delta > (1 - nu) * mu)
        measure += dt * float(vols[hit].sum())
        total += dt * float(vols[mask].sum())
    ratio = measure / total if total > 0 else 0.0
    return measure, ratio, bool(mu > delta)


def _forcing_vanishes(scenario: Scenario, times) -> bool:
    c = scenario.mesh.centroids
    return all(np.all(scenario.forcing(c, t) == 0) for t in times)


def max_principle_check(traj: Trajectory, scenario: Optional[Scenario] = None,
                        tol: float = 1e-8) -> list:
    """Range containment for scalar, unforced runs; report-only otherwise.

    The admissible range is spanned by the boundary data over the run and the
    initial field.
    """
    sc = scenario or traj.scenario
    times = traj.times
    sups = [float(np.max(np.abs(s.values))) for s in traj.states]
    forced_times = times if len(times) == 1 else times[1:]
    if sc.params.N != 1 or not _forcing_vanishes(sc, forced_times):
        return [{"key": "max_principle.sup_abs_u", "value": max(sups), "threshold": None,
                 "pass": None, "refs": ["report-only: forcing or N > 1"]}]
    bvals = np.concatenate([sc.boundary_values(t).ravel() for t in times])
    u0 = traj.states[0].values.ravel()
    lo = float(min(bvals.min(), u0.min()))
    hi = float(max(bvals.max(), u0.max()))
    worst = 0.0
    for s in traj.states[1:]:
        worst = max(worst, float(lo - s.values.min()), float(s.values.max() - hi))
    maxima = [float(s.values.max()) for s in traj.states]
    rise = max([b - a for a, b in zip(maxima[:-1], maxima[1:])], default=0.0)
    return [{"key": "max_principle.range_violation", "value": max(worst, 0.0),
             "threshold": tol, "pass": worst <= tol, "refs": [f"range [{lo!r}, {hi!r}]"]},
            {"key": "max_principle.sup_increase", "value": max(rise, 0.0), "threshold": tol,
             "pass": rise <= tol, "refs": []}]


# ---------------------------------------------------------------------------
# studies
# ---------------------------------------------------------------------------

def _same_discretization(a: Trajectory, b: Trajectory):
    if not a.scenario.mesh.same_discretization(b.scenario.mesh):
        raise MismatchedDiscretization("runs use different meshes")
    ta, tb = a.times, b.times
    if ta.shape != tb.shape or np.max(np.abs(ta - tb), initial=0.0) > 1e-12:
        raise MismatchedDiscretization("runs use different time grids")


def gradient_distance(a: Trajectory, b: Trajectory, s: float) -> float:
    """``||Du_a - Du_b||_{L^s}`` over space-time (piecewise constant in time)."""
    _same_discretization(a, b)
    mesh = a.scenario.mesh
    sa, sb = _slices(a, None), _slices(b, None)
    total = 0.0
    for (ua, dt), (ub, _) in zip(sa, sb):
        D = gradient_values(mesh, ua.values) - gradient_values(mesh, ub.values)
        mag = np.sqrt(np.sum(D * D, axis=(1, 2)))
        if math.isinf(s):
            total = max(total, float(mag.max()))
        else:
            total += dt * float(np.sum(mesh.volumes * mag ** s))
    return float(total if math.isinf(s) else total ** (1.0 / s))


def eps_convergence_table(trajs: Sequence[Trajectory], eps_list, s: float,
                          delta: Optional[float] = None) -> dict:
    rows = []
    for k in range(len(trajs) - 1):
        a, b = trajs[k], trajs[k + 1]
        row = {"eps_k": eps_list[k], "eps_k1": eps_list[k + 1],
               "grad_diff": gradient_distance(a, b, s), "trunc_sup_diff": None}
        if delta is not None:
            row["trunc_sup_diff"] = max(
                float(np.max(np.abs(truncated_field(a, ua, delta) - truncated_field(b, ub, delta))))
                for (ua, _), (ub, _) in zip(_slices(a, None), _slices(b, None)))
        rows.append(row)
    diffs = [r["grad_diff"] for r in rows]
    return {"rows": rows, "cauchy": all(d1 <= d0 for d0, d1 in zip(diffs[:-1], diffs[1:]))}


def eps_convergence_study(scenario: Scenario, config: SolverConfig, eps_list,
                          s: Optional[float] = None, delta: Optional[float] = None,
                          runner=run) -> dict:
    """Run the scenario for each eps and tabulate consecutive gradient distances.

    The truncated-gradient column is filled when ``delta`` is given (and every
    eps is below ``delta/4``).
    """
    eps_list = [float(e) for e in eps_list]
    if len(eps_list) < 3:
        raise DomainError("eps_list needs at least three entries")
    if any(b >= a for a, b in zip(eps_list[:-1], eps_list[1:])):
        raise DomainError("eps_list must be strictly decreasing")
    if delta is not None:
        _require_order(eps_list[0], delta)
    s = scenario.params.p if s is None else s
    trajs = [runner(scenario.with_params(eps=e), config) for e in eps_list]
    return eps_convergence_table(trajs, eps_list, s, delta)


def _l2_mass(mesh, values) -> float:
    return float(np.sqrt(np.sum(mesh.lumped_mass[:, None] * values * values)))


def stability_check(pair: Sequence[Scenario], config: SolverConfig,
                    s: Optional[float] = None, runner=run) -> dict:
    """Distances between two runs sharing the discretization, against their data distances."""
    sa, sb = pair
    pa, pb = sa.params, sb.params
    if (not sa.mesh.same_discretization(sb.mesh) or pa.tau != pb.tau or pa.t_end != pb.t_end):
        raise MismatchedDiscretization("scenarios must share mesh, tau and t_end")
    ta, tb = runner(sa, config), runner(sb, config)
    _same_discretization(ta, tb)
    mesh = sa.mesh
    s = pa.p if s is None else s
    sup_l2 = max(_l2_mass(mesh, ua.values - ub.values) for ua, ub in zip(ta.states, tb.states))
    grad = gradient_distance(ta, tb, s)
    times = ta.times[1:]
    diff_f = ForcingTerm(rule=lambda X, t: sa.forcing(X, t) - sb.forcing(X, t), N=pa.N)
    f_dist = lq_lr_norm(diff_f, mesh, 2.0, 1.0, times) if times.size else 0.0
    bdist = max(float(np.max(np.abs(sa.boundary_values(t) - sb.boundary_values(t))))
                for t in ta.times)
    out = {"sup_l2": sup_l2, "grad_lp": grad, "forcing_l21": f_dist, "boundary_sup": bdist,
           "trajectories": (ta, tb)}
    if f_dist == 0 and bdist == 0 and np.array_equal(ta.states[0].values, tb.states[0].values):
        out["trivial_pass"] = sup_l2 == 0 and grad == 0
    return out


def delta_sweep(traj: Trajectory, delta_list, cyl: Optional[Cylinder] = None,
                tol: float = 1e-12) -> list:
    """Distance between ``G_{2 delta}(Du)`` and ``Du`` for each delta.

    ``dist_eps`` uses the regularised magnitude, ``dist_limit`` the plain one;
    both must stay below ``2 delta + eps`` on every element.
    """
    if len(delta_list) == 0:
        raise DomainError("delta_list must not be empty")
    eps = traj.scenario.params.eps
    for d in delta_list:
        _require_order(eps, d)
    mask, slices = _prepare(traj, cyl)
    rows = []
    for d in delta_list:
        de = dl = 0.0
        for state, _ in slices:
            G, Z = _gradients(traj, state)
            Z, G = Z[mask], G[mask]
            for e, acc in ((eps, "eps"), (0.0, "lim")):
                D = batch_trunc(G, Z, e, 2 * d) - Z
                dist = float(np.sqrt(batch_sigma(G, D)).max(initial=0.0))
                if acc == "eps":
                    de = max(de, dist)
                else:
                    dl = max(dl, dist)
        bound = 2 * d + eps
        rows.append({"delta": d, "dist_eps": de, "dist_limit": dl, "bound": bound,
                     "pass": de <= bound * (1 + tol) and dl <= bound * (1 + tol)})
    return rows
