"""Implicit Euler for the regularised system with lagged-diffusivity inner iterations.

Each step minimises the convex functional

    J(w) = sum_i M_i/(2 tau) |w_i - u_i|^2 + sum_e vol_e E_eps(Dw_e) - F.w

over fields with the prescribed boundary values.  The frozen-diffusivity solve
gives a descent direction for J; a backtracking search keeps every accepted
iterate from increasing J, which matters for p > 2 where plain lagging can
overshoot.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse import linalg as spla

from .errors import ConvergenceFailure, DomainError, StagnationFailure
from .flux import batch_dmu, batch_energy, batch_mu, batch_sigma
from .grid import (Mesh, VectorField, assemble_frozen_operator, build_mesh, geometric_local,
                   gradient_values, scatter, write_checkpoint)
from .model import CoefficientModel, ForcingTerm, Parameters

MODES = ("kacanov", "newton-after-kacanov")
LINEAR_SOLVERS = ("direct", "cg")


@dataclass(frozen=True)
class SolverConfig:
    inner_tol: float = 1e-8
    max_inner: int = 200
    linear_tol: float = 1e-10
    damping: float = 1.0
    mode: str = "kacanov"
    steady_tol: float = 1e-7
    linear_solver: str = "direct"
    max_steps: int = 10_000
    checkpoint_stride: int = 1
    newton_switch: float = 1.0    # relative residual below which Newton is tried first

    def __post_init__(self):
        for name in ("inner_tol", "linear_tol", "steady_tol", "newton_switch"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")
        if not 0 < self.damping <= 1:
            raise DomainError(f"damping must lie in (0, 1], got {self.damping}")
        if self.mode not in MODES:
            raise DomainError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.linear_solver not in LINEAR_SOLVERS:
            raise DomainError(f"linear_solver must be one of {LINEAR_SOLVERS}")
        if self.max_inner < 1 or self.max_steps < 1 or self.checkpoint_stride < 1:
            raise DomainError("max_inner, max_steps and checkpoint_stride must be >= 1")


NodalRule = Callable[[np.ndarray, float], np.ndarray]


def _json_default(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return repr(obj)


@dataclass(frozen=True, eq=False)
class Scenario:
    """Parameters, coefficients, forcing and Dirichlet data on a box.

    ``u0(X)`` and ``boundary(X, t)`` return ``(m, N)`` arrays.  ``autonomous``
    marks coefficients, forcing and boundary data as time independent.
    """
    params: Parameters
    model: CoefficientModel
    forcing: ForcingTerm
    u0: Callable[[np.ndarray], np.ndarray]
    boundary: NodalRule
    box: tuple
    descriptor: dict = field(default_factory=dict)
    autonomous: bool = True
    _mesh: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(self.box) != self.params.n or self.model.n != self.params.n:
            raise DomainError("box, parameters and coefficient model disagree on n")
        if self.forcing.N != self.params.N:
            raise DomainError("forcing and parameters disagree on N")
        mesh = self.mesh
        bn = mesh.nodes[mesh.boundary]
        u0b = self._nodal(self.u0(bn))
        ub = self._nodal(self.boundary(bn, 0.0))
        if not np.allclose(u0b, ub, rtol=0, atol=1e-12):
            raise DomainError("initial field must agree with the boundary data at t = 0")

    def _nodal(self, vals) -> np.ndarray:
        v = np.asarray(vals, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        return np.broadcast_to(v, (v.shape[0], self.params.N))

    @property
    def mesh(self) -> Mesh:
        m = self._mesh.get("mesh")
        if m is None:
            m = build_mesh(self.box, self.params.resolution)
            self._mesh["mesh"] = m
        return m

    def initial_field(self) -> VectorField:
        return VectorField(self.mesh, np.array(self._nodal(self.u0(self.mesh.nodes))), 0.0)

    def boundary_values(self, t: float) -> np.ndarray:
        m = self.mesh
        return np.array(self._nodal(self.boundary(m.nodes[m.boundary], t)))

    def with_params(self, **changes) -> "Scenario":
        params = replace(self.params, **changes)
        desc = dict(self.descriptor, params=params.__dict__)
        return replace(self, params=params, descriptor=desc, _mesh={})

    @property
    def hash(self) -> str:
        blob = json.dumps({"params": self.params.__dict__, "model": self.model.descriptor,
                           "forcing": self.forcing.descriptor, "box": self.box,
                           "scenario": self.descriptor}, sort_keys=True, default=_json_default)
        return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# discrete step functional
# ---------------------------------------------------------------------------

class _StepProblem:
    """Everything that is frozen during one implicit step."""

    def __init__(self, scenario: Scenario, u_prev: np.ndarray, t: float, tau: float,
                 config: SolverConfig):
        self.sc, self.cfg = scenario, config
        self.mesh = mesh = scenario.mesh
        self.eps = scenario.params.eps
        self.tau, self.t = tau, t
        self.u_prev = u_prev
        self.a1, self.ap, self.G = scenario.model.evaluate(mesh.centroids, t)
        self.a1 = np.broadcast_to(self.a1, (mesh.n_elements,))
        self.ap = np.broadcast_to(self.ap, (mesh.n_elements,))
        self.geo = geometric_local(mesh, self.G)
        self.mt = mesh.lumped_mass / tau
        f = scenario.forcing(mesh.centroids, t)
        self.F = mesh.element_load(f)
        self.interior = mesh.interior
        self.bvals = scenario.boundary_values(t)

    def sigma(self, w):
        Z = gradient_values(self.mesh, w)
        return Z, batch_sigma(self.G, Z)

    def mu(self, sig):
        return batch_mu(self.sc.model, self.eps, self.a1, self.ap, sig)

    def functional(self, w) -> float:
        _, sig = self.sigma(w)
        e = batch_energy(self.sc.model, self.eps, self.a1, self.ap, sig)
        d = w - self.u_prev
        return float(0.5 * np.sum(self.mt[:, None] * d * d) + np.sum(self.mesh.volumes * e)
                     - np.sum(self.F * w))

    def stiffness(self, mu) -> sp.csr_matrix:
        return scatter(self.mesh, mu[:, None, None] * self.geo)

    def residual(self, w, K=None):
        """Relative residual on interior dofs and the raw interior residual."""
        if K is None:
            K = self.stiffness(self.mu(self.sigma(w)[1]))
        Kw = K @ w
        mw = self.mt[:, None] * w
        R = mw - self.mt[:, None] * self.u_prev + Kw - self.F
        I = self.interior
        scale = (np.linalg.norm(mw[I]) + np.linalg.norm((self.mt[:, None] * self.u_prev)[I])
                 + np.linalg.norm(self.F[I]) + np.linalg.norm(Kw[I]))
        r = np.linalg.norm(R[I])
        return float(r / scale if scale > 0 else r), R

    def solve(self, A: sp.csr_matrix, rhs: np.ndarray, x0: Optional[np.ndarray] = None):
        """Solve ``A_II x = rhs`` for every column of ``rhs``."""
        I = self.interior
        Aii = A[I][:, I].tocsc()
        if self.cfg.linear_solver == "direct":
            lu = spla.splu(Aii)
            return lu.solve(np.ascontiguousarray(rhs))
        out = np.empty_like(rhs)
        d = Aii.diagonal()
        prec = spla.LinearOperator(Aii.shape, matvec=lambda v: v / d)
        for j in range(rhs.shape[1]):
            guess = None if x0 is None else x0[:, j]
            x, info = spla.cg(Aii, rhs[:, j], x0=guess, rtol=self.cfg.linear_tol, atol=0.0,
                              M=prec, maxiter=10 * Aii.shape[0])
            if info != 0:
                raise ConvergenceFailure(f"CG did not converge (info={info})")
            out[:, j] = x
        return out

    def kacanov(self, w, mu):
        """Frozen-diffusivity update: solve (M/tau + K(mu)) w = M/tau u_prev + F."""
        I, B = self.interior, self.mesh.boundary
        K = assemble_frozen_operator(self.mesh, self.sc.model, self.sc.params, mu, self.t,
                                     probe=False)
        A = K + sp.diags(self.mt)
        rhs = (self.mt[:, None] * self.u_prev + self.F) - A[:, B] @ w[B]
        new = w.copy()
        new[I] = self.solve(A, rhs[I], w[I])
        return new

    def newton_direction(self, w, R):
        """Solve J''(w) d = -R using the linearised flux (couples the components)."""
        mesh, N, k = self.mesh, w.shape[1], self.mesh.n + 1
        Z, sig = self.sigma(w)
        mu = self.mu(sig)
        dmu = batch_dmu(self.sc.model, self.eps, self.a1, self.ap, sig)
        # (gamma zeta^i) . grad(phi_a) per element
        c = np.einsum("ejk,ekl,eal->eaj", Z, self.G, mesh.grads)
        E = mesh.n_elements
        local = np.zeros((E, k, N, k, N))
        for j in range(N):
            local[:, :, j, :, j] = mu[:, None, None] * self.geo
        local += (2.0 * mesh.volumes * dmu)[:, None, None, None, None] * \
            c[:, :, :, None, None] * c[:, None, None, :, :]
        Jm = scatter(mesh, local.reshape(E, k * N, k * N), N)
        Jm = Jm + sp.diags(np.repeat(self.mt, N))
        dofs = (self.interior[:, None] * N + np.arange(N)).ravel()
        Jii = Jm[dofs][:, dofs].tocsc()
        rhs = -R[self.interior].ravel()
        if self.cfg.linear_solver == "direct":
            d = spla.splu(Jii).solve(rhs)
        else:
            diag = Jii.diagonal()
            prec = spla.LinearOperator(Jii.shape, matvec=lambda v: v / diag)
            d, info = spla.cg(Jii, rhs, rtol=self.cfg.linear_tol, atol=0.0, M=prec,
                              maxiter=10 * Jii.shape[0])
            if info != 0:
                raise ConvergenceFailure(f"CG did not converge (info={info})")
        out = np.zeros_like(w)
        out[self.interior] = d.reshape(-1, N)
        return out


@dataclass(frozen=True)
class StepInfo:
    field: VectorField
    iterations: int
    residual: float
    functional: tuple   # J after each accepted iterate, starting at the initial guess


def _line_search(prob: _StepProblem, w, J0, direction, theta0, slope=None):
    """Largest theta = theta0 / 2^k with J(w + theta d) <= J0 (+ Armijo term)."""
    slack = 1e-12 * max(1.0, abs(J0))
    theta = theta0
    while theta > 1e-12:
        cand = w + theta * direction
        Jc = prob.functional(cand)
        armijo = 0.0 if slope is None else 1e-4 * theta * slope
        if Jc <= J0 + armijo + slack:
            return cand, Jc
        theta *= 0.5
    return None, J0


def solve_step(state: VectorField, scenario: Scenario, config: SolverConfig,
               tau: Optional[float] = None) -> StepInfo:
    tau = scenario.params.tau if tau is None else tau
    if not tau > 0:
        raise DomainError("tau must be positive")
    t = state.time + tau
    prob = _StepProblem(scenario, state.values, t, tau, config)
    w = state.values.copy()
    w[scenario.mesh.boundary] = prob.bvals
    Js = [prob.functional(w)]
    res, R = prob.residual(w)
    it = 0
    while res > config.inner_tol:
        if it >= config.max_inner:
            raise ConvergenceFailure(
                f"inner iteration stagnated at relative residual {res:.3e} after {it} solves")
        new = None
        if config.mode == "newton-after-kacanov" and res < config.newton_switch:
            d = prob.newton_direction(w, R)
            slope = float(np.sum(R * d))
            if slope < 0:
                new, Jn = _line_search(prob, w, Js[-1], d, 1.0, slope)
        if new is None:
            mu = prob.mu(prob.sigma(w)[1])
            target = prob.kacanov(w, mu)
            new, Jn = _line_search(prob, w, Js[-1], target - w, config.damping)
        it += 1
        if new is None:
            raise ConvergenceFailure(
                f"no descent possible at relative residual {res:.3e} after {it} solves")
        w = new
        Js.append(Jn)
        res, R = prob.residual(w)
    return StepInfo(VectorField(scenario.mesh, w, t), it, res, tuple(Js))


def implicit_step(state: VectorField, scenario: Scenario, config: SolverConfig,
                  tau: Optional[float] = None) -> VectorField:
    return solve_step(state, scenario, config, tau).field


# ---------------------------------------------------------------------------
# time loop
# ---------------------------------------------------------------------------

def discrete_energy(scenario: Scenario, u: VectorField) -> float:
    mesh = scenario.mesh
    a1, ap, G = scenario.model.evaluate(mesh.centroids, u.time)
    sig = batch_sigma(G, gradient_values(mesh, u.values))
    return float(np.sum(mesh.volumes * batch_energy(scenario.model, scenario.params.eps,
                                                     a1, ap, sig)))


def sup_gradient_magnitude(scenario: Scenario, u: VectorField) -> float:
    mesh = scenario.mesh
    _, _, G = scenario.model.evaluate(mesh.centroids, u.time)
    sig = batch_sigma(G, gradient_values(mesh, u.values))
    return float(np.sqrt(scenario.params.eps ** 2 + sig).max())


@dataclass(frozen=True)
class StepRecord:
    step: int
    t: float
    inner_iters: int
    residual: float
    energy: float
    sup_v_eps: float


LOG_FIELDS = ("step", "t", "inner_iters", "residual", "energy", "sup_v_eps")


@dataclass
class Trajectory:
    scenario: Scenario
    states: list            # VectorFields at checkpoint steps (includes the initial field)
    steps: list             # step index of each stored state
    records: list = field(default_factory=list)
    complete: bool = True

    @property
    def times(self) -> np.ndarray:
        return np.array([s.time for s in self.states])

    @property
    def final(self) -> VectorField:
        return self.states[-1]

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_FIELDS)
            for r in self.records:
                w.writerow([r.step, repr(float(r.t)), r.inner_iters, repr(float(r.residual)),
                            repr(float(r.energy)), repr(float(r.sup_v_eps))])


def _time_grid(t_end: float, tau: float) -> list:
    """Step sizes covering (0, t_end]; a shorter final step absorbs any remainder."""
    if t_end == 0:
        return []
    k = int(math.floor(t_end / tau + 1e-9))
    taus = [tau] * k
    rem = t_end - k * tau
    if rem > 1e-9 * tau:
        taus.append(rem)
    return taus


def run(scenario: Scenario, config: SolverConfig, checkpoint_dir=None,
        on_step: Optional[Callable[[VectorField, StepInfo], None]] = None) -> Trajectory:
    """March to ``t_end``; stores every ``checkpoint_stride``-th state plus the last.

    On failure the partial trajectory is attached to the exception as
    ``exc.trajectory`` (and already written to ``checkpoint_dir``).
    """
    u = scenario.initial_field()
    traj = Trajectory(scenario, [u], [0])
    if checkpoint_dir is not None:
        write_checkpoint(f"{checkpoint_dir}/step_{0:06d}.ckpt", u)
    taus = _time_grid(scenario.params.t_end, scenario.params.tau)
    for k, tau in enumerate(taus, start=1):
        try:
            info = solve_step(u, scenario, config, tau)
        except Exception as exc:
            traj.complete = False
            exc.trajectory = traj
            raise
        t = scenario.params.t_end if k == len(taus) else k * scenario.params.tau
        u =VectorField(scenario.mesh, info.field.values, t)
        traj.records.append(StepRecord(k, t, info.iterations, info.residual,
                                       discrete_energy(scenario, u),
                                       sup_gradient_magnitude(scenario, u)))
        if on_step is not None:
            on_step(u, info)
        if k % config.checkpoint_stride == 0 or k == len(taus):
            traj.states.append(u)
            traj.steps.append(k)
            if checkpoint_dir is not None:
                write_checkpoint(f"{checkpoint_dir}/step_{k:06d}.ckpt", u)
    return traj


@dataclass(frozen=True)
class SteadyResult:
    field: VectorField
    steps: int
    increment: float    # final ||u^{k+1} - u^k||_inf / tau
    records: tuple


def solve_steady(scenario: Scenario, config: SolverConfig,
                 initial: Optional[VectorField] = None) -> SteadyResult:
    if not scenario.autonomous:
        raise DomainError("steady_state needs time-independent data")
    u = scenario.initial_field() if initial is None else initial
    tau = scenario.params.tau
    records = []
    inc = math.inf
    for k in range(1, config.max_steps + 1):
        info = solve_step(u, scenario, config, tau)
        inc = float(np.max(np.abs(info.field.values - u.values))) / tau
        u = info.field
        records.append(StepRecord(k, u.time, info.iterations, info.residual,
                                  discrete_energy(scenario, u),
                                  sup_gradient_magnitude(scenario, u)))
        if inc <= config.steady_tol:
            return SteadyResult(u, k, inc, tuple(records))
    raise StagnationFailure(
        f"steady_tol {config.steady_tol:g} not reached in {config.max_steps} steps "
        f"(last increment {inc:.3e})")


def steady_state(scenario: Scenario, config: SolverConfig) -> VectorField:
    return solve_steady(scenario, config).field
