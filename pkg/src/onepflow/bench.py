"""Canonical scenarios: the radial stationary solution, laminar Bingham pipe flow
and constant data."""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .errors import DomainError
from .model import (ForcingTerm, Parameters, constant_forcing, make_model, time_forcing)
from .solver import Scenario, SolverConfig, solve_steady


def exact_radial(p: float, n: int, x):
    """Value and gradient of ``(|x|-1)_+^{p'}/p'``.

    With the sign convention ``du/dt - div(...) = f`` this is a steady state for
    ``f = -n``.
    """
    if not p > 1:
        raise DomainError(f"p > 1 required, got p={p}")
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != n:
        raise DomainError(f"points must have {n} coordinates")
    pc = p / (p - 1.0)
    r = np.linalg.norm(x, axis=-1)
    d = np.maximum(r - 1.0, 0.0)
    value = d ** pc / pc
    scale = np.divide(d ** (pc - 1.0), r, out=np.zeros_like(r), where=r > 0)
    return value, scale[..., None] * x


def coons_fill(boundary: Callable, box, t: float = 0.0):
    """Transfinite (linear blend) interpolation of boundary data into the box."""
    n = len(box)

    def rule(X):
        X = np.atleast_2d(X)
        if n == 1:
            (lo, hi), = box
            s = ((X[:, 0] - lo) / (hi - lo))[:, None]
            a = boundary(np.full_like(X, lo), t)
            b = boundary(np.full_like(X, hi), t)
            return (1 - s) * np.atleast_2d(a.T).T + s * np.atleast_2d(b.T).T
        (x0, x1), (y0, y1) = box
        x, y = X[:, 0], X[:, 1]
        s = ((x - x0) / (x1 - x0))[:, None]
        r = ((y - y0) / (y1 - y0))[:, None]

        def g(px, py):
            v = np.asarray(boundary(np.stack([np.broadcast_to(px, x.shape),
                                              np.broadcast_to(py, x.shape)], axis=1), t),
                           dtype=float)
            return v[:, None] if v.ndim == 1 else v

        edges = (1 - s) * g(x0, y) + s * g(x1, y) + (1 - r) * g(x, y0) + r * g(x, y1)
        corners = ((1 - s) * (1 - r) * g(x0, y0) + s * (1 - r) * g(x1, y0)
                   + (1 - s) * r * g(x0, y1) + s * r * g(x1, y1))
        return edges - corners
    return rule


def box_scenario(params: Parameters, model, forcing: ForcingTerm, boundary: Callable,
                 box, u0: Optional[Callable] = None, descriptor: Optional[dict] = None,
                 autonomous: bool = True) -> Scenario:
    """Scenario on a box; the initial field defaults to the blended boundary data."""
    box = tuple((float(a), float(b)) for a, b in box)
    if u0 is None:
        u0 = coons_fill(boundary, box)
    desc = {"params": params.__dict__}
    desc.update(descriptor or {})
    return Scenario(params=params, model=model, forcing=forcing, u0=u0, boundary=boundary,
                    box=box, descriptor=desc, autonomous=autonomous)


def scenario_radial_steady(p: float = 2.0, n: int = 2, resolution: int = 64,
                           eps: float = 1e-4, delta: float = 0.05, tau: float = 1.0,
                           t_end: float = 1.0, gamma: str = "identity-gamma",
                           a1: float = 1.0, ap: float = 1.0) -> Scenario:
    if n != 2:
        raise DomainError("the radial benchmark is set up for n = 2")
    params = Parameters(p=p, eps=eps, delta=delta, tau=tau, t_end=t_end, n=n, N=1,
                        resolution=resolution)
    model = make_model(n=n, p=p, gamma=gamma, a1=a1, ap=ap)

    def boundary(X, t):
        return exact_radial(p, n, X)[0][:, None]

    return box_scenario(params, model, constant_forcing(-float(n)), boundary,
                        ((-2.0, 2.0),) * n,
                        descriptor={"preset": "radial-steady", "forcing": -float(n),
                                    "initial": "coons-blend"})


def scenario_bingham_pipe(forcing: Callable[[float], float] | float = 0.0,
                          resolution: int = 32, eps: float = 1e-3, delta: float = 0.05,
                          tau: float = 0.1, t_end: float = 1.0) -> Scenario:
    """Laminar Bingham flow in a square duct ``(-1,1)^2`` driven by a pressure drop ``f(t)``."""
    params = Parameters(p=2.0, eps=eps, delta=delta, tau=tau, t_end=t_end, n=2, N=1,
                        resolution=resolution)
    model = make_model(n=2, p=2.0, a1=1.0, ap=1.0)
    if callable(forcing):
        f = time_forcing(forcing, 1, {"kind": "time", "fn": getattr(forcing, "descriptor",
                                                                    repr(forcing))})
        autonomous = False
    else:
        f = constant_forcing(float(forcing))
        autonomous = True

    def zero(X, t):
        return np.zeros((np.shape(X)[0], 1))

    return box_scenario(params, model, f, zero, ((-1.0, 1.0), (-1.0, 1.0)), u0=lambda X: zero(X, 0),
                        descriptor={"preset": "bingham-pipe"}, autonomous=autonomous)


def plug_threshold(resolution: int = 16, eps: float = 1e-3, delta: float = 0.05,
                   lo: float = 0.0, hi: float = 4.0, tol: float = 0.02,
                   config: Optional[SolverConfig] = None) -> float:
    """Largest uniform forcing whose steady state keeps ``|Du| <= delta`` (bisection).

    The 1-Laplace part keeps the duct at rest below its Cheeger constant
    (about 1.886 for a square of side 2); the regularised value sits slightly above.
    """
    config = config or SolverConfig(inner_tol=1e-7, steady_tol=1e-6, max_steps=200,
                                    mode="newton-after-kacanov")

    def plugged(c):
        sc = scenario_bingham_pipe(c, resolution, eps, delta, tau=10.0)
        res = solve_steady(sc, config)
        from .grid import gradient_values
        Z = gradient_values(sc.mesh, res.field.values)
        return float(np.sqrt((Z ** 2).sum(axis=(1, 2))).max()) <= delta

    if not plugged(lo):
        raise DomainError("lower bracket is not plugged")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if plugged(mid) else (lo, mid)
    return lo


def step_forcing(before: float, after: float, t_switch: float):
    def f(t):
        return before if t < t_switch else after
    f.descriptor = {"kind": "step", "before": before, "after": after, "t_switch": t_switch}
    return f


def scenario_constant(c: float = 1.0, p: float = 2.0, n: int = 2, N: int = 1,
                      resolution: int = 8, eps: float = 1e-3, delta: float = 0.05,
                      tau: float = 0.1, t_end: float = 1.0) -> Scenario:
    params = Parameters(p=p, eps=eps, delta=delta, tau=tau, t_end=t_end, n=n, N=N,
                        resolution=resolution)
    model = make_model(n=n, p=p)

    def const(X, t):
        return np.full((np.shape(X)[0], N), float(c))

    return box_scenario(params, model, constant_forcing(0.0, N), const, ((0.0, 1.0),) * n,
                        u0=lambda X: const(X, 0), descriptor={"preset": "constant", "c": c})


PRESETS = {"radial-steady": scenario_radial_steady, "bingham-pipe": scenario_bingham_pipe,
           "constant": scenario_constant}
