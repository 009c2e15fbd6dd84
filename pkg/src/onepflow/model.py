"""Domain types, structural validation of coefficients and exponents, gamma norms.

Coefficient fields are vectorised rules: ``a1(X, t)`` and ``ap(X, t)`` map an
``(m, n)`` array of points to ``(m,)`` values, ``gamma(X, t)`` returns an
``(m, n, n)`` stack of symmetric matrices.  Gradients ``zeta`` are ``(N, n)``
matrices (or ``(m, N, n)`` stacks), row ``j`` being the gradient of the
``j``-th component.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate

from .errors import DomainError, ExponentViolation, QuadratureFailure, StructureViolation

Field = Callable[[np.ndarray, float], np.ndarray]


# ---------------------------------------------------------------------------
# parameters and exponents
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Parameters:
    p: float = 2.0
    eps: float = 1e-3
    delta: float = 0.05
    q: float = math.inf
    r: float = math.inf
    beta0: float = 0.5
    tau: float = 0.1
    t_end: float = 1.0
    n: int = 2
    N: int = 1
    resolution: int = 32

    def __post_init__(self):
        if not self.p > 1:
            raise DomainError(f"p > 1 required, got p={self.p}")
        if self.n not in (1, 2):
            raise DomainError(f"n must be 1 or 2, got {self.n}")
        if self.N < 1:
            raise DomainError(f"N >= 1 required, got {self.N}")
        if not 0 < self.eps < 1:
            raise DomainError(f"eps must lie in (0, 1), got {self.eps}")
        if not 0 < self.delta < 1:
            raise DomainError(f"delta must lie in (0, 1), got {self.delta}")
        if not 0 < self.beta0 < 1:
            raise DomainError(f"beta0 must lie in (0, 1), got {self.beta0}")
        if not self.tau > 0:
            raise DomainError(f"tau > 0 required, got {self.tau}")
        if self.t_end < 0:
            raise DomainError(f"t_end >= 0 required, got {self.t_end}")
        if self.resolution < 2:
            raise DomainError(f"resolution >= 2 required, got {self.resolution}")

    def truncation_ok(self, delta: Optional[float] = None) -> bool:
        """Whether ``eps < delta / 4`` (needed by the truncated-gradient diagnostics)."""
        d = self.delta if delta is None else delta
        return self.eps < d / 4


@dataclass(frozen=True)
class ExponentReport:
    p_c: float
    sigma_c: float
    beta: float
    q_hat: float
    r_hat: float
    supercritical: bool
    needs_higher_integrability: bool
    pi: float
    d: float
    e: float
    moser_sigma: float
    scaling: float  # n/q + 2/r


def critical_exponents(p: float, n: int) -> tuple[float, float]:
    """Return ``(p_c, sigma_c)``; pure formulas, valid for any dimension."""
    p_c = 2.0 * n / (n + 2.0)
    sigma_c = (2.0 - p) * n / p if p < 2 else 0.0
    return p_c, sigma_c


def _conjugate_half(s: float) -> float:
    # (s/2)' = s/(s-2), equal to 1 at s = inf
    return 1.0 if math.isinf(s) else s / (s - 2.0)


def exponent_report(p: float, n: int, q: float = math.inf, r: float = math.inf,
                    beta0: float = 0.5, p_tilde: Optional[float] = None) -> ExponentReport:
    if not p > 1:
        raise DomainError(f"p > 1 required, got p={p}")
    if n not in (1, 2):
        raise DomainError(f"n must be 1 or 2, got {n}")
    scaling = n / q + 2.0 / r
    if scaling >= 1:
        raise ExponentViolation(
            f"integrability condition n/q + 2/r < 1 fails: {n}/{q} + 2/{r} = {scaling:g}")
    if not (q > n and r > 2):
        raise DomainError(f"need q > n and r > 2, got q={q}, r={r}")

    p_c, sigma_c = critical_exponents(p, n)
    beta = beta0 if (math.isinf(q) and math.isinf(r)) else 1.0 - scaling
    q_hat, r_hat = _conjugate_half(q), _conjugate_half(r)

    # Moser exponents; sigma > 2 "close to 2" below both admissible upper bounds
    upper = min(1.0 + q / (2.0 * r_hat), math.inf if p >= 2 else 2.0 / (2.0 - p))
    sigma = 2.0 + min(0.5, (upper - 2.0) / 2.0)
    pi = max(1.0 / (p - 1.0), 2.0 / p)
    if p >= 2:
        d = 2.0
    elif p <= p_c:
        if p_tilde is None:
            p_tilde = max(2.0, n * (2.0 - p) / 2.0) + 1.0
        d = p_tilde - n * (2.0 - p) / 2.0
    elif n == 2:
        d = 2.0 - sigma * (2.0 - p)
    else:
        d = (n + 2.0) * (p - p_c)
    e = 2.0 * sigma if n == 2 else n + 2.0

    return ExponentReport(p_c=p_c, sigma_c=sigma_c, beta=beta, q_hat=q_hat, r_hat=r_hat,
                          supercritical=p > p_c, needs_higher_integrability=p <= p_c,
                          pi=pi, d=d, e=e, moser_sigma=sigma, scaling=scaling)


def validate_exponents(params: Parameters) -> ExponentReport:
    return exponent_report(params.p, params.n, params.q, params.r, params.beta0)


# ---------------------------------------------------------------------------
# scalar profiles g_s
# ---------------------------------------------------------------------------

class Profile:
    """A positive profile g on (0, inf) with derivative and antiderivative."""

    def __call__(self, sigma):
        raise NotImplementedError

    def deriv(self, sigma):
        raise NotImplementedError

    def half_integral(self, eps2, sigma):
        """``0.5 * int_0^sigma g(eps2 + s) ds``, elementwise."""
        eps2 = np.broadcast_to(np.asarray(eps2, dtype=float), np.shape(sigma))
        sig = np.asarray(sigma, dtype=float)
        out = np.empty(sig.shape)
        for idx in np.ndindex(sig.shape):
            val, err = integrate.quad(lambda s: float(self(eps2[idx] + s)), 0.0, float(sig[idx]),
                                      limit=200)
            if not np.isfinite(val) or err > 1e-8 * max(1.0, abs(val)):
                raise QuadratureFailure(f"quadrature of profile failed on [0, {sig[idx]}]")
            out[idx] = 0.5 * val
        return out


@dataclass(frozen=True)
class PowerProfile(Profile):
    """``g(sigma) = sigma**(s/2 - 1)``."""
    s: float

    def __call__(self, sigma):
        return np.power(sigma, self.s / 2.0 - 1.0)

    def deriv(self, sigma):
        k = self.s / 2.0 - 1.0
        return k * np.power(sigma, k - 1.0)

    def second(self, sigma):
        k = self.s / 2.0 - 1.0
        return k * (k - 1.0) * np.power(sigma, k - 2.0)

    def half_integral(self, eps2, sigma):
        # (1/s)[(eps2+sigma)^{s/2} - eps2^{s/2}], written to avoid cancellation
        h = self.s / 2.0
        eps2 = np.asarray(eps2, dtype=float)
        sigma = np.asarray(sigma, dtype=float)
        return np.power(eps2, h) * np.expm1(h * np.log1p(sigma / eps2)) / self.s


@dataclass(frozen=True)
class TableProfile(Profile):
    """Piecewise-linear interpolation of tabulated values; constant beyond the ends."""
    sigma: tuple
    values: tuple

    def __post_init__(self):
        if len(self.sigma) < 2 or len(self.sigma) != len(self.values):
            raise DomainError("table profile needs >= 2 matching (sigma, value) pairs")
        if np.any(np.diff(self.sigma) <= 0):
            raise DomainError("table sigma values must be strictly increasing")
        if min(self.values) <= 0:
            raise DomainError("table profile values must be positive")

    def __call__(self, sigma):
        return np.interp(sigma, self.sigma, self.values)

    def deriv(self, sigma):
        xs, ys = np.asarray(self.sigma), np.asarray(self.values)
        slopes = np.diff(ys) / np.diff(xs)
        idx = np.searchsorted(xs, sigma, side="right") - 1
        inside = (idx >= 0) & (idx < len(slopes))
        return np.where(inside, slopes[np.clip(idx, 0, len(slopes) - 1)], 0.0)

    def _antiderivative(self, x):
        xs, ys = np.asarray(self.sigma), np.asarray(self.values)
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (ys[1:] + ys[:-1]) * np.diff(xs))])
        x = np.asarray(x, dtype=float)
        below = np.minimum(x - xs[0], 0.0) * ys[0]
        above = np.maximum(x - xs[-1], 0.0) * ys[-1]
        xc = np.clip(x, xs[0], xs[-1])
        idx = np.clip(np.searchsorted(xs, xc, side="right") - 1, 0, len(xs) - 2)
        gx = np.interp(xc, xs, ys)
        inner = cum[idx] + 0.5 * (ys[idx] + gx) * (xc - xs[idx])
        return below + inner + above

    def half_integral(self, eps2, sigma):
        eps2 = np.asarray(eps2, dtype=float)
        return 0.5 * (self._antiderivative(eps2 + sigma) - self._antiderivative(eps2))


@dataclass(frozen=True)
class CallableProfile(Profile):
    fn: Callable
    dfn: Callable

    def __call__(self, sigma):
        return np.asarray(self.fn(sigma), dtype=float)

    def deriv(self, sigma):
        return np.asarray(self.dfn(sigma), dtype=float)


def modulus_slope(profile: PowerProfile, c1: float, c2: float) -> float:
    """Slope of the linear modulus of continuity of ``g'`` on ``[c1, c2]``."""
    if not 0 < c1 < c2:
        raise DomainError("need 0 < c1 < c2")
    # |g''| is monotone for power profiles, so the max sits at an endpoint
    return float(max(abs(profile.second(c1)), abs(profile.second(c2))))


# ---------------------------------------------------------------------------
# coefficient model
# ---------------------------------------------------------------------------

def constant_field(c: float) -> Field:
    def rule(X, t):
        return np.full(np.shape(X)[0], float(c))
    return rule


def constant_gamma(matrix) -> Field:
    g = np.array(matrix, dtype=float)

    def rule(X, t):
        return np.broadcast_to(g, (np.shape(X)[0],) + g.shape).copy()
    return rule


def rotating_gamma(omega: float, a: float = 2.0, b: float = 0.5) -> Field:
    def rule(X, t):
        c, s = math.cos(omega * t), math.sin(omega * t)
        R = np.array([[c, -s], [s, c]])
        g = R @ np.diag([a, b]) @ R.T
        return np.broadcast_to(g, (np.shape(X)[0], 2, 2)).copy()
    return rule


@dataclass(frozen=True)
class CoefficientModel:
    n: int
    a1: Field
    ap: Field
    gamma: Field
    g1: Profile
    gp: Profile
    gamma0: float
    Gamma0: float
    kappa0: float
    descriptor: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not 0 < self.gamma0 < 1:
            raise DomainError(f"gamma0 must lie in (0, 1), got {self.gamma0}")
        if not self.Gamma0 > 1:
            raise DomainError(f"Gamma0 must exceed 1, got {self.Gamma0}")
        if not self.kappa0 > 0:
            raise DomainError(f"kappa0 must be positive, got {self.kappa0}")

    @property
    def lambda0(self) -> float:
        return self.kappa0 / self.Gamma0

    def evaluate(self, X, t):
        """Return ``(a1, ap, gamma)`` at the points ``X`` (shape ``(m, n)``)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return (np.asarray(self.a1(X, t), dtype=float),
                np.asarray(self.ap(X, t), dtype=float),
                np.asarray(self.gamma(X, t), dtype=float))


_PRESET_RE = re.compile(r"^\s*([a-z\-]+)\s*(?:\((.*)\))?\s*$")


def parse_gamma_preset(text: str, n: int) -> tuple[Field, float, dict]:
    """Turn ``identity-gamma`` / ``diag-gamma(a,b)`` / ``rotating-gamma(w)`` into a rule.

    Returns the rule, a valid ellipticity constant and a JSON-able descriptor.
    """
    m = _PRESET_RE.match(text)
    if not m:
        raise DomainError(f"unrecognised gamma preset {text!r}")
    name, argstr = m.group(1), m.group(2)
    args = [float(a) for a in argstr.split(",")] if argstr and argstr.strip() else []
    if name == "identity-gamma" and not args:
        eig = np.ones(n)
        rule = constant_gamma(np.eye(n))
    elif name == "diag-gamma":
        if len(args) != n:
            raise DomainError(f"diag-gamma needs {n} entries, got {len(args)}")
        if min(args) <= 0:
            raise DomainError("diag-gamma entries must be positive")
        eig = np.array(args)
        rule = constant_gamma(np.diag(args))
    elif name == "rotating-gamma":
        if n != 2:
            raise DomainError("rotating-gamma needs n = 2")
        if len(args) not in (1, 3):
            raise DomainError("rotating-gamma takes (omega) or (omega, a, b)")
        omega = args[0]
        a, b = (args[1], args[2]) if len(args) == 3 else (2.0, 0.5)
        if min(a, b) <= 0:
            raise DomainError("rotating-gamma eigenvalues must be positive")
        eig = np.array([a, b])
        rule = rotating_gamma(omega, a, b)
    else:
        raise DomainError(f"unrecognised gamma preset {text!r}")
    gamma0 = float(min(eig.min(), 1.0 / eig.max(), 0.5))
    return rule, gamma0, {"gamma": name, "gamma_args": args}


def make_model(n: int = 2, p: float = 2.0, gamma: str = "identity-gamma", a1: float = 1.0,
               ap: float = 1.0, Gamma0: float = 4.0, kappa0: Optional[float] = None,
               gamma0: Optional[float] = None, gp: Optional[Profile] = None,
               g1: Optional[Profile] = None) -> CoefficientModel:
    """Build a coefficient model from presets (default profiles are power laws)."""
    rule, g0, desc = parse_gamma_preset(gamma, n)
    gp = PowerProfile(p) if gp is None else gp
    g1 = PowerProfile(1.0) if g1 is None else g1
    if kappa0 is None:
        if not isinstance(gp, PowerProfile):
            raise DomainError("kappa0 must be given for non-power profiles")
        kappa0 = min(1.0, p - 1.0)
    desc = dict(desc, n=n, p=p, a1=a1, ap=ap, Gamma0=Gamma0, kappa0=kappa0,
                gp=repr(gp), g1=repr(g1))
    return CoefficientModel(n=n, a1=constant_field(a1), ap=constant_field(ap), gamma=rule,
                            g1=g1, gp=gp, gamma0=g0 if gamma0 is None else gamma0,
                            Gamma0=Gamma0, kappa0=kappa0, descriptor=desc)


# ---------------------------------------------------------------------------
# structural validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SamplingPlan:
    sigma: tuple = tuple(np.logspace(-8, 8, 161))
    eps: tuple = tuple(2.0 ** -np.arange(1, 21))
    points: int = 64
    box: tuple = ((0.0, 1.0), (0.0, 1.0))
    t_range: tuple = (0.0, 1.0)
    seed: int = 0
    fd_step: float = 1e-6

    def space_time_points(self, n: int):
        rng = np.random.default_rng(self.seed)
        box = np.array(self.box[:n], dtype=float)
        X = box[:, 0] + (box[:, 1] - box[:, 0]) * rng.random((self.points, n))
        T = self.t_range[0] + (self.t_range[1] - self.t_range[0]) * rng.random(self.points)
        return X, T


@dataclass
class StructureCheck:
    name: str
    margin: float
    witness: dict
    passed: bool


@dataclass
class StructureReport:
    checks: list
    constants: dict

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name) -> StructureCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


_RTOL = 1e-12


def _profile_checks(g: Profile, s: float, lower: float, Gamma0: float, plan: SamplingPlan,
                    label: str):
    sig = np.concatenate([[0.0], np.asarray(plan.sigma)])
    eps = np.asarray(plan.eps)
    S, E = np.meshgrid(sig, eps, indexing="ij")
    arg = E ** 2 + S
    lhs = g(arg) + 2.0 * S * np.minimum(0.0, g.deriv(arg))
    ratio = lhs / arg ** (s / 2.0 - 1.0)
    k = np.unravel_index(np.argmin(ratio), ratio.shape)
    ell = StructureCheck(
        name=f"{label}_ellipticity", margin=float(ratio[k] - lower),
        witness={"sigma": float(S[k]), "eps": float(E[k])},
        passed=bool(ratio[k] >= lower * (1 - _RTOL) - _RTOL * (lower == 0)))

    sp = np.asarray(plan.sigma)
    grow = (g(sp) + sp * np.abs(g.deriv(sp))) / sp ** (s / 2.0 - 1.0)
    j = int(np.argmax(grow))
    gro = StructureCheck(name=f"{label}_growth", margin=float(Gamma0 - grow[j]),
                         witness={"sigma": float(sp[j])},
                         passed=bool(grow[j] <= Gamma0 * (1 + _RTOL)))
    return ell, gro, float(ratio[k]), float(grow[j])


def validate_structure(model: CoefficientModel, p: float, samples: Optional[SamplingPlan] = None,
                       strict: bool = True) -> StructureReport:
    """Sample the structural inequalities on the coefficient model.

    Raises :class:`StructureViolation` on the first failed check when ``strict``.
    """
    plan = samples or SamplingPlan()
    n = model.n
    checks = []

    ell_p, gro_p, kappa_meas, gp_growth = _profile_checks(model.gp, p, model.kappa0,
                                                          model.Gamma0, plan, "gp")
    ell_1, gro_1, _, g1_growth = _profile_checks(model.g1, 1.0, 0.0, model.Gamma0, plan, "g1")
    checks += [ell_p, gro_p, ell_1, gro_1]

    X, T = plan.space_time_points(n)
    lam_min, lam_max, asym = np.inf, -np.inf, 0.0
    bound_worst, bound_witness = -np.inf, {}
    a1_min, ap_min = np.inf, np.inf
    h = plan.fd_step
    for x, t in zip(X, T):
        a1, ap, G = model.evaluate(x[None, :], t)
        G = G[0]
        asym = max(asym, float(np.max(np.abs(G - G.T))))
        w = np.linalg.eigvalsh(0.5 * (G + G.T))
        lam_min, lam_max = min(lam_min, w[0]), max(lam_max, w[-1])
        a1_min, ap_min = min(a1_min, float(a1[0])), min(ap_min, float(ap[0]))

        # central differences for the Lipschitz parts of the bound on coefficients
        grad_a1 = grad_ap = 0.0
        grad_g = np.zeros_like(G)
        for k in range(n):
            e = np.zeros(n)
            e[k] = h
            a1p, app, Gp = model.evaluate((x + e)[None, :], t)
            a1m, apm, Gm = model.evaluate((x - e)[None, :], t)
            grad_a1 += ((a1p[0] - a1m[0]) / (2 * h)) ** 2
            grad_ap += ((app[0] - apm[0]) / (2 * h)) ** 2
            grad_g += ((Gp[0] - Gm[0]) / (2 * h)) ** 2
        _, _, Gtp = model.evaluate(x[None, :], t + h)
        _, _, Gtm = model.evaluate(x[None, :], t - h)
        dt_g = np.abs((Gtp[0] - Gtm[0]) / (2 * h))
        total = (a1[0] + ap[0] + math.sqrt(grad_a1) + math.sqrt(grad_ap) + np.max(np.abs(G))
                 + float(np.max(np.sqrt(grad_g))) + float(np.max(dt_g)))
        if total > bound_worst:
            bound_worst, bound_witness = float(total), {"x": x.tolist(), "t": float(t)}

    g0 = model.gamma0
    checks.append(StructureCheck(
        name="gamma_ellipticity", margin=float(min(lam_min - g0, 1.0 / g0 - lam_max)),
        witness={"lambda_min": float(lam_min), "lambda_max": float(lam_max)},
        passed=bool(lam_min >= g0 * (1 - _RTOL) and lam_max <= (1 + _RTOL) / g0)))
    checks.append(StructureCheck(name="gamma_symmetry", margin=-asym, witness={},
                                 passed=asym <= 1e-12))
    checks.append(StructureCheck(
        name="coefficient_bounds", margin=float(model.Gamma0 - bound_worst),
        witness=bound_witness, passed=bool(bound_worst <= model.Gamma0 * (1 + 1e-6))))
    checks.append(StructureCheck(
        name="coefficient_positivity", margin=float(min(a1_min, ap_min - 1.0 / model.Gamma0)),
        witness={"a1_min": a1_min, "ap_min": ap_min},
        passed=bool(a1_min >= 0 and ap_min >= (1 - _RTOL) / model.Gamma0)))

    constants = {"kappa0": kappa_meas, "gp_growth": gp_growth, "g1_growth": g1_growth,
                 "gamma0": float(min(lam_min, 1.0 / lam_max)), "lambda0": model.lambda0,
                 "coefficient_bound": bound_worst}
    report = StructureReport(checks=checks, constants=constants)
    if strict:
        for c in checks:
            if not c.passed:
                raise StructureViolation(c.name, c.witness, c.margin)
    return report


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------

def gamma_inner(G, a, b):
    """``<a|b>_gamma`` for stacks: ``G`` (..., n, n), ``a``/``b`` (..., N, n)."""
    return np.einsum("...ia,...ab,...ib->...", a, G, b)


def gamma_norm(model: CoefficientModel, x, t, zeta) -> float:
    zeta = np.asarray(zeta, dtype=float)
    if zeta.ndim == 1:
        zeta = zeta[None, :]
    _, _, G = model.evaluate(np.asarray(x, dtype=float)[None, :], t)
    return float(math.sqrt(max(gamma_inner(G[0], zeta, zeta), 0.0)))


@dataclass(frozen=True)
class ForcingTerm:
    """Vector forcing ``f(X, t) -> (m, N)``; ``descriptor`` identifies it for hashing."""
    rule: Callable
    N: int = 1
    descriptor: dict = field(default_factory=dict, compare=False)

    def __call__(self, X, t):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        val = np.asarray(self.rule(X, t), dtype=float)
        if val.ndim == 1:
            val = val[:, None]
        return np.broadcast_to(val, (X.shape[0], self.N)).copy()


def constant_forcing(c, N: int = 1) -> ForcingTerm:
    c = np.broadcast_to(np.asarray(c, dtype=float), (N,)).copy()

    def rule(X, t):
        return np.broadcast_to(c, (np.shape(X)[0], N))
    return ForcingTerm(rule=rule, N=N, descriptor={"kind": "constant", "value": c.tolist()})


def time_forcing(fn: Callable[[float], float], N: int = 1, descriptor=None) -> ForcingTerm:
    """Spatially uniform forcing ``f(t)`` applied to every component."""
    def rule(X, t):
        return np.full((np.shape(X)[0], N), float(fn(t)))
    return ForcingTerm(rule=rule, N=N, descriptor=descriptor or {"kind": "time", "fn": repr(fn)})


def lq_lr_norm(f: ForcingTerm, mesh, q: float, r: float, times: Sequence[float]) -> float:
    """Mixed ``L^r(0,T; L^q)`` norm with one-point element quadrature in space.

    ``times`` are the right end points ``t_1 < ... < t_K`` of the time slices
    (starting from 0); each slice is weighted by its length.
    """
    times = np.asarray(times, dtype=float)
    if times.size == 0:
        return 0.0
    widths = np.diff(np.concatenate([[0.0], times]))
    vols = mesh.volumes
    slice_norms = np.empty(times.size)
    for k, t in enumerate(times):
        mag = np.linalg.norm(f(mesh.centroids, t), axis=1)
        if math.isinf(q):
            slice_norms[k] = mag.max() if mag.size else 0.0
        else:
            slice_norms[k] = float(np.sum(vols * mag ** q)) ** (1.0 / q)
    if math.isinf(r):
        return float(slice_norms.max())
    return float(np.sum(widths * slice_norms ** r) ** (1.0 / r))
