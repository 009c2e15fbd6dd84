"""Pointwise nonlinear algebra: regularised flux, limit flux, bilinear forms,
truncation maps and the energy density whose gradient is the flux.

Single-point functions take ``zeta`` as an ``(N, n)`` matrix.  The ``batch_*``
helpers work on element stacks ``(m, N, n)`` with coefficient stacks and are
what the solver and the diagnostics call.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize

from .errors import ConvergenceFailure, DomainError, SubgradientViolation, TruncationOrder
from .model import CoefficientModel, Parameters, gamma_inner


def _as_matrix(zeta) -> np.ndarray:
    z = np.asarray(zeta, dtype=float)
    return z[None, :] if z.ndim == 1 else z


def _point(model: CoefficientModel, x, t):
    a1, ap, G = model.evaluate(np.asarray(x, dtype=float)[None, :], t)
    return float(a1[0]), float(ap[0]), G[0]


# ---------------------------------------------------------------------------
# batch kernels
# ---------------------------------------------------------------------------

def batch_sigma(G, Z):
    """``|Z|_gamma^2`` per element; ``G`` (m, n, n), ``Z`` (m, N, n)."""
    return np.maximum(gamma_inner(G, Z, Z), 0.0)


def batch_mu(model: CoefficientModel, eps, a1, ap, sigma):
    """Scalar diffusivity ``a1 g1(eps^2+sigma) + ap gp(eps^2+sigma)``."""
    s = eps * eps + sigma
    return a1 * model.g1(s) + ap * model.gp(s)


def batch_dmu(model: CoefficientModel, eps, a1, ap, sigma):
    s = eps * eps + sigma
    return a1 * model.g1.deriv(s) + ap * model.gp.deriv(s)


def batch_energy(model: CoefficientModel, eps, a1, ap, sigma):
    e2 = eps * eps
    return a1 * model.g1.half_integral(e2, sigma) + ap * model.gp.half_integral(e2, sigma)


def batch_trunc(G, Z, eps, level):
    """``(v_eps - level)_+ Z / |Z|_gamma`` per element (zero where ``Z = 0``)."""
    sig = batch_sigma(G, Z)
    m = np.sqrt(sig)
    v = np.sqrt(eps * eps + sig)
    scale = np.divide(np.maximum(v - level, 0.0), m, out=np.zeros_like(m), where=m > 0)
    return scale[..., None, None] * Z


# ---------------------------------------------------------------------------
# fluxes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FluxSample:
    value: np.ndarray
    v_eps: float
    parts: tuple


def flux_A_eps(model: CoefficientModel, params: Parameters, x, t, zeta) -> FluxSample:
    a1, ap, G = _point(model, x, t)
    Z = _as_matrix(zeta)
    eps = params.eps
    sig = float(gamma_inner(G, Z, Z))
    s = eps * eps + sig
    A1 = a1 * float(model.g1(s)) * Z
    Ap = ap * float(model.gp(s)) * Z
    return FluxSample(value=A1 + Ap, v_eps=math.sqrt(s), parts=(A1, Ap))


def flux_A0(model: CoefficientModel, x, t, zeta, z_selection=None, tol: float = 1e-12):
    """Limit flux ``a1 Z + ap gp(|zeta|^2) zeta`` for a subgradient selection ``Z``.

    ``z_selection=None`` picks the canonical element: ``zeta/|zeta|`` away from
    the origin and ``0`` at the origin.
    """
    a1, ap, G = _point(model, x, t)
    Zeta = _as_matrix(zeta)
    norm = math.sqrt(max(float(gamma_inner(G, Zeta, Zeta)), 0.0))
    if z_selection is None:
        Zsel = Zeta / norm if norm > 0 else np.zeros_like(Zeta)
    else:
        Zsel = _as_matrix(z_selection)
        znorm = math.sqrt(max(float(gamma_inner(G, Zsel, Zsel)), 0.0))
        if znorm > 1 + tol:
            raise SubgradientViolation(f"|Z|_gamma = {znorm:.16g} exceeds 1")
        if norm > 0 and np.max(np.abs(Zsel - Zeta / norm)) > tol:
            raise SubgradientViolation("Z must equal zeta/|zeta|_gamma away from the origin")
    p_part = ap * float(model.gp(norm * norm)) * Zeta if norm > 0 else np.zeros_like(Zeta)
    return a1 * Zsel + p_part


# ---------------------------------------------------------------------------
# bilinear forms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BilinearEvaluator:
    """The three symmetric forms frozen at ``(x, t, zeta, eps)``."""
    zeta: np.ndarray
    G: np.ndarray
    eps: float
    a1: float
    ap: float
    g: tuple   # (g1, gp) at eps^2 + |zeta|^2
    dg: tuple  # their derivatives
    p: float

    @property
    def _lin(self):
        return self.a1 * self.g[0] + self.ap * self.g[1]

    @property
    def _rank1(self):
        return 2.0 * (self.a1 * self.dg[0] + self.ap * self.dg[1])

    def h(self, s: float) -> float:
        return (self.eps ** 2 + float(gamma_inner(self.G, self.zeta, self.zeta))) ** (s / 2 - 1)

    def B(self, xi, eta) -> float:
        xi, eta = _as_matrix(xi), _as_matrix(eta)
        gz = self.zeta @ self.G  # rows gamma zeta^i
        return float(self._lin * gamma_inner(self.G, xi, eta)
                     + self._rank1 * np.sum(gz * xi) * np.sum(gz * eta))

    def A(self, xi, eta) -> float:
        # xi[i, alpha, mu]; the rank-one term contracts alpha with gamma zeta^i
        xi, eta = np.asarray(xi, dtype=float), np.asarray(eta, dtype=float)
        G, gz = self.G, self.zeta @ self.G
        lin = np.einsum("iam,ab,mn,ibn->", xi, G, G, eta)
        wx = np.einsum("ia,iam->m", gz, xi)
        we = np.einsum("ia,iam->m", gz, eta)
        return float(self._lin * lin + self._rank1 * wx @ G @ we)

    def C(self, xi, eta) -> float:
        xi, eta = np.asarray(xi, dtype=float), np.asarray(eta, dtype=float)
        gz = self.zeta @ self.G
        return float(self._lin * xi @ self.G @ eta + self._rank1 * np.sum((gz @ xi) * (gz @ eta)))

    def norm2_A(self, xi) -> float:
        return float(np.einsum("iam,ab,mn,ibn->", xi, self.G, self.G, xi))

    def norm2_B(self, xi) -> float:
        xi = _as_matrix(xi)
        return float(gamma_inner(self.G, xi, xi))

    def norm2_C(self, xi) -> float:
        xi = np.asarray(xi, dtype=float)
        return float(xi @ self.G @ xi)


def bilinear_forms(model: CoefficientModel, params: Parameters, x, t, zeta) -> BilinearEvaluator:
    a1, ap, G = _point(model, x, t)
    Z = _as_matrix(zeta)
    s = params.eps ** 2 + float(gamma_inner(G, Z, Z))
    return BilinearEvaluator(zeta=Z, G=G, eps=params.eps, a1=a1, ap=ap,
                             g=(float(model.g1(s)), float(model.gp(s))),
                             dg=(float(model.g1.deriv(s)), float(model.gp.deriv(s))),
                             p=params.p)


def _gram(form, shape) -> np.ndarray:
    basis = np.eye(int(np.prod(shape))).reshape((-1,) + tuple(shape))
    return np.array([[form(a, b) for b in basis] for a in basis])


def sandwich_ratios(B: BilinearEvaluator) -> dict:
    """Extreme Rayleigh quotients of each form against its gamma norm.

    Returns ``{name: (lowest, highest)}`` for the forms ``A``, ``B`` and ``C``.
    """
    N, n = B.zeta.shape
    out = {}
    for name, form, norm, shape in (
            ("A", B.A, B.norm2_A, (N, n, n)), ("B", B.B, B.norm2_B, (N, n)),
            ("C", B.C, B.norm2_C, (n,))):
        def inner(a, b, norm=norm):
            return 0.5 * (norm(a + b) - norm(a) - norm(b))
        w = linalg.eigh(_gram(form, shape), _gram(inner, shape), eigvals_only=True)
        out[name] = (float(w[0]), float(w[-1]))
    return out


def estimate_upper_constant(model: CoefficientModel, p: float, eps_grid, samples: int = 2000,
                            seed: int = 0, N: int = 1) -> dict:
    """Sampled sup of ``F(xi, xi) / ((h_1 + h_p) |xi|^2)`` over the three forms, per eps.

    The same points ``(x, t, zeta)`` are reused for every eps so that the
    estimates are directly comparable.
    """
    rng = np.random.default_rng(seed)
    n = model.n
    X = rng.random((samples, n))
    T = rng.random(samples)
    Z = rng.normal(size=(samples, N, n)) * 10.0 ** rng.uniform(-6, 3, (samples, 1, 1))
    out = {}
    for eps in eps_grid:
        prm = _EpsOnly(p, float(eps))
        best = 0.0
        for x, t, z in zip(X, T, Z):
            B = bilinear_forms(model, prm, x, t, z)
            top = max(hi for _, hi in sandwich_ratios(B).values())
            best = max(best, top / (B.h(1.0) + B.h(p)))
        out[float(eps)] = best
    return out


@dataclass(frozen=True)
class _EpsOnly:
    p: float
    eps: float


# ---------------------------------------------------------------------------
# auxiliary maps
# ---------------------------------------------------------------------------

def map_G_p_eps(model: CoefficientModel, params: Parameters, x, t, zeta) -> np.ndarray:
    """``(eps^2 + |zeta|_gamma^2)^((p-1)/2) zeta``."""
    _, _, G = _point(model, x, t)
    Z = _as_matrix(zeta)
    s = params.eps ** 2 + float(gamma_inner(G, Z, Z))
    return s ** ((params.p - 1) / 2) * Z


def inverse_G_p_eps(model: CoefficientModel, params: Parameters, x, t, eta,
                    maxiter: int = 200) -> np.ndarray:
    _, _, G = _point(model, x, t)
    E = _as_matrix(eta)
    target = math.sqrt(max(float(gamma_inner(G, E, E)), 0.0))
    if target == 0:
        return np.zeros_like(E)
    eps2, expo = params.eps ** 2, (params.p - 1) / 2

    def phi(m):
        return (eps2 + m * m) ** expo * m - target

    # phi is increasing; bracket the root by doubling
    hi = 1.0
    while phi(hi) < 0:
        hi *= 2.0
        if hi > 1e300:
            raise ConvergenceFailure("could not bracket the inverse magnitude")
    try:
        m = optimize.brentq(phi, 0.0, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps,
                            maxiter=maxiter)
    except RuntimeError as exc:
        raise ConvergenceFailure(str(exc)) from exc
    return (m / target) * E


def trunc_gradient(model: CoefficientModel, params: Parameters, x, t, zeta,
                   level: float = 2.0) -> np.ndarray:
    """Truncated gradient ``(v_eps - level*delta)_+ zeta / |zeta|_gamma``.

    ``level`` is the multiple of ``params.delta`` (1 or 2).
    """
    if level not in (1, 2, 1.0, 2.0):
        raise DomainError("level must be 1 or 2 (multiples of delta)")
    cut = level * params.delta
    if params.eps >= cut:
        raise TruncationOrder(f"need eps < {level}*delta, got eps={params.eps}, delta={params.delta}")
    _, _, G = _point(model, x, t)
    Z = _as_matrix(zeta)
    return batch_trunc(G[None], Z[None], params.eps, cut)[0]


def energy_density(model: CoefficientModel, params: Parameters, x, t, zeta) -> float:
    """Energy whose zeta-derivative (gamma-contracted) is the regularised flux."""
    a1, ap, G = _point(model, x, t)
    Z = _as_matrix(zeta)
    sig = float(gamma_inner(G, Z, Z))
    return float(batch_energy(model, params.eps, a1, ap, np.array(sig)))
