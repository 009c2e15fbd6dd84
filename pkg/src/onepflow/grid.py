"""Structured simplicial meshes of boxes, P1 gradients, quadrature and assembly.

Every cell of the tensor grid is split into ``n!`` simplices (intervals in 1D,
two triangles along the main diagonal in 2D).  Node ``(i, j)`` of a 2D grid
has index ``j * (nx + 1) + i``.
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DomainError, NonSPD, SizeOverflow

MAX_NODES = 4_000_000


@dataclass(frozen=True, eq=False)
class Mesh:
    box: tuple
    shape: tuple
    nodes: np.ndarray       # (n_nodes, n)
    elements: np.ndarray    # (n_elem, n + 1)
    boundary: np.ndarray    # sorted boundary node indices
    volumes: np.ndarray     # (n_elem,)
    grads: np.ndarray       # (n_elem, n + 1, n) shape-function gradients
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return self.nodes.shape[1]

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def h(self) -> float:
        return max((hi - lo) / k for (lo, hi), k in zip(self.box, self.shape))

    @property
    def centroids(self) -> np.ndarray:
        c = self._cache.get("centroids")
        if c is None:
            c = self.nodes[self.elements].mean(axis=1)
            self._cache["centroids"] = c
        return c

    @property
    def interior(self) -> np.ndarray:
        c = self._cache.get("interior")
        if c is None:
            mask = np.ones(self.n_nodes, dtype=bool)
            mask[self.boundary] = False
            c = np.flatnonzero(mask)
            self._cache["interior"] = c
        return c

    @property
    def lumped_mass(self) -> np.ndarray:
        m = self._cache.get("mass")
        if m is None:
            k = self.n + 1
            m = np.bincount(self.elements.ravel(), weights=np.repeat(self.volumes / k, k),
                            minlength=self.n_nodes)
            self._cache["mass"] = m
        return m

    def descriptor(self) -> dict:
        return {"box": [list(b) for b in self.box], "shape": list(self.shape)}

    def same_discretization(self, other: "Mesh") -> bool:
        return self.box == other.box and self.shape == other.shape

    def element_load(self, values: np.ndarray) -> np.ndarray:
        """Nodal load from per-element values (one-point quadrature), shape (n_nodes, N)."""
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        k = self.n + 1
        w = (self.volumes / k)[:, None] * values
        out = np.zeros((self.n_nodes, values.shape[1]))
        for a in range(k):
            np.add.at(out, self.elements[:, a], w)
        return out


def build_mesh(box: Sequence, resolution, max_nodes: int = MAX_NODES) -> Mesh:
    box = tuple((float(lo), float(hi)) for lo, hi in box)
    n = len(box)
    if n not in (1, 2):
        raise DomainError(f"only 1D and 2D boxes are supported, got {n} axes")
    shape = (int(resolution),) * n if np.isscalar(resolution) else tuple(int(r) for r in resolution)
    if len(shape) != n:
        raise DomainError("resolution must give one entry per axis")
    if min(shape) < 2:
        raise DomainError(f"resolution >= 2 required per axis, got {shape}")
    for lo, hi in box:
        if not hi > lo:
            raise DomainError(f"degenerate box axis ({lo}, {hi})")
    n_nodes = math.prod(k + 1 for k in shape)
    if n_nodes > max_nodes:
        raise SizeOverflow(f"{n_nodes} nodes exceed the cap of {max_nodes}")

    axes = [np.linspace(lo, hi, k + 1) for (lo, hi), k in zip(box, shape)]
    if n == 1:
        nodes = axes[0][:, None]
        i = np.arange(shape[0])
        elements = np.stack([i, i + 1], axis=1)
        boundary = np.array([0, shape[0]])
    else:
        nx, ny = shape
        X, Y = np.meshgrid(axes[0], axes[1])  # row j = y index
        nodes = np.stack([X.ravel(), Y.ravel()], axis=1)
        jj, ii = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
        v00 = (jj * (nx + 1) + ii).ravel()
        v10, v01, v11 = v00 + 1, v00 + nx + 1, v00 + nx + 2
        lower = np.stack([v00, v10, v11], axis=1)
        upper = np.stack([v00, v11, v01], axis=1)
        elements = np.stack([lower, upper], axis=1).reshape(-1, 3)
        jb, ib = np.divmod(np.arange(n_nodes), nx + 1)
        boundary = np.flatnonzero((ib == 0) | (ib == nx) | (jb == 0) | (jb == ny))

    P = nodes[elements]                       # (E, n+1, n)
    B = P[:, 1:, :] - P[:, :1, :]             # rows are edge vectors
    det = np.linalg.det(B)
    volumes = np.abs(det) / math.factorial(n)
    if np.any(volumes <= 0):
        raise DomainError("degenerate element produced")
    # gradients of barycentric coordinates: grad(lambda_k), k >= 1, are rows of B^{-T}
    Binv = np.linalg.inv(B)                   # (E, n, n)
    g_rest = np.transpose(Binv, (0, 2, 1))
    g0 = -g_rest.sum(axis=1, keepdims=True)
    grads = np.concatenate([g0, g_rest], axis=1)
    return Mesh(box=box, shape=shape, nodes=nodes, elements=elements, boundary=boundary,
                volumes=volumes, grads=grads)


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class VectorField:
    mesh: Mesh
    values: np.ndarray  # (n_nodes, N)
    time: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != self.mesh.n_nodes:
            raise DomainError(f"expected {self.mesh.n_nodes} nodal rows, got {v.shape[0]}")
        if not np.all(np.isfinite(v)):
            raise DomainError("vector field has non-finite entries")
        object.__setattr__(self, "values", v)

    @property
    def N(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_function(cls, mesh: Mesh, fn, time: float = 0.0, N: Optional[int] = None):
        vals = np.asarray(fn(mesh.nodes), dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if N is not None and vals.shape[1] != N:
            vals = np.broadcast_to(vals, (mesh.n_nodes, N)).copy()
        return cls(mesh, vals, time)


@dataclass(frozen=True, eq=False)
class GradientField:
    mesh: Mesh
    values: np.ndarray  # (n_elem, N, n)
    time: float = 0.0


def gradient_values(mesh: Mesh, values: np.ndarray) -> np.ndarray:
    """Per-element gradients ``(E, N, n)`` of nodal values ``(n_nodes, N)``."""
    U = values[mesh.elements]                       # (E, n+1, N)
    return np.einsum("eaj,eak->ejk", U, mesh.grads)


def element_gradient(u: VectorField) -> GradientField:
    return GradientField(u.mesh, gradient_values(u.mesh, u.values), u.time)


def integrate(values, mesh: Mesh, s: float = 1.0) -> float:
    """``L^s`` norm of per-element samples (absolute values; ``s=inf`` gives the max)."""
    vals = np.abs(np.asarray(values, dtype=float))
    if vals.ndim > 1:
        vals = np.linalg.norm(vals.reshape(vals.shape[0], -1), axis=1)
    if math.isinf(s):
        return float(vals.max()) if vals.size else 0.0
    if s < 1:
        raise DomainError("s must lie in [1, inf]")
    return float(np.sum(mesh.volumes * vals ** s) ** (1.0 / s))


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

def _pattern(mesh: Mesh, N: int = 1):
    """COO -> CSR scatter map for element matrices of size ``((n+1)N)^2``."""
    key = ("pattern", N)
    cached = mesh._cache.get(key)
    if cached is not None:
        return cached
    k = mesh.n + 1
    dofs = (mesh.elements[:, :, None] * N + np.arange(N)[None, None, :]).reshape(-1, k * N)
    size = k * N
    rows = np.repeat(dofs, size, axis=1).ravel()
    cols = np.tile(dofs, (1, size)).ravel()
    ndof = mesh.n_nodes * N
    probe = sp.csr_matrix((np.arange(1, rows.size + 1, dtype=float), (rows, cols)),
                          shape=(ndof, ndof))
    probe.sum_duplicates()
    # position of every COO entry inside the CSR data array
    lin = rows.astype(np.int64) * ndof + cols
    csr_lin = (np.repeat(np.arange(ndof), np.diff(probe.indptr)).astype(np.int64) * ndof
               + probe.indices)
    where = np.searchsorted(csr_lin, lin)
    cached = (probe.indptr.copy(), probe.indices.copy(), where, ndof)
    mesh._cache[key] = cached
    return cached


def scatter(mesh: Mesh, local: np.ndarray, N: int = 1) -> sp.csr_matrix:
    """Assemble element matrices ``(E, (n+1)N, (n+1)N)`` into a CSR matrix."""
    indptr, indices, where, ndof = _pattern(mesh, N)
    data = np.bincount(where, weights=local.ravel(), minlength=indices.size)
    return sp.csr_matrix((data, indices.copy(), indptr.copy()), shape=(ndof, ndof))


def geometric_local(mesh: Mesh, gamma: np.ndarray) -> np.ndarray:
    """``vol * grad(phi_a) . gamma grad(phi_b)`` per element, ``gamma`` (E, n, n)."""
    return mesh.volumes[:, None, None] * np.einsum("eak,ekl,ebl->eab", mesh.grads, gamma,
                                                   mesh.grads)


def _spd_probe(K: sp.csr_matrix, mesh: Mesh, floor: float, seed: int = 0):
    interior = mesh.interior
    if interior.size == 0:
        return
    Kii = K[interior][:, interior]
    rng = np.random.default_rng(seed)
    probes = [np.ones(interior.size)] + [rng.standard_normal(interior.size) for _ in range(3)]
    for v in probes:
        curv = float(v @ (Kii @ v)) / float(v @ v)
        if not curv > floor:
            raise NonSPD(f"non-positive curvature {curv:.3e} detected in frozen operator")


def assemble_frozen_operator(mesh: Mesh, model, params, mu_field, t: float,
                             probe: bool = True, spd_floor: float = 1e-14) -> sp.csr_matrix:
    """Scalar stiffness block for ``int gamma mu grad(u) . grad(phi)``.

    The system operator is this block acting identically on each of the N
    components.  With ``probe`` the boundary-constrained block is checked for
    positive curvature.
    """
    mu = np.asarray(mu_field, dtype=float)
    if mu.shape != (mesh.n_elements,):
        raise DomainError(f"mu_field must have one value per element ({mesh.n_elements})")
    if not np.all(np.isfinite(mu)) or np.any(mu <= 0):
        raise NonSPD("diffusivity must be finite and positive on every element")
    _, _, gamma = model.evaluate(mesh.centroids, t)
    K = scatter(mesh, mu[:, None, None] * geometric_local(mesh, gamma))
    if probe:
        _spd_probe(K, mesh, spd_floor)
    return K


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"ONEPCKPT"
_VERSION = 1


def write_checkpoint(path, field: VectorField) -> None:
    """Little-endian binary: header (mesh descriptor, time, N) + row-major node values."""
    mesh = field.mesh
    n, N = mesh.n, field.N
    header = _MAGIC + struct.pack("<III", _VERSION, n, N)
    header += struct.pack(f"<{n}I", *mesh.shape)
    header += struct.pack(f"<{2 * n}d", *[v for b in mesh.box for v in b])
    header += struct.pack("<d", field.time)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())


def read_checkpoint(path, mesh: Optional[Mesh] = None) -> VectorField:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != _MAGIC:
        raise DomainError(f"{path} is not a checkpoint file")
    off = 8
    version, n, N = struct.unpack_from("<III", data, off)
    off += 12
    if version != _VERSION:
        raise DomainError(f"unsupported checkpoint version {version}")
    shape = struct.unpack_from(f"<{n}I", data, off)
    off += 4 * n
    flat = struct.unpack_from(f"<{2 * n}d", data, off)
    off += 16 * n
    (time,) = struct.unpack_from("<d", data, off)
    off += 8
    box = tuple((flat[2 * i], flat[2 * i + 1]) for i in range(n))
    if mesh is None:
        mesh = build_mesh(box, shape)
    elif mesh.box != box or mesh.shape != tuple(shape):
        raise DomainError("checkpoint mesh does not match the supplied mesh")
    values = np.frombuffer(data, dtype="<f8", offset=off).reshape(mesh.n_nodes, N)
    return VectorField(mesh, values.astype(float), time)


def write_csv(path, field: VectorField) -> None:
    mesh = field.mesh
    coords = ["x", "y"][: mesh.n]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node"] + coords + [f"u{j}" for j in range(field.N)])
        for i in range(mesh.n_nodes):
            w.writerow([i] + [repr(float(c)) for c in mesh.nodes[i]]
                       + [repr(float(v)) for v in field.values[i]])
