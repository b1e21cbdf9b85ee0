"""Stabilized pressure-temperature finite elements for Darcy-Boussinesq flow.

Per element with nodal pressures ``p`` and temperatures ``t`` the residual is

    R_p = int c B^T (B p + a N t)
    R_t = int N*^T (rho0 cp u . grad T - Q) + int k B^T B t

with ``c = kappa/mu``, ``a = rho0 alpha g``, Darcy velocity
``u = -c (grad P + a T)`` at the quadrature points and the streamline-upwind
weight ``N* = N + tau u0^T B`` built from the centroid velocity ``u0``.
The linearization is exact, including the state dependence of ``tau``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import DIRICHLET, HEAT, LOCAL_OFFSETS, dof_map

_GP = 1.0 / np.sqrt(3.0)
_XI = 2.0 * LOCAL_OFFSETS - 1.0  # reference node coordinates in [-1, 1]^3


class GeometryError(ValueError):
    """Degenerate or inverted element."""


def _shape(xi):
    """Trilinear shape functions and reference gradients at one point."""
    f = 1.0 + _XI * np.asarray(xi)[None, :]
    N = 0.125 * f.prod(axis=1)
    dN = np.empty((8, 3))
    for d in range(3):
        others = [o for o in range(3) if o != d]
        dN[:, d] = 0.125 * _XI[:, d] * f[:, others[0]] * f[:, others[1]]
    return N, dN


@dataclass(frozen=True, eq=False)
class ElementGeometry:
    """Shape data of one hexahedron at the 2x2x2 Gauss points and centroid."""
    N: np.ndarray      # (8q, 8)
    B: np.ndarray      # (8q, 3, 8) physical gradients
    w: np.ndarray      # (8q,) weights times Jacobian determinant
    Nc: np.ndarray     # (8,)
    Bc: np.ndarray     # (3, 8)
    h: float

    @classmethod
    def from_coords(cls, coords):
        coords = np.asarray(coords, dtype=float)
        if coords.shape != (8, 3):
            raise GeometryError(f"expected (8, 3) corner coordinates, got {coords.shape}")
        pts = [np.array([a, b, c]) * _GP for c in (-1, 1) for b in (-1, 1) for a in (-1, 1)]
        Ns, Bs, ws = [], [], []
        for xi in pts + [np.zeros(3)]:
            N, dN = _shape(xi)
            jac = coords.T @ dN           # dx/dxi
            det = np.linalg.det(jac)
            if not det > 1e-14 * np.abs(coords).max() ** 3:
                raise GeometryError(f"non-positive Jacobian determinant {det:.3e}")
            Ns.append(N)
            Bs.append(np.linalg.solve(jac.T, dN.T))
            ws.append(det)
        h = float(np.linalg.norm(coords[6] - coords[0]))
        return cls(np.array(Ns[:8]), np.array(Bs[:8]), np.array(ws[:8]),
                   Ns[8], Bs[8], h)

    @classmethod
    def for_mesh(cls, mesh):
        return cls.from_coords(mesh.element_coords(0))

    @property
    def volume(self):
        return float(self.w.sum())


def stabilization_tau(u0, h_e):
    """tau = (4|u0|^2/h^2 + 16/h^4)^(-1/2), the upwind parameter.

    ``u0`` may be a single vector or an ``(n, 3)`` array.
    """
    u0 = np.asarray(u0, dtype=float)
    return (4.0 * np.sum(u0 * u0, axis=-1) / h_e**2 + 16.0 / h_e**4) ** -0.5


@dataclass
class KernelOutput:
    R: np.ndarray                  # (E, 16)
    J: np.ndarray | None = None    # (E, 16, 16)
    dR_dc: np.ndarray | None = None
    dR_dk: np.ndarray | None = None
    f: np.ndarray | None = None    # (E,) objective contributions
    df_ds: np.ndarray | None = None
    df_dc: np.ndarray | None = None


def element_kernel(geom, p, t, c, k, Q, params, jacobian=True, design=False,
                   objective=False, frozen_tau=False):
    """Vectorized element residual and derivatives for E elements sharing ``geom``.

    ``p, t`` are (E, 8); ``c = kappa/mu``, ``k`` and ``Q`` are (E,).
    """
    p = np.atleast_2d(p)
    t = np.atleast_2d(t)
    c = np.atleast_1d(np.asarray(c, dtype=float))
    k = np.atleast_1d(np.asarray(k, dtype=float))
    Q = np.broadcast_to(np.asarray(Q, dtype=float), c.shape)
    N, B, w, Nc, Bc, h = geom.N, geom.B, geom.w, geom.Nc, geom.Bc, geom.h
    a = params.buoyancy
    rc = params.rho0 * params.cp

    # centroid velocity and upwind parameter
    v0 = p @ Bc.T + (t @ Nc)[:, None] * a
    u0 = -c[:, None] * v0
    tau = stabilization_tau(u0, h)
    dtau = np.zeros_like(u0) if frozen_tau else (-4.0 / h**2) * tau[:, None] ** 3 * u0

    gP = np.einsum("qdj,ej->eqd", B, p)
    gT = np.einsum("qdj,ej->eqd", B, t)
    Tq = t @ N.T
    vq = gP + Tq[:, :, None] * a
    u = -c[:, None, None] * vq
    conv = rc * np.einsum("eqd,eqd->eq", u, gT)
    uB0 = np.einsum("ed,qdi->eqi", u0, B)
    Nstar = N[None] + tau[:, None, None] * uB0
    src = conv - Q[:, None]

    Bv = np.einsum("q,qdi,eqd->ei", w, B, vq)
    BgT = np.einsum("q,qdi,eqd->ei", w, B, gT)
    R = np.empty((len(c), 16))
    R[:, :8] = c[:, None] * Bv
    R[:, 8:] = np.einsum("q,eqi,eq->ei", w, Nstar, src) + k[:, None] * BgT
    out = KernelOutput(R)

    aB = np.einsum("d,qdi->qi", a, B)        # a . grad N_i at each point
    BtBc = np.einsum("qdi,dj->qij", B, Bc)
    dtau_Bc = dtau @ Bc                       # (E, 8)
    dtau_a = dtau @ a                         # (E,)

    if jacobian:
        K = np.einsum("q,qdi,qdj->ij", w, B, B)
        C = np.einsum("q,qi,qj->ij", w, aB, N)
        dconv_dp = -rc * c[:, None, None] * np.einsum("eqd,qdj->eqj", gT, B)
        dconv_dt = rc * (-c[:, None, None] * (gT @ a)[:, :, None] * N[None]
                         + np.einsum("eqd,qdj->eqj", u, B))
        ws = w[None, :] * src
        s_uB0 = np.einsum("eq,eqi->ei", ws, uB0)
        J = np.empty((len(c), 16, 16))
        J[:, :8, :8] = c[:, None, None] * K
        J[:, :8, 8:] = c[:, None, None] * C
        J[:, 8:, :8] = (np.einsum("q,eqi,eqj->eij", w, Nstar, dconv_dp)
                        - (c * tau)[:, None, None] * np.einsum("eq,qij->eij", ws, BtBc)
                        - c[:, None, None] * s_uB0[:, :, None] * dtau_Bc[:, None, :])
        J[:, 8:, 8:] = (np.einsum("q,eqi,eqj->eij", w, Nstar, dconv_dt)
                        - (c * tau)[:, None, None] * np.einsum("eq,qi->ei", ws, aB)[:, :, None] * Nc
                        - (c * dtau_a)[:, None, None] * s_uB0[:, :, None] * Nc
                        + k[:, None, None] * K)
        out.J = J

    if design:
        # d/dc at fixed state; u, u0 and conv are all proportional to c
        dNstar_dc = -(tau[:, None, None] * np.einsum("ed,qdi->eqi", v0, B)
                      + uB0 * (dtau * v0).sum(axis=1)[:, None, None])
        dconv_dc = -rc * np.einsum("eqd,eqd->eq", vq, gT)
        dR_dc = np.empty((len(c), 16))
        dR_dc[:, :8] = Bv
        dR_dc[:, 8:] = (np.einsum("q,eqi,eq->ei", w, Nstar, dconv_dc)
                        + np.einsum("q,eqi,eq->ei", w, dNstar_dc, src))
        dR_dk = np.zeros((len(c), 16))
        dR_dk[:, 8:] = BgT
        out.dR_dc, out.dR_dk = dR_dc, dR_dk

    if objective:
        tN = np.einsum("eqi,ei->eq", Nstar, t)
        out.f = Q * (tN @ w)
        t_uB0 = np.einsum("ei,eqi->eq", t, uB0)       # sum_i t_i u0.grad N_i
        t_aB = t @ aB.T                                 # sum_i t_i a.grad N_i
        wt_uB0 = t_uB0 @ w
        df = np.empty((len(c), 16))
        df[:, :8] = -Q[:, None] * (c[:, None] * (tau[:, None] * np.einsum("q,ei,qij->ej", w, t, BtBc)
                                                 + wt_uB0[:, None] * dtau_Bc))
        df[:, 8:] = Q[:, None] * (np.einsum("q,eqj->ej", w, Nstar)
                                  - c[:, None] * (tau * (t_aB @ w) + wt_uB0 * dtau_a)[:, None] * Nc)
        out.df_ds = df
        tdN_dc = -(tau[:, None] * np.einsum("ei,ed,qdi->eq", t, v0, B)
                   + t_uB0 * (dtau * v0).sum(axis=1)[:, None])
        out.df_dc = Q * (tdN_dc @ w)
    return out


def _element_inputs(coords, s_e, kappa_e, k_e, params, Q_e):
    s_e = np.asarray(s_e, dtype=float)
    if s_e.shape != (16,):
        raise ValueError("element state must have 16 entries (8 pressures, 8 temperatures)")
    if not (kappa_e > 0 and k_e > 0):
        raise ValueError("element permeability and conductivity must be positive")
    geom = ElementGeometry.from_coords(coords)
    return geom, s_e[None, :8], s_e[None, 8:], np.array([kappa_e / params.mu]), np.array([k_e]), np.array([Q_e])


def element_residual(coords, s_e, kappa_e, k_e, params, Q_e=0.0):
    """16-entry residual [R_p; R_t] of a single element."""
    geom, p, t, c, k, Q = _element_inputs(coords, s_e, kappa_e, k_e, params, Q_e)
    return element_kernel(geom, p, t, c, k, Q, params, jacobian=False).R[0]


def element_jacobian(coords, s_e, kappa_e, k_e, params, Q_e=0.0, frozen_tau=False):
    geom, p, t, c, k, Q = _element_inputs(coords, s_e, kappa_e, k_e, params, Q_e)
    return element_kernel(geom, p, t, c, k, Q, params, frozen_tau=frozen_tau).J[0]


@dataclass(frozen=True, eq=False)
class MaterialField:
    """Per-element physical properties fed to assembly."""
    kappa: np.ndarray
    k: np.ndarray
    Q: np.ndarray


@dataclass(eq=False)
class SparseSystem:
    """Newton system with Dirichlet rows and columns eliminated.

    ``matrix`` is the Jacobian with fixed rows/columns replaced by identity,
    ``residual`` the residual with fixed entries replaced by ``s - s_bar``.
    ``full_residual`` keeps the unconstrained residual (boundary reactions).
    """
    matrix: sp.csr_matrix | None
    residual: np.ndarray
    full_residual: np.ndarray
    free: np.ndarray

    @property
    def rhs(self):
        return -self.residual


class Assembler:
    """Assembly of the global residual, Jacobian and design derivatives.

    The CSR pattern and the scatter map from element entries to CSR slots are
    built once; element blocks are summed with ``np.bincount`` so the result
    does not depend on ``workers``.
    """

    def __init__(self, mesh, tags, params, workers=1, chunk=4096, frozen_tau=False):
        self.mesh = mesh
        self.tags = tags
        self.params = params
        self.dofs = dof_map(mesh)
        self.geom = ElementGeometry.for_mesh(mesh)
        self.edofs = self.dofs.element_dofs(mesh)
        self.workers = max(1, int(workers))
        self.chunk = int(chunk)
        self.frozen_tau = frozen_tau
        n = self.dofs.n_dofs
        fixed = np.zeros(n, dtype=bool)
        fixed[self.dofs.t(tags.dirichlet_t_nodes())] = True
        fixed[self.dofs.p(tags.pressure_pins)] = True
        self.fixed = fixed
        self.free = ~fixed
        self.prescribed = np.zeros(n)
        self._pattern = None

    @property
    def n_dofs(self):
        return self.dofs.n_dofs

    def with_params(self, params):
        """Shallow copy sharing the cached sparsity pattern."""
        other = object.__new__(Assembler)
        other.__dict__.update(self.__dict__)
        other.params = params
        return other

    def _build_pattern(self):
        n = self.n_dofs
        rows = np.repeat(self.edofs, 16, axis=1).ravel()
        cols = np.tile(self.edofs, (1, 16)).ravel()
        keys = rows.astype(np.int64) * n + cols
        ukeys, inverse = np.unique(keys, return_inverse=True)
        r, cc = np.divmod(ukeys, n)
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(indptr, r + 1, 1)
        indptr = np.cumsum(indptr)
        keep = (self.free[r] & self.free[cc]).astype(float)
        fixed_diag = np.flatnonzero((r == cc) & self.fixed[r])
        self._pattern = (indptr, cc.astype(np.int32), inverse.astype(np.int64),
                         len(ukeys), keep, fixed_diag)
        return self._pattern

    def material(self, kappa, k):
        Q = np.where(self.tags.region == HEAT, self.params.Q, 0.0)
        return MaterialField(np.asarray(kappa, float), np.asarray(k, float), Q)

    def _run(self, state, mat, **flags):
        state = np.asarray(state, dtype=float)
        if state.shape != (self.n_dofs,):
            raise ValueError(f"state has {state.shape} entries, expected {self.n_dofs}")
        E = self.mesh.n_elements
        if any(np.shape(a) != (E,) for a in (mat.kappa, mat.k, mat.Q)):
            raise ValueError("material arrays must have one entry per element")
        if np.any(mat.kappa <= 0) or np.any(mat.k <= 0):
            raise ValueError("permeability and conductivity must be positive")
        se = state[self.edofs]
        c = mat.kappa / self.params.mu
        bounds = [(s, min(s + self.chunk, E)) for s in range(0, E, self.chunk)]

        def work(b):
            s, e = b
            return element_kernel(self.geom, se[s:e, :8], se[s:e, 8:], c[s:e], mat.k[s:e],
                                  mat.Q[s:e], self.params, frozen_tau=self.frozen_tau, **flags)

        if self.workers > 1 and len(bounds) > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                parts = list(pool.map(work, bounds))
        else:
            parts = [work(b) for b in bounds]

        def cat(name):
            vals = [getattr(o, name) for o in parts]
            return None if vals[0] is None else np.concatenate(vals)

        return KernelOutput(*(cat(f) for f in ("R", "J", "dR_dc", "dR_dk", "f", "df_ds", "df_dc")))

    def scatter(self, element_vectors):
        return np.bincount(self.edofs.ravel(), weights=np.asarray(element_vectors).ravel(),
                           minlength=self.n_dofs)

    def _matrix(self, Je, eliminate=True):
        indptr, indices, inverse, nnz, keep, fixed_diag = self._pattern or self._build_pattern()
        data = np.bincount(inverse, weights=Je.reshape(-1), minlength=nnz)
        if eliminate:
            data *= keep
            data[fixed_diag] = 1.0
        return sp.csr_matrix((data, indices, indptr), shape=(self.n_dofs,) * 2)

    def residual(self, state, mat):
        out = self._run(state, mat, jacobian=False)
        return self._system(state, self.scatter(out.R), None)

    def assemble(self, state, mat, jacobian=True):
        out = self._run(state, mat, jacobian=jacobian)
        A = self._matrix(out.J) if jacobian else None
        return self._system(state, self.scatter(out.R), A)

    def raw_jacobian(self, state, mat):
        """Unconstrained global Jacobian (no Dirichlet elimination)."""
        return self._matrix(self._run(state, mat).J, eliminate=False)

    def _system(self, state, R_full, A):
        R = np.where(self.fixed, state - self.prescribed, R_full)
        return SparseSystem(A, R, R_full, self.free)

    def residual_norm(self, state, mat):
        return float(np.linalg.norm(self.residual(state, mat).residual))

    def compliance(self, state, mat):
        return float(self._run(state, mat, jacobian=False, objective=True).f.sum())

    def objective_and_state_gradient(self, state, mat):
        out = self._run(state, mat, jacobian=False, objective=True)
        return float(out.f.sum()), self.scatter(out.df_ds), out.df_dc

    def design_terms(self, state, mat, adjoint):
        """Per-element lambda^T dR_e/dkappa_e and lambda^T dR_e/dk_e."""
        out = self._run(state, mat, jacobian=False, design=True)
        lam_e = np.asarray(adjoint)[self.edofs]
        lam_dc = np.einsum("ei,ei->e", lam_e, out.dR_dc)
        lam_dk = np.einsum("ei,ei->e", lam_e, out.dR_dk)
        return lam_dc / self.params.mu, lam_dk

    def velocity(self, state, mat):
        return compute_velocity(state, mat.kappa, self.mesh, self.params, self.geom)

    def boundary_heat_outflow(self, state, mat):
        """Heat leaving through the Dirichlet-temperature boundary (consistent reactions)."""
        R = self.residual(state, mat).full_residual
        nodes = self.tags.dirichlet_t_nodes()
        return float(-R[self.dofs.t(nodes)].sum())


def assemble(mesh, tags, kappa, k, state, params, jacobian=True):
    """Convenience wrapper around :class:`Assembler` for one-off assemblies."""
    asm = Assembler(mesh, tags, params)
    return asm.assemble(state, asm.material(kappa, k), jacobian=jacobian)


def compute_velocity(state, kappa, mesh, params, geom=None):
    """Darcy velocity at element centroids, (n_elements, 3)."""
    geom = geom or ElementGeometry.for_mesh(mesh)
    dofs = dof_map(mesh)
    se = np.asarray(state)[dofs.element_dofs(mesh)]
    v0 = se[:, :8] @ geom.Bc.T + (se[:, 8:] @ geom.Nc)[:, None] * params.buoyancy
    return -(np.asarray(kappa) / params.mu)[:, None] * v0


def thermal_compliance(state, mesh, tags, params, kappa, k=None):
    """Sum over heat-source elements of the upwind-weighted source times temperature."""
    asm = Assembler(mesh, tags, params)
    k = np.full(mesh.n_elements, params.k_f) if k is None else k
    return asm.compliance(state, asm.material(kappa, k))


def design_derivative(asm, state, mat, adjoint, dkappa_dgamma, dk_dgamma, df_dc=None):
    """Per-element df/dgamma = explicit - lambda^T dR/dgamma, zero on passive elements."""
    lam_dkappa, lam_dk = asm.design_terms(state, mat, adjoint)
    grad = -(lam_dkappa * dkappa_dgamma + lam_dk * dk_dgamma)
    if df_dc is not None:
        grad = grad + df_dc / asm.params.mu * dkappa_dgamma
    grad[~asm.tags.design] = 0.0
    return grad
