"""Linear and nonlinear solvers for the coupled pressure-temperature system."""

from __future__ import annotations

import glob
import logging
import os
import sys
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)


class SolverFailure(RuntimeError):
    """A linear or nonlinear solve did not reach its tolerance."""

    def __init__(self, message, residual=None, report=None):
        super().__init__(message)
        self.residual = residual
        self.report = report


@dataclass
class LinearConfig:
    rtol: float = 1e-5
    max_iterations: int = 60      # Krylov iterations before refactorizing
    restart: int = 60
    # "lagged-lu": GMRES preconditioned with the LU factor of an earlier matrix
    # "direct": factorize every matrix; "ilu": incomplete LU; "amg": block
    # Gauss-Seidel with algebraic multigrid on the pressure and temperature blocks
    preconditioner: str = "lagged-lu"
    backend: str = "auto"         # "pardiso", "superlu" or "auto"

    def __post_init__(self):
        if not 0 < self.rtol < 1:
            raise ValueError("linear rtol must lie in (0, 1)")
        if self.preconditioner not in ("lagged-lu", "direct", "ilu", "amg"):
            raise ValueError(f"unknown preconditioner {self.preconditioner!r}")


@dataclass
class NewtonConfig:
    rtol: float = 1e-4
    atol: float = 1e-12
    max_iterations: int = 50
    damping_levels: int = 9        # theta in {1, 1/2, ..., 2^-(levels-1)}
    q_ramp: tuple = (1e-3, 1e-2, 1e-1, 1.0)

    def __post_init__(self):
        if not 0 < self.rtol < 1:
            raise ValueError("Newton rtol must lie in (0, 1)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


def _find_mkl():
    if os.environ.get("PYPARDISO_MKL_RT"):
        return
    for root in (sys.prefix, "/usr/local", "/usr"):
        hits = sorted(glob.glob(f"{root}/lib*/libmkl_rt.so*"))
        if hits:
            os.environ["PYPARDISO_MKL_RT"] = hits[0]
            return


def _pardiso_available():
    try:
        _find_mkl()
        import pypardiso  # noqa: F401
    except (ImportError, OSError):
        return False
    return True


class _PardisoFactor:
    def __init__(self, A):
        from pypardiso import PyPardisoSolver
        self.A = A.tocsr()
        self.A.sort_indices()
        self._solver = PyPardisoSolver(mtype=11)
        self._solver.factorize(self.A)

    def solve(self, b, trans=False):
        s = self._solver
        s.set_iparm(12, 2 if trans else 0)
        s.set_phase(33)
        x = s._call_pardiso(self.A, np.asfortranarray(b, dtype=float))
        s.set_iparm(12, 0)
        return x

    def free(self):
        if self._solver is not None:
            self._solver.free_memory(everything=True)
            self._solver = None

    def __del__(self):
        # the factor lives in MKL memory that Python's GC does not see
        try:
            self.free()
        except Exception:
            pass


class _SuperLUFactor:
    def __init__(self, A):
        self._lu = spla.splu(A.tocsc(), permc_spec="MMD_AT_PLUS_A")

    def solve(self, b, trans=False):
        return self._lu.solve(np.asarray(b, dtype=float), trans="T" if trans else "N")

    def free(self):
        self._lu = None


def factorize(A, backend="auto"):
    if backend == "auto":
        backend = "pardiso" if _pardiso_available() else "superlu"
    if backend == "pardiso":
        return _PardisoFactor(A)
    if backend == "superlu":
        return _SuperLUFactor(A)
    raise ValueError(f"unknown linear backend {backend!r}")


class _BlockAMG:
    """Lower block Gauss-Seidel: pressure V-cycle, then temperature V-cycle."""

    def __init__(self, A, n_p):
        import pyamg
        A = A.tocsr()
        self.n_p = n_p
        self.App = A[:n_p, :n_p].tocsr()
        self.Att = A[n_p:, n_p:].tocsr()
        self.Atp = A[n_p:, :n_p].tocsr()
        self.Apt = A[:n_p, n_p:].tocsr()
        self.mp = pyamg.smoothed_aggregation_solver(self.App, symmetry="hermitian", max_coarse=300)
        self.mt = pyamg.smoothed_aggregation_solver(self.Att, symmetry="nonsymmetric", max_coarse=300)
        self.mpT = self.mp
        self.mtT = None

    def solve(self, r, trans=False):
        n = self.n_p
        if not trans:
            xp = self.mp.solve(r[:n], maxiter=1, tol=1e-30)
            xt = self.mt.solve(r[n:] - self.Atp @ xp, maxiter=1, tol=1e-30)
            return np.concatenate([xp, xt])
        if self.mtT is None:
            import pyamg
            self.mtT = pyamg.smoothed_aggregation_solver(self.Att.T.tocsr(), symmetry="nonsymmetric",
                                                         max_coarse=300)
        # transpose of a lower block-triangular preconditioner is upper triangular
        xt = self.mtT.solve(r[n:], maxiter=1, tol=1e-30)
        xp = self.mp.solve(r[:n] - self.Atp.T @ xt, maxiter=1, tol=1e-30)
        return np.concatenate([xp, xt])

    def free(self):
        pass


class _ILU:
    def __init__(self, A):
        self._ilu = spla.spilu(A.tocsc(), drop_tol=1e-4, fill_factor=10)

    def solve(self, b, trans=False):
        return self._ilu.solve(b, trans="T" if trans else "N")

    def free(self):
        pass


@dataclass
class LinearResult:
    x: np.ndarray
    iterations: int
    refactorized: bool
    relative_residual: float


class LinearSolver:
    """Krylov solver that keeps its preconditioner between calls.

    With the default lagged-LU preconditioner the factorization of an earlier
    Jacobian preconditions GMRES for later, nearby Jacobians; the matrix is
    refactorized only when GMRES needs more than ``max_iterations``.
    """

    def __init__(self, cfg=None, n_pressure=None):
        self.cfg = cfg or LinearConfig()
        self.n_pressure = n_pressure
        self._prec = None
        self.factorizations = 0
        self.total_iterations = 0

    def reset(self):
        if self._prec is not None:
            self._prec.free()
        self._prec = None

    def _build(self, A):
        self.reset()
        kind = self.cfg.preconditioner
        if kind == "ilu":
            self._prec = _ILU(A)
        elif kind == "amg":
            if self.n_pressure is None:
                raise ValueError("amg preconditioner needs the pressure block size")
            self._prec = _BlockAMG(A, self.n_pressure)
        else:
            self._prec = factorize(A, self.cfg.backend)
        self.factorizations += 1

    def _gmres(self, A, b, trans, rtol):
        prec = self._prec
        M = spla.LinearOperator(A.shape, lambda r: prec.solve(r, trans))
        op = A.T if trans else A
        count = [0]

        def cb(_):
            count[0] += 1

        x, info = spla.gmres(op, b, rtol=rtol, atol=0.0, restart=self.cfg.restart,
                             maxiter=max(1, self.cfg.max_iterations // self.cfg.restart + 1),
                             M=M, callback=cb, callback_type="pr_norm")
        return x, count[0]

    def solve(self, A, b, trans=False, rtol=None):
        rtol = self.cfg.rtol if rtol is None else rtol
        b = np.asarray(b, dtype=float)
        bnorm = np.linalg.norm(b)
        if bnorm == 0.0:
            return LinearResult(np.zeros_like(b), 0, False, 0.0)
        op = A.T if trans else A
        direct = self.cfg.preconditioner == "direct"
        refactorized = False
        if self._prec is None or direct:
            self._build(A)
            refactorized = True
        if direct or (refactorized and self.cfg.preconditioner == "lagged-lu"):
            x = self._prec.solve(b, trans)
            its = 0
        else:
            x, its = self._gmres(A, b, trans, rtol)
        rel = np.linalg.norm(op @ x - b) / bnorm
        if rel > rtol and not refactorized:
            # stale preconditioner: rebuild on the current matrix and retry
            self._build(A)
            refactorized = True
            if self.cfg.preconditioner == "lagged-lu":
                x, its2 = self._prec.solve(b, trans), 0
            else:
                x, its2 = self._gmres(A, b, trans, rtol)
            its += its2
            rel = np.linalg.norm(op @ x - b) / bnorm
        if self.cfg.preconditioner == "lagged-lu" and rel > rtol:
            # a few steps of iterative refinement for ill-conditioned factors
            for _ in range(3):
                x = x + self._prec.solve(b - op @ x, trans)
                rel = np.linalg.norm(op @ x - b) / bnorm
                if rel <= rtol:
                    break
        self.total_iterations += its
        if not np.isfinite(rel) or rel > rtol:
            raise SolverFailure(f"linear solve stalled at relative residual {rel:.3e}", residual=rel)
        return LinearResult(x, its, refactorized, float(rel))


def linear_solve(A, b, cfg=None, trans=False):
    """One-off solve of ``A x = b``; returns ``(x, iterations)``."""
    solver = LinearSolver(cfg)
    res = solver.solve(sp.csr_matrix(A), b, trans=trans)
    solver.reset()
    return res.x, res.iterations


@dataclass
class NewtonReport:
    converged: bool = False
    iterations: int = 0
    initial_residual: float = 0.0
    final_residual: float = 0.0
    residuals: list = field(default_factory=list)
    dampings: list = field(default_factory=list)
    krylov_iterations: int = 0
    ramped: bool = False
    ramp_stages: int = 0
    message: str = ""
    level_residuals: list = field(default_factory=list)   # one history per ramp level

    @property
    def reduction(self):
        if self.initial_residual == 0.0:
            return 0.0
        return self.final_residual / self.initial_residual


def _line_search(asm, mat, s, ds, r0, levels):
    """Pick theta on the dyadic grid minimizing ||R(s + theta ds)||.

    Candidates are visited from theta = 1 downwards and the search stops at
    the first grid point after which the residual norm increases again.
    """
    best = (np.inf, None, None)
    theta = 1.0
    for _ in range(levels):
        trial = s + theta * ds
        r = asm.residual_norm(trial, mat)
        if not np.isfinite(r):
            theta *= 0.5
            continue
        if r < best[0]:
            best = (r, theta, trial)
        elif best[0] < r0:
            break
        theta *= 0.5
    return best


def newton_solve(asm, mat, s_init, cfg=None, linear=None, target=None):
    """Damped Newton iteration on ``R(s) = 0``.

    Converges when ``||R|| <= max(rtol * ||R(s_init)||, atol)``, or when
    ``||R|| <= target`` if an absolute target is given.  Raises
    :class:`SolverFailure` (carrying the report) otherwise.
    """
    cfg = cfg or NewtonConfig()
    linear = linear or LinearSolver(n_pressure=asm.mesh.n_nodes)
    s = np.array(s_init, dtype=float)
    s[asm.fixed] = asm.prescribed[asm.fixed]
    system = asm.assemble(s, mat, jacobian=False)
    r = float(np.linalg.norm(system.residual))
    rep = NewtonReport(initial_residual=r, final_residual=r, residuals=[r])
    goal = max(cfg.rtol * r, cfg.atol) if target is None else max(target, cfg.atol)
    krylov0 = linear.total_iterations
    while r > goal:
        if rep.iterations >= cfg.max_iterations:
            rep.message = f"no convergence in {cfg.max_iterations} iterations"
            rep.krylov_iterations = linear.total_iterations - krylov0
            raise SolverFailure(rep.message, residual=r, report=rep)
        system = asm.assemble(s, mat)
        try:
            ds = linear.solve(system.matrix, system.rhs).x
        except SolverFailure as exc:
            rep.message = str(exc)
            rep.krylov_iterations = linear.total_iterations - krylov0
            raise SolverFailure(rep.message, residual=r, report=rep) from exc
        r_new, theta, s_new = _line_search(asm, mat, s, ds, r, cfg.damping_levels)
        if s_new is None or not r_new < r:
            rep.message = f"line search found no descent (||R|| = {r:.3e})"
            rep.krylov_iterations = linear.total_iterations - krylov0
            raise SolverFailure(rep.message, residual=r, report=rep)
        s, r = s_new, r_new
        rep.iterations += 1
        rep.residuals.append(r)
        rep.dampings.append(theta)
        log.debug("newton %d: |R| = %.3e theta = %g", rep.iterations, r, theta)
    rep.converged = True
    rep.final_residual = r
    rep.krylov_iterations = linear.total_iterations - krylov0
    return s, rep


def ramping_solve(asm, mat, s_init, cfg=None, linear=None):
    """Solve at gradually increasing heat-source magnitude.

    Each ramp level starts from the previous solution; the last level uses the
    full source and the convergence target of a direct Newton solve from
    ``s_init``.
    """
    cfg = cfg or NewtonConfig()
    linear = linear or LinearSolver(n_pressure=asm.mesh.n_nodes)
    s0 = np.array(s_init, dtype=float)
    s0[asm.fixed] = asm.prescribed[asm.fixed]
    r_init = asm.residual_norm(s0, mat)
    target = max(cfg.rtol * r_init, cfg.atol)
    s = np.zeros_like(s0)
    total = NewtonReport(initial_residual=r_init, ramped=True)
    for level, scale in enumerate(cfg.q_ramp):
        scaled = type(mat)(mat.kappa, mat.k, mat.Q * scale)
        last = level == len(cfg.q_ramp) - 1
        try:
            s, rep = newton_solve(asm, scaled, s, cfg, linear, target=target if last else None)
        except SolverFailure as exc:
            raise SolverFailure(f"ramp level {level} (Q x {scale:g}) failed: {exc}",
                                residual=exc.residual, report=exc.report) from exc
        total.iterations += rep.iterations
        total.krylov_iterations += rep.krylov_iterations
        total.residuals.extend(rep.residuals)
        total.dampings.extend(rep.dampings)
        total.level_residuals.append(list(rep.residuals))
        total.ramp_stages += 1
    total.converged = True
    total.final_residual = total.residuals[-1]
    return s, total


def solve_state(asm, mat, s_init, cfg=None, linear=None):
    """Newton from ``s_init``; falls back to heat-source ramping on failure."""
    cfg = cfg or NewtonConfig()
    try:
        return newton_solve(asm, mat, s_init, cfg, linear)
    except SolverFailure as exc:
        log.info("direct Newton failed (%s); ramping the heat source", exc)
        if linear is not None:
            linear.reset()
        s, rep = ramping_solve(asm, mat, s_init, cfg, linear)
        rep.message = f"ramped after: {exc}"
        return s, rep
