"""Adjoint sensitivities, MMA design updates and the continuation loop."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import brentq

from .fem import Assembler, design_derivative
from .filter import build_filter, filter_backward, filter_density, filter_radius, passive_values
from .materials import (ContinuationState, continuation_schedule, get_schedule, ramp_conductivity,
                        ramp_conductivity_derivative, ramp_permeability,
                        ramp_permeability_derivative)
from .solver import LinearConfig, LinearSolver, NewtonConfig, SolverFailure, solve_state

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- MMA


@dataclass
class MmaState:
    """Moving-asymptote history of a single-constraint MMA run."""
    low: np.ndarray | None = None
    upp: np.ndarray | None = None
    x1: np.ndarray | None = None     # previous iterate
    x2: np.ndarray | None = None     # iterate before that
    scale: float | None = None       # objective normalization of the current stage
    scale_stage: int = -1
    multiplier: float = 0.0
    asyinit: float = 0.5
    asyincr: float = 1.2
    asydecr: float = 0.7
    raa0: float = 1e-5
    iterations: int = 0

    _ARRAYS = ("low", "upp", "x1", "x2")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in cls._ARRAYS:
            if d.get(k) is not None:
                d[k] = np.asarray(d[k], dtype=float)
        return cls(**d)


def _dual_solve(G, diag):
    """Root of the decreasing dual derivative ``G(lam)`` on ``lam >= 0``."""
    g0 = G(0.0)
    if g0 <= 0.0:
        return 0.0
    hi = 1.0
    while G(hi) > 0.0:
        hi *= 4.0
        if hi > 1e40:
            diag.append("dual: constraint approximation infeasible in the move box")
            return hi
    try:
        return brentq(G, 0.0, hi, xtol=1e-15 * hi, rtol=4 * np.finfo(float).eps, maxiter=500)
    except (RuntimeError, ValueError) as exc:
        diag.append(f"dual: brentq failed ({exc}); bisecting")
        lo = 0.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if G(mid) > 0.0:
                lo = mid
            else:
                hi = mid
        return hi


def mma_update(x, f, dfdx, g, dgdx, mma, move_limit=0.2, xmin=0.0, xmax=1.0):
    """One MMA step for ``min f  s.t.  g <= 0`` with ``xmin <= x <= xmax``.

    The objective is divided by ``mma.scale`` (set to ``|f|`` when empty);
    the constraint is used as is.  Returns the new design; ``mma`` is
    updated in place.
    """
    x = np.asarray(x, dtype=float)
    dfdx = np.asarray(dfdx, dtype=float)
    dgdx = np.asarray(dgdx, dtype=float)
    if not (np.all(np.isfinite(dfdx)) and np.all(np.isfinite(dgdx)) and np.isfinite(g)):
        raise ValueError("MMA needs finite gradients and constraint value")
    if mma.scale is None:
        mma.scale = abs(f) if np.isfinite(f) and f != 0.0 else 1.0
    df = dfdx / mma.scale
    rng = xmax - xmin

    if mma.x1 is None or mma.x2 is None:
        low = x - mma.asyinit * rng
        upp = x + mma.asyinit * rng
    else:
        zz = (x - mma.x1) * (mma.x1 - mma.x2)
        fac = np.where(zz > 0, mma.asyincr, np.where(zz < 0, mma.asydecr, 1.0))
        low = x - fac * (mma.x1 - mma.low)
        upp = x + fac * (mma.upp - mma.x1)
        low = np.clip(low, x - 10.0 * rng, x - 0.01 * rng)
        upp = np.clip(upp, x + 0.01 * rng, x + 10.0 * rng)

    alpha = np.maximum.reduce([np.full_like(x, xmin), low + 0.1 * (x - low), x - move_limit])
    beta = np.minimum.reduce([np.full_like(x, xmax), upp - 0.1 * (upp - x), x + move_limit])
    ux, xl = upp - x, x - low
    eps = mma.raa0 / rng

    def pq(d):
        pos, neg = np.maximum(d, 0.0), np.maximum(-d, 0.0)
        return ((1.001 * pos + 0.001 * neg + eps) * ux**2,
                (0.001 * pos + 1.001 * neg + eps) * xl**2)

    p0, q0 = pq(df)
    p1, q1 = pq(dgdx)
    b = np.sum(p1 / ux + q1 / xl) - g

    def primal(lam):
        sp_, sq = np.sqrt(p0 + lam * p1), np.sqrt(q0 + lam * q1)
        return np.clip((sp_ * low + sq * upp) / (sp_ + sq), alpha, beta)

    def G(lam):
        xx = primal(lam)
        return float(np.sum(p1 / (upp - xx) + q1 / (xx - low)) - b)

    diag = []
    lam = _dual_solve(G, diag)
    for msg in diag:
        log.warning("MMA: %s", msg)
    x_new = primal(lam)

    mma.x2 = None if mma.x1 is None else mma.x1.copy()
    mma.x1 = x.copy()
    mma.low, mma.upp = low, upp
    mma.multiplier = float(lam)
    mma.iterations += 1
    return x_new


# ------------------------------------------------------- design helpers


@dataclass
class DesignField:
    """Design densities on the design elements plus the fixed passive values."""
    gamma: np.ndarray
    design_index: np.ndarray
    passive: np.ndarray        # full element vector; design entries ignored
    move_limit: float = 0.2

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=float)
        if self.gamma.shape != self.design_index.shape:
            raise ValueError("one density per design element expected")
        if np.any(self.gamma < 0) or np.any(self.gamma > 1) or np.any(np.isnan(self.gamma)):
            raise ValueError("design densities must lie in [0, 1]")

    def full(self):
        out = self.passive.copy()
        out[self.design_index] = self.gamma
        return out


def volume_constraint(gamma, volumes, target):
    """``g = sum(gamma v) / sum(v) - target`` over the design elements and its gradient."""
    volumes = np.asarray(volumes, dtype=float)
    if volumes.size == 0:
        raise ValueError("design region is empty")
    total = volumes.sum()
    return float(np.dot(gamma, volumes) / total - target), volumes / total


def discreteness(gamma, volumes):
    """Volume fraction of design densities strictly between 0.1 and 0.9."""
    gray = (gamma > 0.1) & (gamma < 0.9)
    return float(np.dot(gray, volumes) / np.sum(volumes))


def threshold_export(gamma, level, volumes=None):
    """Binary design ``gamma >= level`` and its solid volume fraction."""
    if not 0 < level < 1:
        raise ValueError("threshold level must lie in (0, 1)")
    gamma = np.asarray(gamma, dtype=float)
    solid = (gamma >= level).astype(float)
    v = np.ones_like(gamma) if volumes is None else np.asarray(volumes, float)
    frac = float(np.dot(solid, v) / v.sum()) if v.size else 0.0
    return solid, frac


def initial_design(spec, mesh, tags):
    """Initial design densities on the design elements."""
    idx = np.flatnonzero(tags.design)
    kind, _, arg = spec.initial_design.partition(":")
    if kind == "uniform":
        value = float(arg) if arg else spec.volume_fraction
        return np.full(idx.size, value)
    if kind == "four-fin":
        # one radial fin along the diagonal of the quarter domain, i.e. four
        # regularly spaced fins in the full domain, holding the target volume
        c = mesh.centroids()[idx]
        dist = np.abs(c[:, 0] - c[:, 1])
        n_solid = int(round(spec.volume_fraction * idx.size))
        order = np.lexsort((np.arange(idx.size), dist))
        gamma = np.zeros(idx.size)
        gamma[order[:n_solid]] = 1.0
        return gamma
    if kind == "file":
        data = np.load(arg)
        gamma = data["gamma"] if hasattr(data, "files") else data
        gamma = np.asarray(gamma, dtype=float)
        if gamma.shape == (mesh.n_elements,):
            gamma = gamma[idx]
        if gamma.shape != idx.shape:
            raise ValueError(f"design file {arg} has {gamma.size} entries, mesh needs {idx.size}")
        return gamma
    raise ValueError(f"unknown initial design {spec.initial_design!r}")


# ------------------------------------------------------------ workspace


@dataclass
class Evaluation:
    f: float
    state: np.ndarray
    gamma_physical: np.ndarray
    report: object
    gradient: np.ndarray | None = None  # on design elements
    adjoint_iterations: int = 0


class Workspace:
    """Mesh, assembler and filter of one problem, reused across iterations."""

    def __init__(self, spec, workers=1, linear=None, newton=None):
        self.spec = spec.resolved()
        self.mesh, self.tags = self.spec.build()
        self.params = self.spec.physical_params()
        self.asm = Assembler(self.mesh, self.tags, self.params, workers=workers)
        self.linear_cfg = linear or LinearConfig()
        self.newton_cfg = newton or NewtonConfig()
        self.filter = build_filter(self.mesh, filter_radius(self.mesh, self.spec.filter_multiplier),
                                   self.linear_cfg.backend)
        self.design_index = np.flatnonzero(self.tags.design)
        self.volumes = self.mesh.element_volumes()[self.design_index]
        self.passive = passive_values(self.tags)

    def new_linear_solver(self):
        return LinearSolver(self.linear_cfg, n_pressure=self.mesh.n_nodes)

    def design_field(self, gamma):
        return DesignField(gamma, self.design_index, self.passive, self.spec.move_limit)

    def physical(self, gamma_full, filtered=True):
        if filtered:
            return filter_density(gamma_full, self.filter, self.tags)
        out = np.array(gamma_full, dtype=float)
        out[~self.tags.design] = self.passive[~self.tags.design]
        return out

    def materials(self, gphys, cont):
        p = self.params
        kappa = ramp_permeability(gphys, cont.q_p, cont.kappa_s, p.kappa_f)
        k = ramp_conductivity(gphys, cont.q_c, p.k_f, p.k_s)
        return self.asm.material(kappa, k)

    def zero_state(self):
        return np.zeros(self.asm.n_dofs)

    def evaluate(self, gamma_full, cont, state=None, gradient=True, filtered=True, linear=None):
        """Solve the state for a design and optionally the adjoint gradient."""
        owned = linear is None
        linear = linear or self.new_linear_solver()
        try:
            gphys = self.physical(gamma_full, filtered)
            mat = self.materials(gphys, cont)
            s0 = self.zero_state() if state is None else state
            s, rep = solve_state(self.asm, mat, s0, self.newton_cfg, linear)
            f, dfds, dfdc = self.asm.objective_and_state_gradient(s, mat)
            ev = Evaluation(f, s, gphys, rep)
            if gradient:
                ev.gradient, ev.adjoint_iterations = self._adjoint(s, mat, gphys, cont, dfds,
                                                                   dfdc, linear, filtered)
        finally:
            # PARDISO keeps its factor outside Python; release it explicitly
            if owned:
                linear.reset()
        return ev

    def _adjoint(self, s, mat, gphys, cont, dfds, dfdc, linear, filtered=True):
        p = self.params
        rhs = np.where(self.asm.fixed, 0.0, dfds)
        J = self.asm.assemble(s, mat).matrix
        res = linear.solve(J, rhs, trans=True, rtol=1e-10)
        dkappa = ramp_permeability_derivative(gphys, cont.q_p, cont.kappa_s, p.kappa_f)
        dk = ramp_conductivity_derivative(gphys, cont.q_c, p.k_f, p.k_s)
        dfdg = design_derivative(self.asm, s, mat, res.x, dkappa, dk, dfdc)
        full = filter_backward(dfdg, self.filter, self.tags) if filtered else dfdg
        return full[self.design_index], res.iterations


def adjoint_gradient(workspace, gamma, cont, state=None):
    """Objective and its gradient with respect to the raw design densities."""
    ev = workspace.evaluate(workspace.design_field(gamma).full(), cont, state)
    return ev.f, ev.gradient, ev


# --------------------------------------------------------- outer loop


@dataclass
class IterationRecord:
    iteration: int
    stage: int
    q_c: float
    q_p: float
    kappa_s: float
    f: float
    g: float
    newton_steps: int
    krylov_iterations: int
    residual_reduction: float
    discreteness: float
    wall_seconds: float
    ramped: bool = False
    residuals: list = field(default_factory=list, repr=False)

    CSV_FIELDS = ("iteration", "stage", "q_c", "q_p", "kappa_s", "f", "g", "newton_steps",
                  "krylov_iterations", "residual_reduction", "discreteness", "wall_seconds")

    def row(self):
        return {k: getattr(self, k) for k in self.CSV_FIELDS}


@dataclass
class OptimizationResult:
    gamma: np.ndarray               # raw design on design elements
    gamma_full: np.ndarray
    gamma_physical: np.ndarray
    state: np.ndarray
    f: float                        # objective of the returned design
    g: float
    history: list
    mma: MmaState
    iteration: int                  # number of completed iterations
    stage: int


class OptimizationError(RuntimeError):
    def __init__(self, iteration, cause):
        super().__init__(f"iteration {iteration}: {cause}")
        self.iteration = iteration
        self.cause = cause


def final_continuation(spec, iteration=None):
    """Penalization in force at the last completed iteration (stage 0 if none)."""
    n = spec.iterations
    it = n - 1 if iteration is None else iteration
    if n == 0 or it < 0:
        s = get_schedule(spec.schedule)
        return ContinuationState(0, s.q_c[0], s.q_p[0], s.kappa_s[0], spec.stage_length)
    return continuation_schedule(min(it, n - 1), n, spec.stage_length, spec.schedule)


def optimize(spec, workers=1, linear=None, newton=None, callback=None, resume=None,
             workspace=None, stop_after=None):
    """Run the continuation loop of the volume-constrained compliance problem.

    ``callback(record, checkpoint, fields)`` is invoked after each iteration
    with the fields of the design just analyzed;
    ``resume`` is a checkpoint dictionary from an earlier run;
    ``stop_after`` ends the run after that many iterations in total, as if
    interrupted (used for restart tests).
    """
    ws = workspace or Workspace(spec, workers, linear, newton)
    spec = ws.spec
    if resume is not None:
        gamma = np.asarray(resume["gamma"], dtype=float)
        state = np.asarray(resume["state"], dtype=float)
        mma = MmaState.from_dict(resume["mma"])
        history = list(resume["history"])
        start = int(resume["iteration"])
    else:
        gamma = initial_design(spec, ws.mesh, ws.tags)
        state, mma, history, start = None, MmaState(), [], 0
    end = spec.iterations if stop_after is None else min(spec.iterations, stop_after)
    t0 = time.perf_counter()
    cont = final_continuation(spec, start - 1)
    for it in range(start, end):
        cont = continuation_schedule(it, spec.iterations, spec.stage_length, spec.schedule)
        if cont.stage != mma.scale_stage:
            mma.scale, mma.scale_stage = None, cont.stage
        tic = time.perf_counter()
        design = ws.design_field(gamma)
        try:
            ev = ws.evaluate(design.full(), cont, state)
        except SolverFailure as exc:
            raise OptimizationError(it, exc) from exc
        g, dg = volume_constraint(gamma, ws.volumes, spec.volume_fraction)
        rep = ev.report
        gamma_new = mma_update(gamma, ev.f, ev.gradient, g, dg, mma, spec.move_limit)
        rec = IterationRecord(
            iteration=it, stage=cont.stage, q_c=cont.q_c, q_p=cont.q_p, kappa_s=cont.kappa_s,
            f=ev.f, g=g, newton_steps=rep.iterations,
            krylov_iterations=rep.krylov_iterations + ev.adjoint_iterations,
            residual_reduction=rep.reduction, discreteness=discreteness(gamma, ws.volumes),
            wall_seconds=time.perf_counter() - tic, ramped=rep.ramped,
            residuals=list(rep.residuals))
        history.append(rec)
        log.info("it %4d stage %d f %.6g g %+.2e newton %d krylov %d gray %.3f (%.1fs)",
                 it, cont.stage, ev.f, g, rec.newton_steps, rec.krylov_iterations,
                 rec.discreteness, rec.wall_seconds)
        if callback is not None:
            snap = {"gamma": design.full(), "gamma_physical": ev.gamma_physical,
                    "state": ev.state, "continuation": cont}
            callback(rec, make_checkpoint(gamma_new, ev.state, mma, history, it + 1, spec), snap)
        gamma, state = gamma_new, ev.state
    done = max(start, end)
    cont = final_continuation(spec, done - 1)
    try:
        # cold start, so the reported value matches a standalone analyze()
        ev = ws.evaluate(ws.design_field(gamma).full(), cont, gradient=False)
    except SolverFailure as exc:
        raise OptimizationError(done, exc) from exc
    g, _ = volume_constraint(gamma, ws.volumes, spec.volume_fraction)
    log.info("final f %.6g g %+.2e after %d iterations (%.1fs)", ev.f, g, done,
             time.perf_counter() - t0)
    return OptimizationResult(gamma, ws.design_field(gamma).full(), ev.gamma_physical, ev.state,
                              ev.f, g, history, mma, done, cont.stage)


CHECKPOINT_VERSION = 1


def make_checkpoint(gamma, state, mma, history, iteration, spec=None):
    return {"format_version": CHECKPOINT_VERSION, "gamma": np.array(gamma),
            "state": np.array(state), "mma": mma.to_dict(), "history": list(history),
            "iteration": int(iteration)}


def analyze(spec, gamma, workspace=None, threshold=None, filtered=True, workers=1):
    """Solve the state once for a given design at the final-stage penalization.

    ``gamma`` may cover all elements or only the design elements.  With
    ``threshold`` the physical field is binarized at that level and analyzed
    without filtering.
    """
    ws = workspace or Workspace(spec, workers)
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape == (ws.mesh.n_elements,):
        full = gamma.copy()
    elif gamma.shape == ws.design_index.shape:
        full = ws.design_field(gamma).full()
    else:
        raise ValueError(f"design has {gamma.size} entries; the mesh has "
                         f"{ws.mesh.n_elements} elements and {ws.design_index.size} design elements")
    cont = final_continuation(ws.spec)
    if threshold is not None:
        binary, _ = threshold_export(ws.physical(full, filtered), threshold)
        full, filtered = binary, False
    return ws.evaluate(full, cont, gradient=False, filtered=filtered), ws
