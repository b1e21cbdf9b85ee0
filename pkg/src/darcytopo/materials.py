"""Material interpolation, continuation schedules and permeability tuning."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class PhysicalParams:
    """Physical constants of the Darcy-Boussinesq model (SI units)."""
    rho0: float = 1.0
    mu: float = 1.0
    cp: float = 1.0
    alpha: float = 1e3
    gravity: tuple = (0.0, 0.0, -1.0)
    Q: float = 1e4
    k_s: float = 100.0
    k_f: float = 1.0
    kappa_s: float = 1e-5
    kappa_f: float = 0.00513

    def __post_init__(self):
        for name in ("rho0", "mu", "cp"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.k_s > self.k_f > 0:
            raise ValueError("conductivities must satisfy k_s > k_f > 0")
        if not self.kappa_f > self.kappa_s > 0:
            raise ValueError("permeabilities must satisfy kappa_f > kappa_s > 0")
        if len(self.gravity) != 3:
            raise ValueError("gravity must be a 3-vector")

    @property
    def buoyancy(self):
        """rho0 * alpha * g, the temperature-to-body-force vector."""
        return self.rho0 * self.alpha * np.asarray(self.gravity, dtype=float)

    def replace(self, **changes):
        return replace(self, **changes)


def _check_density(gamma):
    gamma = np.asarray(gamma, dtype=float)
    if np.any(gamma < 0.0) or np.any(gamma > 1.0) or np.any(np.isnan(gamma)):
        raise ValueError("densities must lie in [0, 1]")
    return gamma


def ramp_conductivity(gamma, q_c, k_f, k_s):
    gamma = _check_density(gamma)
    return k_f + gamma / (1.0 + q_c * (1.0 - gamma)) * (k_s - k_f)


def ramp_conductivity_derivative(gamma, q_c, k_f, k_s):
    gamma = _check_density(gamma)
    return (1.0 + q_c) / (1.0 + q_c * (1.0 - gamma))**2 * (k_s - k_f)


def ramp_permeability(gamma, q_p, kappa_s, kappa_f):
    gamma = _check_density(gamma)
    return kappa_s + (1.0 - gamma) / (1.0 + q_p * gamma) * (kappa_f - kappa_s)


def ramp_permeability_derivative(gamma, q_p, kappa_s, kappa_f):
    gamma = _check_density(gamma)
    return -(1.0 + q_p) / (1.0 + q_p * gamma)**2 * (kappa_f - kappa_s)


@dataclass(frozen=True)
class ContinuationState:
    stage: int
    q_c: float
    q_p: float
    kappa_s: float
    stage_length: int


@dataclass(frozen=True)
class Schedule:
    """Piecewise-constant penalization schedule, one entry per stage."""
    q_c: tuple
    q_p: tuple
    kappa_s: tuple
    name: str = "custom"

    def __post_init__(self):
        if not len(self.q_c) == len(self.q_p) == len(self.kappa_s) >= 1:
            raise ValueError("schedule entries must have equal, non-zero length")

    @property
    def n_stages(self):
        return len(self.q_c)


SCHEDULES = {
    "five-stage": Schedule((0.881, 8.81, 88.1, 88.1, 881.0),
                           (8.0, 8.0, 8.0, 98.0, 998.0),
                           (1e-5, 1e-5, 1e-5, 1e-6, 1e-7), "five-stage"),
    "three-stage": Schedule((8.81, 88.1, 88.1),
                            (8.0, 98.0, 998.0),
                            (1e-5, 1e-6, 1e-7), "three-stage"),
    # fixed penalization used for solver performance runs
    "constant": Schedule((8.81,), (8.0,), (1e-5,), "constant"),
}


def get_schedule(schedule):
    if isinstance(schedule, Schedule):
        return schedule
    try:
        return SCHEDULES[schedule]
    except KeyError:
        raise ValueError(f"unknown continuation schedule {schedule!r}; "
                         f"choose from {sorted(SCHEDULES)}") from None


def continuation_schedule(iteration, total_iterations, stage_length, schedule="five-stage"):
    """Penalization parameters in force at a (0-based) optimization iteration.

    Iterations beyond the last stage boundary stay in the final stage.
    """
    sched = get_schedule(schedule)
    if stage_length < 1:
        raise ValueError("stage_length must be >= 1")
    if not 0 <= iteration < total_iterations:
        raise IndexError(f"iteration {iteration} outside [0, {total_iterations})")
    stage = min(iteration // stage_length, sched.n_stages - 1)
    return ContinuationState(stage, sched.q_c[stage], sched.q_p[stage],
                             sched.kappa_s[stage], stage_length)


@dataclass(frozen=True)
class TuningInputs:
    """Enclosure data for the Nusselt-matching permeability estimate."""
    H: float = 1.0
    L: float = 0.5
    delta_T: float = 1.0
    alpha: float = 1e3
    g: float = 1.0
    nu: float = 1.0
    beta_m: float = 1.0
    Pr: float = 1.0

    def __post_init__(self):
        for name in ("H", "L", "delta_T", "alpha", "g", "nu", "beta_m", "Pr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"tuning input {name} must be positive")

    @property
    def grashof(self):
        return self.g * self.alpha * self.delta_T * self.H**3 / self.nu**2

    @property
    def rayleigh_fluid(self):
        return self.grashof * self.Pr

    def nusselt_fluid(self):
        """Average Nusselt number of a fluid-filled enclosure (vertical plates)."""
        return 0.18 * (self.Pr / (0.2 + self.Pr) * self.rayleigh_fluid)**0.29

    def nusselt_porous(self, kappa):
        """Average Nusselt number of the porous enclosure with permeability kappa."""
        ra = self.g * self.alpha * kappa * self.H * self.delta_T / (self.nu * self.beta_m)
        return self.L / self.H * np.sqrt(ra)


def tune_fluid_permeability(inputs):
    """Fictitious fluid permeability that equates porous and fluid Nusselt numbers."""
    i = inputs
    return (0.0324 * i.beta_m * i.H**1.74
            / (i.nu**0.16 * (i.g * i.alpha * i.delta_T)**0.42 * i.L**2)
            * (i.Pr**2 / (0.2 + i.Pr))**0.58)
