"""Ensemble time-steppers sharing one coefficient matrix per step.

Seven schemes are provided. A1-A3 are first order (backward-Euler mass
term), A4-A6 are second order (BDF2 mass term, extrapolated advection
with a gamma-weighted stabilization of the implicit part). A2/A5 carry
the open-boundary relaxation and backflow terms; A3/A6 use the fully
antisymmetric fluctuation advection instead. BASELINE is the older
mean-viscosity splitting kept for comparison runs.

Every scheme is linear in the unknowns with a coefficient matrix built
from shared (member-independent) data only, so each accepted step costs
one factorization and J triangular solves.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import assembly, linsolve
from .fespace import FEFunction, TaylorHoodSpace, ThetaParams, interpolate
from .mesh import mesh_metrics

ALGORITHMS = ("A1", "A2", "A3", "A4", "A5", "A6", "BASELINE")
FIRST_ORDER = {"A1", "A2", "A3", "BASELINE"}
SECOND_ORDER = {"A4", "A5", "A6"}
OPEN_BOUNDARY_ALGS = {"A2", "A3", "A5", "A6"}
# First-order scheme used to produce the second history level when no
# exact two-level startup is available.
STARTUP_VARIANT = {"A4": "A1", "A5": "A2", "A6": "A3"}


class StepError(Exception):
    """A time step could not be completed (NaN solution, dt underflow)."""


def stability_g(gamma: float, x: float) -> float:
    """Rational stability function of the viscosity ratio x.

    g_gamma(x) = (x + gamma - 1)^2 / (4 gamma (x-1) + 2 (gamma-1) + 2 x);
    raises when the denominator is not positive.
    """
    denom = 4.0 * gamma * (x - 1.0) + 2.0 * (gamma - 1.0) + 2.0 * x
    if denom <= 0.0:
        raise ValueError(f"stability function undefined: denominator {denom} <= 0 "
                         f"for gamma={gamma}, x={x}")
    return (x + gamma - 1.0) ** 2 / denom


def compute_sigma(gamma: float, nus) -> float:
    """Max of the stability function over the viscosity ratios nu_inf/nu_j."""
    nus = np.asarray(nus, dtype=float)
    nu_inf = nus.max()
    return max(stability_g(gamma, nu_inf / nu) for nu in nus)


def select_gamma(nus) -> dict:
    """Pick gamma in [0, 2) minimizing sigma, subject to sigma > 1/2.

    Returns {"gamma", "sigma", "guaranteed"}; guaranteed means sigma < 1,
    which requires the viscosity ratio nu_inf/nu_0 to stay below 7. Large
    ratios are legal inputs; they simply come back not guaranteed. Sigma
    depends only on viscosity ratios, so rescaling all members leaves the
    selection unchanged.
    """
    nus = np.asarray(nus, dtype=float)
    if len(nus) == 0:
        raise ValueError("empty viscosity list")

    def sigma_of(g):
        try:
            s = compute_sigma(g, nus)
        except ValueError:
            return np.inf
        return s if s > 0.5 else np.inf

    grid = np.arange(1e-3, 2.0, 1e-3)
    sigmas = np.array([sigma_of(g) for g in grid])
    i = int(np.argmin(sigmas))
    lo = grid[max(i - 1, 0)]
    hi = grid[min(i + 1, len(grid) - 1)]
    fine = np.linspace(lo, hi, 401)
    fine = fine[fine < 2.0]
    fsig = np.array([sigma_of(g) for g in fine])
    k = int(np.argmin(fsig))
    gamma_star, sigma_star = float(fine[k]), float(fsig[k])
    return {"gamma": gamma_star, "sigma": sigma_star,
            "guaranteed": bool(sigma_star < 1.0)}


def check_baseline_restriction(nus) -> dict:
    """Feasibility of the mean-viscosity scheme's spread condition.

    The BASELINE splitting is only covered by theory when
    |nu_j - mean| / mean <= sqrt(mu) with mu < 1; reports the required mu.
    """
    nus = np.asarray(nus, dtype=float)
    if len(nus) == 0:
        raise ValueError("empty viscosity list")
    mean = nus.mean()
    ratio = np.abs(nus - mean).max() / mean
    mu = ratio ** 2
    return {"feasible": bool(mu < 1.0), "mu": float(mu)}


@dataclass(frozen=True)
class EnsembleConfig:
    """Run parameters shared by all members of one ensemble."""

    nus: tuple
    algorithm: str
    dt0: float
    t_final: float
    gamma: float = 1.0
    L: float = 0.0
    theta: ThetaParams = field(default_factory=ThetaParams)
    cfl_active: bool = True
    safety: float = 1.0
    inv_const_C: float = 1.0
    dt_floor: float = 1e-8
    require_guarantee: bool = False

    def __post_init__(self):
        object.__setattr__(self, "nus", tuple(float(v) for v in self.nus))
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if len(self.nus) < 1 or min(self.nus) <= 0.0:
            raise ValueError("need at least one positive viscosity")
        if not (0.0 <= self.gamma < 2.0):
            raise ValueError("gamma must lie in [0, 2)")
        if self.dt0 <= 0.0 or self.t_final <= 0.0:
            raise ValueError("dt0 and t_final must be positive")
        if self.require_guarantee and self.algorithm in SECOND_ORDER:
            s = self.sigma
            if not (0.5 < s < 1.0):
                raise ValueError(f"sigma={s:.6g} outside (1/2, 1); no stability "
                                 "guarantee for this gamma / viscosity spread")
            if min(self.nu_tilde) <= 0.0:
                raise ValueError("nu_inf + (gamma-1) nu_j must stay positive")

    @property
    def J(self) -> int:
        return len(self.nus)

    @property
    def nu_inf(self) -> float:
        return max(self.nus)

    @property
    def nu_bar(self) -> float:
        return float(np.mean(self.nus))

    @property
    def sigma(self) -> float:
        return compute_sigma(self.gamma, self.nus)

    @property
    def nu_tilde(self) -> tuple:
        return tuple(self.nu_inf + (self.gamma - 1.0) * nu for nu in self.nus)


@dataclass
class EnsembleState:
    """Per-member velocity history at one time level."""

    space: TaylorHoodSpace
    u: np.ndarray                   # (J, n_vel) at level n
    u_prev: np.ndarray | None = None  # (J, n_vel) at level n-1 (BDF2)
    t: float = 0.0
    dt: float = 0.0
    step_index: int = 0

    def advecting(self, config: EnsembleConfig) -> np.ndarray:
        """Explicit advecting fields: u^n (first order) or 2u^n - u^{n-1}."""
        if config.algorithm in FIRST_ORDER:
            return self.u
        if self.u_prev is None:
            raise StepError("second-order scheme needs two history levels")
        return 2.0 * self.u - self.u_prev

    def mean_fluct(self, config: EnsembleConfig):
        adv = self.advecting(config)
        mean = adv.mean(axis=0)
        return adv, mean, adv - mean


@dataclass
class StepReport:
    """Diagnostics for one accepted step."""

    step: int
    t: float
    dt: float
    energies: np.ndarray
    margins: list
    boundary_flux: np.ndarray
    factorizations: int
    solves: int
    matrix_fingerprint: str


# ---------------------------------------------------------------------------
# CFL machinery
# ---------------------------------------------------------------------------

def cfl_factors(state: EnsembleState, config: EnsembleConfig, geom: dict) -> list:
    """Per-member dict of margin/dt factors for the active conditions.

    Multiplying a factor by dt (and the safety factor) gives the
    left-hand side of that member's timestep condition; values <= 1
    certify the step. geom supplies h, diam, and lambda1 (the latter
    only for A2/A5).
    """
    alg = config.algorithm
    _, _, fluct = state.mean_fluct(config)
    sigma = config.sigma if alg in SECOND_ORDER else None
    if alg in SECOND_ORDER and not sigma < 1.0:
        raise ValueError(f"sigma={sigma:.6g} >= 1: the second-order timestep "
                         "conditions are void; pick a different gamma or split "
                         "the ensemble")
    out = []
    for j, nu in enumerate(config.nus):
        fj = FEFunction(state.space, "velocity", fluct[j])
        factors = {}
        if alg in ("A1", "BASELINE", "A4"):
            ninf = _value_div_inf(fj)
            base = (ninf["value_inf"] + 0.5 * geom["diam"] * ninf["divergence_inf"]) ** 2
            if alg == "A4":
                g = config.gamma
                factors["interior_2nd"] = ((1.0 + g) ** 2 * base
                                           / (nu * (1.0 + 4.0 * g) * (1.0 - sigma)))
            else:
                factors["interior"] = base / nu
        elif alg in ("A2", "A5"):
            if "lambda1" not in geom or geom["lambda1"] is None:
                raise ValueError("open-boundary conditions need lambda1 in geom")
            from .fespace import inf_norms

            ninf = inf_norms(fj, config.theta)
            base = (ninf["value_inf"]
                    + ninf["divergence_inf"] / np.sqrt(geom["lambda1"])) ** 2
            bnt2 = ninf["boundary_normal_theta_inf"] ** 2
            if alg == "A2":
                factors["obc_interior"] = base / nu
                factors["obc_backflow"] = bnt2 / (8.0 * nu)
            else:
                g = config.gamma
                pref = (1.0 + g) ** 2 / ((1.0 + 4.0 * g) * (1.0 - sigma))
                factors["obc_interior_2nd"] = pref * base / nu
                factors["obc_backflow_2nd"] = ((g + 1.0) ** 2 * bnt2
                                               / ((4.0 * g + 1.0) * nu))
        elif alg in ("A3", "A6"):
            grad2 = _h1_semi_sq(fj)
            c = config.inv_const_C
            if alg == "A3":
                factors["grad_fluct"] = c * grad2 / (geom["h"] * nu)
            else:
                g = config.gamma
                factors["grad_fluct_2nd"] = (c * (g + 1.0) ** 2 * grad2
                                             / ((1.0 + 4.0 * g) * geom["h"]
                                                * (1.0 - sigma) * nu))
        out.append(factors)
    return out


def cfl_margins(state: EnsembleState, config: EnsembleConfig, geom: dict) -> list:
    """Left-hand sides of the active timestep conditions at the current dt."""
    return [{k: state.dt * config.safety * v for k, v in f.items()}
            for f in cfl_factors(state, config, geom)]


def _value_div_inf(f: FEFunction) -> dict:
    from .fespace import inf_norms

    return inf_norms(f)


def _h1_semi_sq(f: FEFunction) -> float:
    g = f.space.velocity_grad_at_quad(f.values)
    return float(np.sum(f.space.qw * np.sum(g ** 2, axis=(2, 3))))


# ---------------------------------------------------------------------------
# Energies and boundary flux ledgers
# ---------------------------------------------------------------------------

def energy(config: EnsembleConfig, ops: dict, j: int, u_new: np.ndarray,
           u_old: np.ndarray | None = None, dt: float | None = None) -> float:
    """Member-j energy functional of the active scheme.

    First-order schemes need only the current level u_new; second-order
    ones need the previous level u_old as well. dt defaults to dt0.
    """
    dt = config.dt0 if dt is None else dt
    m, k, mg = ops["M"], ops["K"], ops["M_gamma"]
    alg = config.algorithm

    def q(a, mat):
        return float(a @ (mat @ a))

    if alg in FIRST_ORDER:
        nu_top = config.nu_bar if alg == "BASELINE" else config.nu_inf
        e = 0.5 * q(u_new, m) + 0.5 * dt * nu_top * q(u_new, k)
        if alg == "A2":
            e += 0.5 * config.L * q(u_new, mg)
        return e

    if u_old is None:
        raise ValueError("second-order energy needs two velocity levels")
    ext = 2.0 * u_new - u_old
    diff = u_new - u_old
    g, nu = config.gamma, config.nus[j]
    nu_t = config.nu_tilde[j]
    try:
        sigma = config.sigma
    except ValueError:
        # Undefined stability function (gamma=0, equal viscosities): the
        # certified energy has no meaning, so report NaN rather than fail.
        return float("nan")
    e = 0.25 * (q(u_new, m) + q(ext, m)) + 0.5 * g * q(diff, m)
    e += 0.5 * dt * nu_t * q(diff, k) + dt * sigma * nu * q(u_new, k)
    if alg == "A5":
        e += 0.25 * config.L * (q(u_new, mg) + q(ext, mg))
        e += 0.5 * config.L * g * q(diff, mg)
    return e


def boundary_flux(config: EnsembleConfig, space: TaylorHoodSpace, j: int,
                  mean_adv: np.ndarray, fluct_adv: np.ndarray,
                  u_new: np.ndarray, adv_j: np.ndarray) -> float:
    """Outflow-ledger term F of the open-boundary energy estimates.

    Weighted outflow of |velocity|^2 through the open boundary; the
    smoothed switch makes it nonnegative up to the smoothing tail.
    Returns 0 for schemes without an open-boundary ledger.
    """
    alg = config.algorithm
    th = config.theta
    if alg == "A2":
        return (assembly.boundary_flux_quadratic(space, mean_adv, u_new, th, "open")
                + assembly.boundary_flux_quadratic(space, fluct_adv, adv_j, th, "open"))
    if alg == "A3":
        return assembly.boundary_flux_quadratic(space, mean_adv, u_new, th, "open")
    if alg in ("A5", "A6"):
        test = (1.0 + config.gamma) * u_new - config.gamma * adv_j
        val = assembly.boundary_flux_quadratic(space, mean_adv, test, th, "open")
        if alg == "A5":
            val += assembly.boundary_flux_quadratic(space, fluct_adv, adv_j, th, "open")
        return val
    return 0.0


# ---------------------------------------------------------------------------
# One step
# ---------------------------------------------------------------------------

def build_step_matrix(space: TaylorHoodSpace, config: EnsembleConfig,
                      ops: dict, mean_adv: np.ndarray, dt: float):
    """Shared coefficient matrix of one step (velocity block only).

    Depends on the ensemble mean advecting field and dt, never on a
    single member, which is what makes the one-factorization pattern
    valid.
    """
    alg = config.algorithm
    m, k, mg = ops["M"], ops["K"], ops["M_gamma"]
    mass_scale = 1.0 / dt if alg in FIRST_ORDER else 1.5 / dt
    nu_top = config.nu_bar if alg == "BASELINE" else config.nu_inf
    a = (mass_scale * m + nu_top * k).tocsr()
    n1 = assembly.convection_b1_matrix(space, mean_adv)
    adv_scale = 1.0 if alg in FIRST_ORDER else 1.0 + config.gamma
    a = a + adv_scale * n1
    if alg in OPEN_BOUNDARY_ALGS:
        n2 = assembly.convection_b2_matrix(space, mean_adv, config.theta)
        a = a + adv_scale * n2
    if alg in ("A2", "A5"):
        a = a + (mass_scale * config.L) * mg
    return a.tocsr()


def step(state: EnsembleState, config: EnsembleConfig, ops: dict,
         forcings=None, bc=None, geom: dict | None = None,
         margins: list | None = None) -> tuple:
    """Advance the ensemble one step of size state.dt.

    forcings / bc are per-member callables f_j(x, y, t) and g_j(x, y, t)
    (None entries mean zero). Returns (new_state, StepReport).
    """
    space, dt = state.space, state.dt
    if dt <= 0.0:
        raise StepError("state.dt must be set positive before stepping")
    alg = config.algorithm
    t_new = state.t + dt
    adv, mean_adv, fluct = state.mean_fluct(config)

    a_vel = build_step_matrix(space, config, ops, mean_adv, dt)
    system = linsolve.SaddleSystem(space, a_vel, ops["B"])
    fact = linsolve.factorize(system)

    m, k, mg = ops["M"], ops["K"], ops["M_gamma"]
    nu_top = config.nu_bar if alg == "BASELINE" else config.nu_inf
    if alg in SECOND_ORDER:
        gamma_mean_n1 = assembly.convection_b1_matrix(space, mean_adv)
        gamma_mean_n2 = (assembly.convection_b2_matrix(space, mean_adv, config.theta)
                         if alg in OPEN_BOUNDARY_ALGS else None)

    rhs_block = np.empty((system.n, config.J))
    for j, nu in enumerate(config.nus):
        f_vec = (assembly.rhs_forcing(space, forcings[j], t_new)
                 if forcings is not None and forcings[j] is not None
                 else np.zeros(space.n_vel))
        if alg in FIRST_ORDER:
            un = state.u[j]
            rhs = f_vec + (m @ un) / dt + (nu_top - nu) * (k @ un)
            if alg == "A3":
                rhs -= assembly.convection_b3_matrix(space, fluct[j]) @ un
            else:
                rhs -= assembly.convection_b1_matrix(space, fluct[j]) @ un
                if alg == "A2":
                    rhs -= assembly.convection_b2_matrix(space, fluct[j],
                                                         config.theta) @ un
            if alg == "A2":
                rhs += (config.L / dt) * (mg @ un)
        else:
            ej = adv[j]
            hist = (4.0 * state.u[j] - state.u_prev[j]) / (2.0 * dt)
            rhs = f_vec + m @ hist + (nu_top - nu) * (k @ ej)
            rhs += config.gamma * (gamma_mean_n1 @ ej)
            if alg == "A6":
                rhs -= assembly.convection_b3_matrix(space, fluct[j]) @ ej
            else:
                rhs -= assembly.convection_b1_matrix(space, fluct[j]) @ ej
            if alg in OPEN_BOUNDARY_ALGS:
                rhs += config.gamma * (gamma_mean_n2 @ ej)
                if alg == "A5":
                    rhs -= assembly.convection_b2_matrix(space, fluct[j],
                                                         config.theta) @ ej
            if alg == "A5":
                rhs += config.L * (mg @ hist)

        g_vals = None
        if bc is not None and bc[j] is not None:
            g_vals = interpolate(space, bc[j], t_new).values
        rhs_block[:, j] = system.build_rhs(rhs, g_vals)

    sol = linsolve.solve_multi(fact, rhs_block)
    if not np.all(np.isfinite(sol)):
        raise StepError(f"non-finite solution at t={t_new:.6g}")
    u_new = np.ascontiguousarray(sol[:space.n_vel].T)
    p_new = np.ascontiguousarray(sol[space.n_vel:space.n_vel + space.n_pr].T)

    energies = np.array([
        energy(config, ops, j, u_new[j],
               state.u[j] if alg in SECOND_ORDER else None, dt)
        for j in range(config.J)])
    fluxes = np.array([
        boundary_flux(config, space, j, mean_adv, fluct[j], u_new[j], adv[j])
        for j in range(config.J)])

    new_state = EnsembleState(space, u_new, state.u.copy(), t_new, dt,
                              state.step_index + 1)
    report = StepReport(new_state.step_index, t_new, dt, energies,
                        margins if margins is not None else [], fluxes,
                        linsolve.COUNTERS["factorizations"],
                        linsolve.COUNTERS["solves"], system.fingerprint)
    return new_state, report, p_new


# ---------------------------------------------------------------------------
# Full run with the halving policy
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    reports: list
    state: EnsembleState
    pressures: np.ndarray
    halvings: list
    lambda1: float | None
    sigma: float | None


def run(space: TaylorHoodSpace, config: EnsembleConfig, initial,
        forcings=None, bc=None, history=None, operators=None,
        lam1: float | None = None, geom: dict | None = None,
        on_step=None) -> RunResult:
    """Integrate the ensemble to t_final with the predictive CFL policy.

    initial: (J, n_vel) array (or list of FEFunctions) at t=0; history:
    optional (J, n_vel) array at t=-dt0 for an exact two-level start of
    the second-order schemes. Before each step the timestep conditions
    are evaluated on the available explicit fields; a violation halves dt
    (logged) before anything is solved, and dt never grows back.
    """
    ops = operators or assembly.assemble_core(space)
    u0 = np.array([f.values if isinstance(f, FEFunction) else np.asarray(f, float)
                   for f in initial])
    if u0.shape != (config.J, space.n_vel):
        raise ValueError(f"initial data must be {config.J} velocity fields")

    if config.algorithm == "BASELINE":
        chk = check_baseline_restriction(config.nus)
        if not chk["feasible"]:
            warnings.warn(
                f"viscosity spread needs mu={chk['mu']:.4g} >= 1: the "
                "mean-viscosity scheme has no stability guarantee here",
                RuntimeWarning, stacklevel=2)

    if geom is None:
        metrics = mesh_metrics(space.mesh)
        geom = {"h": metrics["h"], "diam": metrics["diam"]}
    geom = dict(geom)
    if config.algorithm in ("A2", "A5") and geom.get("lambda1") is None:
        geom["lambda1"] = lam1 if lam1 is not None else linsolve.lambda1(space)
    sigma = None
    if config.algorithm in SECOND_ORDER:
        try:
            sigma = config.sigma
        except ValueError:
            # gamma=0 with equal viscosities: legal without the CFL policy.
            if config.cfl_active:
                raise

    dt = config.dt0
    halvings = []
    reports = []
    p_last = np.zeros((config.J, space.n_pr))

    state = EnsembleState(space, u0, None, 0.0, dt)
    if config.algorithm in SECOND_ORDER:
        if history is not None:
            state.u_prev = np.array([
                f.values if isinstance(f, FEFunction) else np.asarray(f, float)
                for f in history])
        else:
            boot_cfg = replace(config, algorithm=STARTUP_VARIANT[config.algorithm])
            boot = EnsembleState(space, u0, None, 0.0, dt)
            boot, rep, p_last = step(boot, boot_cfg, ops, forcings, bc, geom)
            reports.append(rep)
            state = EnsembleState(space, boot.u, u0, boot.t, dt, boot.step_index)
            if on_step is not None:
                on_step(state, rep)

    eps = 1e-12
    while state.t < config.t_final - eps:
        dt = min(dt, config.t_final - state.t)
        state.dt = dt
        margins = None
        if config.cfl_active:
            factors = cfl_factors(state, config, geom)
            while True:
                margins = [{k: dt * config.safety * v for k, v in f.items()}
                           for f in factors]
                worst = max((m for d in margins for m in d.values()), default=0.0)
                if worst <= 1.0:
                    break
                halvings.append({"t": state.t, "old_dt": dt, "new_dt": dt / 2.0})
                dt /= 2.0
                if dt < config.dt_floor:
                    raise StepError(
                        f"dt={dt:.3g} fell below the floor {config.dt_floor:.3g} "
                        f"at t={state.t:.6g}; margins still exceed 1")
            state.dt = dt
        state, rep, p_last = step(state, config, ops, forcings, bc, geom, margins)
        reports.append(rep)
        if on_step is not None:
            on_step(state, rep)

    return RunResult(reports, state, p_last, halvings,
                     geom.get("lambda1"), sigma)
