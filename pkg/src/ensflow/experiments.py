"""Verification problems and benchmark configurations.

Provides the manufactured-solution family used for convergence studies
(divergence-free quadratic velocity, linear pressure, so every reported
error is purely temporal on a Taylor-Hood mesh), classical single-member
reference steppers, a Stokes solver for initial data, the channel
benchmarks, and the drag/lift/pressure-drop functionals.
"""

from __future__ import annotations

import numpy as np

from . import assembly, ensemble, linsolve
from .fespace import FEFunction, TaylorHoodSpace, build_space, interpolate, norms
from .mesh import (TAG_CYLINDER, BoundaryPartition, generate_channel,
                   generate_polygon_mesh, generate_unit_square, mesh_metrics)

# ---------------------------------------------------------------------------
# Manufactured-solution family
# ---------------------------------------------------------------------------


def mms_scales(J: int, eps: float) -> list:
    """Member scale factors: 1 + k*eps for the first half, 1 - k*eps after.

    The counter k restarts at 1 in the second half, so J=2 with eps=0.1
    gives scales (1.1, 0.9).
    """
    half = J // 2
    return ([1.0 + (k + 1) * eps for k in range(half)]
            + [1.0 - (k + 1) * eps for k in range(J - half)])


def mms_velocity(scale: float = 1.0):
    """Closed-form velocity (x^2 - y sin t, -2xy + x cos t), scaled.

    Divergence-free for every t and exactly representable in P2.
    """

    def u(x, y, t):
        return (scale * (x ** 2 - y * np.sin(t)),
                scale * (-2.0 * x * y + x * np.cos(t)))

    return u


def mms_pressure(scale: float = 1.0):
    """Closed-form pressure (x+y-1) sin t: linear and mean-zero on (0,1)^2."""

    def p(x, y, t):
        return scale * (x + y - 1.0) * np.sin(t)

    return p


def mms_forcing(scale: float, nu: float):
    """Forcing that makes (scale*u, scale*p) solve the momentum equation
    with viscosity scale*nu.

    f = s u_t + s^2 (u . grad) u - s^2 nu Lap(u) + s grad p with the base
    fields of mms_velocity / mms_pressure.
    """
    s = scale

    def f(x, y, t):
        st, ct = np.sin(t), np.cos(t)
        u1 = x ** 2 - y * st
        u2 = -2.0 * x * y + x * ct
        conv1 = u1 * (2.0 * x) + u2 * (-st)
        conv2 = u1 * (-2.0 * y + ct) + u2 * (-2.0 * x)
        fx = s * (-y * ct) + s * s * conv1 - s * s * nu * 2.0 + s * st
        fy = s * (-x * st) + s * s * conv2 + s * st
        return fx, fy

    return f


def mms_ensemble(J: int, eps: float, nu: float) -> dict:
    """Per-member exact fields, forcings, and viscosities of the study."""
    scales = mms_scales(J, eps)
    return {
        "scales": scales,
        "nus": tuple(s * nu for s in scales),
        "velocity": [mms_velocity(s) for s in scales],
        "pressure": [mms_pressure(s) for s in scales],
        "forcing": [mms_forcing(s, nu) for s in scales],
    }


def velocity_error_l2(space: TaylorHoodSpace, values: np.ndarray,
                      exact, t: float) -> float:
    """L2 distance between a discrete velocity and a closed-form field."""
    ux, uy = space.velocity_at_quad(np.asarray(values))
    ex, ey = exact(space.quad_xy[:, :, 0], space.quad_xy[:, :, 1], t)
    return float(np.sqrt(np.sum(space.qw * ((ux - ex) ** 2 + (uy - ey) ** 2))))


def pressure_error_l2(space: TaylorHoodSpace, values: np.ndarray,
                      exact, t: float) -> float:
    """L2 distance between a discrete pressure and a closed-form field."""
    ph = space.pressure_at_quad(np.asarray(values))
    pe = exact(space.quad_xy[:, :, 0], space.quad_xy[:, :, 1], t)
    pe = np.broadcast_to(pe, ph.shape)
    return float(np.sqrt(np.sum(space.qw * (ph - pe) ** 2)))


def convergence_study(dts, n: int = 10, J: int = 2, eps: float = 0.1,
                      nu: float = 1.0, algorithm: str = "A4",
                      gamma: float = 1.5, t_final: float = 1.0,
                      cfl_active: bool = True) -> dict:
    """Temporal-refinement table on the unit square with exact history.

    Runs the manufactured ensemble at each dt on a fixed n-by-n mesh,
    records the per-member velocity and pressure L2 errors at t_final,
    and the observed rates between consecutive halvings.
    Returns {"dts", "velocity_errors" (ndt, J), "pressure_errors",
    "velocity_rates" (ndt-1, J), "pressure_rates"}.
    """
    dts = list(dts)
    mesh = generate_unit_square(n)
    part = BoundaryPartition(dirichlet_tags=(1, 2, 3, 4), open_tags=())
    space = build_space(mesh, part)
    fam = mms_ensemble(J, eps, nu)
    ops = assembly.assemble_core(space)

    vel_err = np.zeros((len(dts), J))
    pr_err = np.zeros((len(dts), J))
    for i, dt in enumerate(dts):
        cfg = ensemble.EnsembleConfig(
            nus=fam["nus"], algorithm=algorithm, dt0=dt, t_final=t_final,
            gamma=gamma, cfl_active=cfl_active)
        initial = [interpolate(space, fam["velocity"][j], 0.0).values
                   for j in range(J)]
        history = None
        if algorithm in ensemble.SECOND_ORDER:
            history = [interpolate(space, fam["velocity"][j], -dt).values
                       for j in range(J)]
        res = ensemble.run(space, cfg, initial, forcings=fam["forcing"],
                           bc=fam["velocity"], history=history, operators=ops)
        t_end = res.state.t
        for j in range(J):
            vel_err[i, j] = velocity_error_l2(space, res.state.u[j],
                                              fam["velocity"][j], t_end)
            pr_err[i, j] = pressure_error_l2(space, res.pressures[j],
                                             fam["pressure"][j], t_end)

    def rates(err):
        out = np.zeros((max(len(dts) - 1, 0), err.shape[1]))
        for i in range(len(dts) - 1):
            ratio = np.log(dts[i] / dts[i + 1])
            out[i] = np.log(err[i] / err[i + 1]) / ratio
        return out

    return {"dts": dts, "velocity_errors": vel_err, "pressure_errors": pr_err,
            "velocity_rates": rates(vel_err), "pressure_rates": rates(pr_err)}


# ---------------------------------------------------------------------------
# Classical single-member reference steppers
# ---------------------------------------------------------------------------


def classical_step(space: TaylorHoodSpace, ops: dict, u: np.ndarray,
                   dt: float, nu: float, t_new: float, u_prev=None,
                   forcing=None, bc=None):
    """One semi-implicit step of a single Navier-Stokes solve.

    Backward Euler when u_prev is None, BDF2 otherwise; the advecting
    field (current value or its two-level extrapolation) enters the
    skew-symmetrized implicit advection. Returns (u_new, p_new).
    """
    m, k = ops["M"], ops["K"]
    if u_prev is None:
        adv = u
        a = (m / dt + nu * k).tocsr()
        rhs = m @ u / dt
    else:
        adv = 2.0 * u - u_prev
        a = (1.5 * m / dt + nu * k).tocsr()
        rhs = m @ (4.0 * u - u_prev) / (2.0 * dt)
    a = a + assembly.convection_b1_matrix(space, adv)
    if forcing is not None:
        rhs = rhs + assembly.rhs_forcing(space, forcing, t_new)
    system = linsolve.SaddleSystem(space, a, ops["B"])
    fact = linsolve.factorize(system)
    g_vals = interpolate(space, bc, t_new).values if bc is not None else None
    sol = fact.solve(system.build_rhs(rhs, g_vals))
    vel, pr = system.split(sol)
    return vel, pr


def classical_run(space: TaylorHoodSpace, nu: float, u0: np.ndarray,
                  dt: float, t_final: float, order: int = 1,
                  forcing=None, bc=None, history=None):
    """Integrate one member with the classical scheme; returns the
    velocity trajectory [(t, u)] and the final pressure."""
    ops = assembly.assemble_core(space)
    u = np.asarray(u0, dtype=float)
    u_prev = None if order == 1 else (np.asarray(history, float)
                                      if history is not None else None)
    t = 0.0
    traj = [(0.0, u.copy())]
    p = np.zeros(space.n_pr)
    while t < t_final - 1e-12:
        step_dt = min(dt, t_final - t)
        if order == 2 and u_prev is None:
            u_new, p = classical_step(space, ops, u, step_dt, nu,
                                      t + step_dt, None, forcing, bc)
        else:
            u_new, p = classical_step(space, ops, u, step_dt, nu, t + step_dt,
                                      u_prev if order == 2 else None,
                                      forcing, bc)
        u_prev = u if order == 2 else None
        u = u_new
        t += step_dt
        traj.append((t, u.copy()))
    return traj, p


def solve_stokes(space: TaylorHoodSpace, nu: float, forcing=None, bc=None,
                 t: float = 0.0):
    """Steady Stokes solve, used to manufacture initial ensembles."""
    ops = assembly.assemble_core(space)
    system = linsolve.SaddleSystem(space, (nu * ops["K"]).tocsr(), ops["B"])
    fact = linsolve.factorize(system)
    rhs = (assembly.rhs_forcing(space, forcing, t) if forcing is not None
           else np.zeros(space.n_vel))
    g_vals = interpolate(space, bc, t).values if bc is not None else None
    sol = fact.solve(system.build_rhs(rhs, g_vals))
    return system.split(sol)


# ---------------------------------------------------------------------------
# Output functionals
# ---------------------------------------------------------------------------


def _surface_indicator(space: TaylorHoodSpace, tag: int) -> np.ndarray:
    """Scalar P2 field equal to 1 on all dofs of the tagged boundary."""
    w = np.zeros(space.n_p2)
    on_tag = space.mesh.boundary_tags == tag
    if not on_tag.any():
        raise ValueError(f"no boundary edges carry tag {tag}")
    w[space.be_dofs[on_tag].ravel()] = 1.0
    return w


def drag_lift_dp(space: TaylorHoodSpace, u_new: np.ndarray, u_old: np.ndarray,
                 p: np.ndarray, dt: float, nu: float, forcing=None,
                 t: float | None = None, surface_tag: int = TAG_CYLINDER,
                 probes=((0.15, 0.2), (0.25, 0.2)), scale: float = 20.0,
                 operators: dict | None = None) -> dict:
    """Drag and lift coefficients on a tagged surface, plus a two-point
    pressure difference.

    The surface force is evaluated through the volume residual of the
    momentum equation tested with an indicator field of the surface dofs
    (the consistent-flux form), which is markedly more accurate than
    boundary quadrature on Taylor-Hood. scale=20 is the standard
    2/(rho Ubar^2 D) normalization of the 2D cylinder benchmark.
    """
    ops = operators or assembly.assemble_core(space)
    ind = _surface_indicator(space, surface_tag)
    resid = (ops["M"] @ ((u_new - u_old) / dt)
             + assembly.convection_matrix(space, u_new) @ u_new
             + nu * (ops["K"] @ u_new)
             - ops["B"].T @ p)
    if forcing is not None:
        resid -= assembly.rhs_forcing(space, forcing, 0.0 if t is None else t)
    n2 = space.n_p2
    wx = np.concatenate([ind, np.zeros(n2)])
    wy = np.concatenate([np.zeros(n2), ind])
    fx = -float(wx @ resid)
    fy = -float(wy @ resid)
    dp = (pressure_at_point(space, p, *probes[0])
          - pressure_at_point(space, p, *probes[1]))
    return {"c_d": scale * fx, "c_l": scale * fy, "dp": dp,
            "fx": fx, "fy": fy}


def pressure_at_point(space: TaylorHoodSpace, p: np.ndarray,
                      x: float, y: float) -> float:
    """Pointwise pressure by locating the containing triangle (P1 interp)."""
    verts = space.mesh.vertices
    tris = space.mesh.triangles
    a = verts[tris[:, 0]]
    b = verts[tris[:, 1]]
    c = verts[tris[:, 2]]
    det = ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
           - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1]))
    l1 = ((b[:, 0] - x) * (c[:, 1] - y) - (c[:, 0] - x) * (b[:, 1] - y)) / det
    l2 = ((c[:, 0] - x) * (a[:, 1] - y) - (a[:, 0] - x) * (c[:, 1] - y)) / det
    l3 = 1.0 - l1 - l2
    tol = -1e-10
    inside = (l1 >= tol) & (l2 >= tol) & (l3 >= tol)
    if not inside.any():
        raise ValueError(f"probe point ({x}, {y}) lies outside the mesh")
    i = int(np.argmax(inside))
    lam = np.array([l1[i], l2[i], l3[i]])
    return float(lam @ p[tris[i]])


# ---------------------------------------------------------------------------
# Benchmark configurations
# ---------------------------------------------------------------------------


def cylinder_inflow(height: float = 0.41, umax: float = 1.5,
                    period: float = 8.0, hole=(0.2, 0.2, 0.05)):
    """Pulsating parabolic channel profile, zeroed near the interior
    obstacle so the same callable can feed every Dirichlet dof."""
    cx, cy, r = hole
    peak = 4.0 * umax / height ** 2

    def g(x, y, t):
        prof = peak * np.sin(np.pi * t / period) * y * (height - y)
        near = (x - cx) ** 2 + (y - cy) ** 2 <= (1.6 * r) ** 2
        return np.where(near, 0.0, prof), np.zeros_like(np.asarray(prof) + x)

    return g


def cylinder_config(coarse: bool = True) -> dict:
    """Pulsating flow past a cylinder in a 2.2 x 0.41 channel, J=3.

    coarse=True builds a CI-sized mesh (a few thousand dofs); otherwise a
    resolution comparable to the published benchmark runs.
    """
    if coarse:
        nx, ny = 44, 9
    else:
        nx, ny = 102, 19
    mesh = generate_channel(2.2, 0.41, nx, ny, hole=(0.2, 0.2, 0.05))
    part = BoundaryPartition(dirichlet_tags=(1, 3, 4), open_tags=(2,))
    return {
        "mesh": mesh,
        "partition": part,
        "nus": (1.0 / 1000.0, 1.0 / 900.0, 1.0 / 800.0),
        "algorithm": "A5",
        "gamma": 1.5,
        "L": 0.01,
        "dt0": 0.004,
        "t_final": 2.0 if coarse else 8.0,
        "inflow": cylinder_inflow(),
        "surface_tag": TAG_CYLINDER,
        "probes": ((0.15, 0.2), (0.25, 0.2)),
    }


def contraction_polygon():
    """Channel with a bottom contraction block and two outlets.

    Representative coordinates (inlet height 1 at x=0; a throat of height
    0.5 over x in [3,4]; a top opening over x in [5.5,6.5]; the channel
    end at x=8): runs on it are qualitative.
    """
    return [(0.0, 0.0), (3.0, 0.0), (3.0, 0.5), (4.0, 0.5), (4.0, 0.0),
            (8.0, 0.0), (8.0, 1.0), (6.5, 1.0), (5.5, 1.0), (0.0, 1.0)]


def contraction_tag(xm: float, ym: float) -> int:
    """Boundary tag of a contraction-channel edge midpoint: 1 inlet,
    2 outlets (channel end and the top opening), 3 walls."""
    if xm < 1e-9:
        return 1
    if xm > 8.0 - 1e-9:
        return 2
    if ym > 1.0 - 1e-9 and 5.5 - 1e-9 <= xm <= 6.5 + 1e-9:
        return 2
    return 3


_contraction_tag = contraction_tag


def contraction_config(h: float = 0.12) -> dict:
    """Contraction channel with a top and an end outlet, J=3.

    Inlet profiles are (4y(1-y), 0) scaled by (1, 1+eps, 1-eps); initial
    data comes from Stokes solves with three perturbed body forces.
    """
    mesh = generate_polygon_mesh(contraction_polygon(), h, _contraction_tag)
    part = BoundaryPartition(dirichlet_tags=(1, 3), open_tags=(2,))
    eps = 1e-2

    def inlet(scale):
        def g(x, y, t):
            prof = np.where(np.asarray(x) < 1e-9,
                            scale * 4.0 * y * (1.0 - y), 0.0)
            return prof, np.zeros_like(prof)

        return g

    def f2(x, y, t):
        return (eps * np.cos(np.pi * x * y + t),
                eps * np.sin(np.pi * (x + y) + t))

    def f3(x, y, t):
        return (eps * np.sin(np.pi * (x + y) + t),
                eps * np.cos(np.pi * x * y + t))

    return {
        "mesh": mesh,
        "partition": part,
        "nus": (0.001, 0.003, 0.005),
        "algorithm": "A5",
        "gamma": 1.0,
        "L": 0.01,
        "inv_const_C": 1.0,
        "dt0": 0.01,
        "t_final": 4.0,
        "inlet_bcs": [inlet(1.0), inlet(1.0 + eps), inlet(1.0 - eps)],
        "stokes_forcings": [None, f2, f3],
    }


def calibrate_inverse_constant(space: TaylorHoodSpace, n_samples: int = 50,
                               seed: int = 0) -> float:
    """Empirical constant of the inverse estimate |v|_inf^2 <= (C/h) |grad v|^2.

    Maximizes h |v|_inf^2 / |grad v|^2 over random interior velocity
    fields; the result feeds the gradient-based timestep conditions.
    """
    rng = np.random.default_rng(seed)
    h = mesh_metrics(space.mesh)["h"]
    best = 0.0
    for _ in range(n_samples):
        v = rng.standard_normal(space.n_vel)
        v[space.dirichlet_vel_dofs] = 0.0
        f = FEFunction(space, "velocity", v)
        from .fespace import inf_norms

        vinf = inf_norms(f)["value_inf"]
        grad2 = norms(f)["H1_semi"] ** 2
        if grad2 > 0:
            best = max(best, h * vinf ** 2 / grad2)
    return best
