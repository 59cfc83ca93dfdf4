"""Manufactured solutions, reference steppers, and output functionals."""

import numpy as np
import pytest
import sympy as sy

from ensflow import assembly, experiments
from ensflow.fespace import build_space, interpolate
from ensflow.mesh import BoundaryPartition, generate_unit_square, mesh_metrics


@pytest.fixture(scope="module")
def sq():
    return build_space(generate_unit_square(5),
                       BoundaryPartition((1, 2, 3, 4), ()))


def test_mms_scales():
    assert experiments.mms_scales(2, 0.1) == pytest.approx([1.1, 0.9])
    assert experiments.mms_scales(4, 0.2) == pytest.approx(
        [1.2, 1.4, 0.8, 0.6])


def test_mms_divergence_free():
    u = experiments.mms_velocity(1.3)
    x, y = np.meshgrid(np.linspace(0, 1, 7), np.linspace(0, 1, 7))
    h = 1e-6
    for t in (0.0, 0.7):
        dudx = (u(x + h, y, t)[0] - u(x - h, y, t)[0]) / (2 * h)
        dvdy = (u(x, y + h, t)[1] - u(x, y - h, t)[1]) / (2 * h)
        assert np.abs(dudx + dvdy).max() < 1e-8


def test_mms_point_values():
    u = experiments.mms_velocity(1.0)
    ux, uy = u(1.0, 0.0, 0.0)
    assert (ux, uy) == pytest.approx((1.0, 1.0))
    # zero perturbation reproduces the base field
    u2 = experiments.mms_velocity(1.0)
    assert u2(0.3, 0.4, 0.5) == pytest.approx(u(0.3, 0.4, 0.5))


def test_mms_forcing_at_origin():
    f = experiments.mms_forcing(1.1, 1.0)
    fx, fy = f(0.0, 0.0, 0.0)
    assert fx == pytest.approx(-2.42, abs=1e-14)
    assert fy == pytest.approx(0.0, abs=1e-14)


def test_mms_strong_residual_sympy_oracle():
    # momentum residual of the scaled fields with the generated forcing
    # vanishes identically (symbolic-differentiation oracle)
    x, y, t = sy.symbols("x y t")
    s, nu = sy.Rational(11, 10), sy.Rational(1)
    u1 = s * (x ** 2 - y * sy.sin(t))
    u2 = s * (-2 * x * y + x * sy.cos(t))
    p = s * (x + y - 1) * sy.sin(t)
    fx = (sy.diff(u1, t) + u1 * sy.diff(u1, x) + u2 * sy.diff(u1, y)
          - s * nu * (sy.diff(u1, x, 2) + sy.diff(u1, y, 2)) + sy.diff(p, x))
    fy = (sy.diff(u2, t) + u1 * sy.diff(u2, x) + u2 * sy.diff(u2, y)
          - s * nu * (sy.diff(u2, x, 2) + sy.diff(u2, y, 2)) + sy.diff(p, y))
    f = experiments.mms_forcing(1.1, 1.0)
    rng = np.random.default_rng(0)
    pts = rng.uniform(0.0, 1.0, (20, 3))
    for px, py, pt in pts:
        gx, gy = f(px, py, pt)
        ex = float(fx.subs({x: px, y: py, t: pt}))
        ey = float(fy.subs({x: px, y: py, t: pt}))
        assert gx == pytest.approx(ex, abs=1e-12)
        assert gy == pytest.approx(ey, abs=1e-12)


def test_error_functionals_exact_fields(sq):
    u = experiments.mms_velocity(1.0)
    p = experiments.mms_pressure(1.0)
    uv = interpolate(sq, u, 0.5).values
    assert experiments.velocity_error_l2(sq, uv, u, 0.5) < 1e-13
    pv = p(sq.mesh.vertices[:, 0], sq.mesh.vertices[:, 1], 0.5)
    assert experiments.pressure_error_l2(sq, pv, p, 0.5) < 1e-14


def test_spatial_exactness_across_meshes():
    # same dt on two meshes: the final-time error moves by far less than
    # a spatial-order factor, confirming the error is purely temporal
    errs = []
    for n in (6, 12):
        tab = experiments.convergence_study([0.05], n=n, t_final=0.2)
        errs.append(tab["pressure_errors"][0, 0])
    assert abs(errs[1] - errs[0]) < 0.05 * max(errs)


def test_classical_be_first_order_rate(sq):
    u = experiments.mms_velocity(1.0)
    f = experiments.mms_forcing(1.0, 1.0)
    errs = []
    for dt in (0.1, 0.05):
        u0 = interpolate(sq, u, 0.0).values
        traj, _ = experiments.classical_run(sq, 1.0, u0, dt, 0.5, order=1,
                                            forcing=f, bc=u)
        t_end, u_end = traj[-1]
        errs.append(experiments.velocity_error_l2(sq, u_end, u, t_end))
    rate = np.log2(errs[0] / errs[1])
    assert rate == pytest.approx(1.0, abs=0.25)


def test_solve_stokes_quadratic_exact(sq):
    nu = 0.7

    def f(x, y, t):
        return (-2.0 * nu + 1.0) + 0.0 * x, -2.0 * nu + 0.0 * x

    def uex(x, y, t):
        return y ** 2, x ** 2

    vel, pr = experiments.solve_stokes(sq, nu, forcing=f, bc=uex)
    assert np.abs(vel - interpolate(sq, uex).values).max() < 1e-10


def test_pressure_at_point(sq):
    p = sq.mesh.vertices[:, 0] + 2.0 * sq.mesh.vertices[:, 1]
    assert experiments.pressure_at_point(sq, p, 0.33, 0.41) == pytest.approx(
        0.33 + 0.82, abs=1e-12)
    with pytest.raises(ValueError):
        experiments.pressure_at_point(sq, p, 3.0, 3.0)


def test_drag_lift_zero_flow_and_uniform_pressure():
    cfgd = experiments.cylinder_config(coarse=True)
    space = build_space(cfgd["mesh"], cfgd["partition"])
    z = np.zeros(space.n_vel)
    res = experiments.drag_lift_dp(space, z, z, np.zeros(space.n_pr), 0.1,
                                   0.001)
    assert res["c_d"] == pytest.approx(0.0, abs=1e-12)
    assert res["c_l"] == pytest.approx(0.0, abs=1e-12)
    assert res["dp"] == pytest.approx(0.0, abs=1e-12)
    # uniform pressure on a closed surface: no net force, no pressure drop
    res = experiments.drag_lift_dp(space, z, z,
                                   3.7 * np.ones(space.n_pr), 0.1, 0.001)
    assert res["c_d"] == pytest.approx(0.0, abs=1e-9)
    assert res["c_l"] == pytest.approx(0.0, abs=1e-9)
    assert res["dp"] == pytest.approx(0.0, abs=1e-12)


def test_cylinder_config_coarse_size():
    cfgd = experiments.cylinder_config(coarse=True)
    space = build_space(cfgd["mesh"], cfgd["partition"])
    assert space.n_vel + space.n_pr <= 5000
    assert cfgd["nus"] == pytest.approx((1e-3, 1.0 / 900.0, 1.0 / 800.0))


def test_cylinder_inflow_profile():
    g = experiments.cylinder_inflow()
    gx, gy = g(0.0, 0.205, 2.0)
    expected = (6.0 / 0.41 ** 2) * np.sin(np.pi * 2.0 / 8.0) * 0.205 * 0.205
    assert float(gx) == pytest.approx(expected, rel=1e-12)
    assert float(gy) == 0.0
    # zeroed near the obstacle
    gx, gy = g(0.2, 0.25, 2.0)
    assert float(gx) == 0.0


def test_contraction_config_builds():
    cfgd = experiments.contraction_config(h=0.2)
    mesh = cfgd["mesh"]
    space = build_space(mesh, cfgd["partition"])
    assert space.be_open_mask.any()
    m = mesh_metrics(mesh)
    assert m["area"] == pytest.approx(8.0 - 0.5, rel=0.05)
    assert len(cfgd["inlet_bcs"]) == 3
    assert len(cfgd["stokes_forcings"]) == 3


def test_calibrate_inverse_constant(sq):
    c = experiments.calibrate_inverse_constant(sq, n_samples=20)
    assert 0.0 < c < 50.0
