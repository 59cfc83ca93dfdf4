"""Assembly of the bilinear operators and advection forms of the schemes.

All advection forms act on velocity fields (x-block then y-block layout):

    b(u, v, w)  = ((u . grad) v, w)
    b1(u, v, w) = b(u, v, w) + (div u, w . v) / 2
    b2(u, v, w) = -((u.n) theta0(u.n), v . w)_{Gamma_N} / 2
    b3(u, v, w) = (b(u, v, w) - b(u, w, v)) / 2

Matrix conventions: for any assembled advection matrix N(w),
z^T N(w) v equals the corresponding form with advecting field w,
trial field v, and test field z.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .fespace import FEFunction, TaylorHoodSpace, ThetaParams, theta0, theta1


def _scatter_scalar(space: TaylorHoodSpace, local) -> sp.csr_matrix:
    """Scatter (nt, 6, 6) local blocks into a scalar-P2 sparse matrix."""
    d = space.tri_dofs
    rows = np.broadcast_to(d[:, :, None], local.shape)
    cols = np.broadcast_to(d[:, None, :], local.shape)
    a = sp.coo_matrix((local.ravel(), (rows.ravel(), cols.ravel())),
                      shape=(space.n_p2, space.n_p2))
    return a.tocsr()


def _vector_blockdiag(a_scalar: sp.csr_matrix) -> sp.csr_matrix:
    """Apply a scalar operator identically to both velocity components."""
    return sp.block_diag((a_scalar, a_scalar), format="csr")


def assemble_core(space: TaylorHoodSpace) -> dict:
    """Velocity mass M, stiffness K, divergence coupling B, and the
    open-boundary mass M_gamma.

    B has pressure rows and velocity columns: (B u)_q = (div u, psi_q).
    M_gamma is the velocity boundary mass over the open boundary (zero
    matrix when the open boundary is empty).
    """
    qw, phi, dphi, psi = space.qw, space.phi, space.dphi, space.psi

    m_local = np.einsum("tq,qi,qj->tij", qw, phi, phi)
    k_local = np.einsum("tq,tqie,tqje->tij", qw, dphi, dphi)
    m_s = _scatter_scalar(space, m_local)
    k_s = _scatter_scalar(space, k_local)

    bx_local = np.einsum("tq,qk,tqj->tkj", qw, psi, dphi[:, :, :, 0])
    by_local = np.einsum("tq,qk,tqj->tkj", qw, psi, dphi[:, :, :, 1])
    prows = np.broadcast_to(space.mesh.triangles[:, :, None], bx_local.shape)
    vcols = np.broadcast_to(space.tri_dofs[:, None, :], bx_local.shape)
    shape = (space.n_pr, space.n_p2)
    bx = sp.coo_matrix((bx_local.ravel(), (prows.ravel(), vcols.ravel())), shape=shape)
    by = sp.coo_matrix((by_local.ravel(), (prows.ravel(), vcols.ravel())), shape=shape)
    b = sp.hstack([bx.tocsr(), by.tocsr()], format="csr")

    return {"M": _vector_blockdiag(m_s), "K": _vector_blockdiag(k_s),
            "B": b, "M_gamma": boundary_mass(space)}


def scalar_mass_stiffness(space: TaylorHoodSpace):
    """Scalar-P2 mass and stiffness matrices (one component, no BCs)."""
    m_local = np.einsum("tq,qi,qj->tij", space.qw, space.phi, space.phi)
    k_local = np.einsum("tq,tqie,tqje->tij", space.qw, space.dphi, space.dphi)
    return _scatter_scalar(space, m_local), _scatter_scalar(space, k_local)


def boundary_mass(space: TaylorHoodSpace, weights=None,
                  region: str = "open") -> sp.csr_matrix:
    """Velocity boundary mass matrix, optionally with a pointwise weight.

    weights: (n_edges_in_region, nqe) values multiplying the integrand at
    the edge quadrature points. region: "open" or "all".
    """
    mask = _region_mask(space, region)
    n = space.n_vel
    if not mask.any():
        return sp.csr_matrix((n, n))
    w = space.be_w[mask]
    if weights is not None:
        w = w * weights
    tr = space.be_trace
    local = np.einsum("es,si,sj->eij", w, tr, tr)
    d = space.be_dofs[mask]
    rows = np.broadcast_to(d[:, :, None], local.shape)
    cols = np.broadcast_to(d[:, None, :], local.shape)
    a = sp.coo_matrix((local.ravel(), (rows.ravel(), cols.ravel())),
                      shape=(space.n_p2, space.n_p2)).tocsr()
    return _vector_blockdiag(a)


def _region_mask(space, region):
    if region == "open":
        return space.be_open_mask
    if region == "all":
        return np.ones(len(space.be_dofs), dtype=bool)
    raise ValueError(f"unknown boundary region {region!r}")


def _velocity_values(w) -> np.ndarray:
    if isinstance(w, FEFunction):
        if w.kind != "velocity":
            raise ValueError("advecting field must be a velocity")
        return w.values
    return np.asarray(w)


def convection_matrix(space: TaylorHoodSpace, w) -> sp.csr_matrix:
    """Plain advection matrix C(w): z^T C(w) v = b(w, v, z)."""
    wv = _velocity_values(w)
    wx, wy = space.velocity_at_quad(wv)
    adv = wx[:, :, None] * space.dphi[:, :, :, 0] + wy[:, :, None] * space.dphi[:, :, :, 1]
    local = np.einsum("tq,qi,tqj->tij", space.qw, space.phi, adv)
    return _vector_blockdiag(_scatter_scalar(space, local))


def convection_b1_matrix(space: TaylorHoodSpace, w) -> sp.csr_matrix:
    """Skew-symmetrized advection N1(w): z^T N1(w) v = b1(w, v, z)."""
    wv = _velocity_values(w)
    wx, wy = space.velocity_at_quad(wv)
    divw = space.divergence_at_quad(wv)
    adv = wx[:, :, None] * space.dphi[:, :, :, 0] + wy[:, :, None] * space.dphi[:, :, :, 1]
    local = np.einsum("tq,qi,tqj->tij", space.qw, space.phi, adv)
    local += 0.5 * np.einsum("tq,qi,qj->tij", space.qw * divw, space.phi, space.phi)
    return _vector_blockdiag(_scatter_scalar(space, local))


def convection_b3_matrix(space: TaylorHoodSpace, w) -> sp.csr_matrix:
    """Antisymmetrized advection N3(w): z^T N3(w) v = b3(w, v, z)."""
    c = convection_matrix(space, w)
    return ((c - c.T) * 0.5).tocsr()


def convection_b2_matrix(space: TaylorHoodSpace, w,
                         theta_params: ThetaParams) -> sp.csr_matrix:
    """Backflow-penalization matrix N2(w): z^T N2(w) v = b2(w, v, z).

    Supported only on open-boundary dofs; raises when the open boundary
    is empty.
    """
    if not space.be_open_mask.any():
        raise ValueError("open boundary is empty; the backflow form is undefined")
    wv = _velocity_values(w)
    bx, by = space.velocity_at_boundary_quad(wv, space.be_open_mask)
    n = space.be_normal[space.be_open_mask]
    un = bx * n[:, 0:1] + by * n[:, 1:2]
    weight = -0.5 * un * theta0(un, theta_params)
    return boundary_mass(space, weights=weight, region="open")


def trilinear(form_id: str, u: FEFunction, v: FEFunction, w: FEFunction,
              theta_params: ThetaParams | None = None) -> float:
    """Evaluate one of the advection forms by quadrature."""
    for f in (u, v, w):
        if f.kind != "velocity":
            raise ValueError("advection forms take velocity fields")
    space = u.space
    if form_id == "b":
        return _b_plain(space, u.values, v.values, w.values)
    if form_id == "b1":
        val = _b_plain(space, u.values, v.values, w.values)
        divu = space.divergence_at_quad(u.values)
        vx, vy = space.velocity_at_quad(v.values)
        wx, wy = space.velocity_at_quad(w.values)
        return val + 0.5 * float(np.sum(space.qw * divu * (vx * wx + vy * wy)))
    if form_id == "b2":
        params = theta_params or ThetaParams()
        if not space.be_open_mask.any():
            raise ValueError("open boundary is empty; the backflow form is undefined")
        mask = space.be_open_mask
        ax, ay = space.velocity_at_boundary_quad(u.values, mask)
        n = space.be_normal[mask]
        un = ax * n[:, 0:1] + ay * n[:, 1:2]
        vx, vy = space.velocity_at_boundary_quad(v.values, mask)
        wx, wy = space.velocity_at_boundary_quad(w.values, mask)
        integrand = -0.5 * un * theta0(un, params) * (vx * wx + vy * wy)
        return float(np.sum(space.be_w[mask] * integrand))
    if form_id == "b3":
        return 0.5 * (_b_plain(space, u.values, v.values, w.values)
                      - _b_plain(space, u.values, w.values, v.values))
    raise ValueError(f"unknown form id {form_id!r}")


def _b_plain(space, uv, vv, wv):
    ux, uy = space.velocity_at_quad(uv)
    g = space.velocity_grad_at_quad(vv)
    wx, wy = space.velocity_at_quad(wv)
    conv_x = ux * g[:, :, 0, 0] + uy * g[:, :, 0, 1]
    conv_y = ux * g[:, :, 1, 0] + uy * g[:, :, 1, 1]
    return float(np.sum(space.qw * (conv_x * wx + conv_y * wy)))


def boundary_flux_quadratic(space: TaylorHoodSpace, a_values, b_values,
                            theta_params: ThetaParams | None = None,
                            region: str = "all") -> float:
    """Integral of (a.n)/2 |b|^2 over a boundary region.

    With theta_params given, the integrand is additionally weighted by
    theta1(a.n); this is the outflow-ledger term of the open-boundary
    energy estimates.
    """
    mask = _region_mask(space, region)
    if not mask.any():
        return 0.0
    ax, ay = space.velocity_at_boundary_quad(np.asarray(a_values), mask)
    n = space.be_normal[mask]
    an = ax * n[:, 0:1] + ay * n[:, 1:2]
    bx, by = space.velocity_at_boundary_quad(np.asarray(b_values), mask)
    integrand = 0.5 * an * (bx ** 2 + by ** 2)
    if theta_params is not None:
        integrand = integrand * theta1(an, theta_params)
    return float(np.sum(space.be_w[mask] * integrand))


def boundary_inner(space: TaylorHoodSpace, a_values, b_values,
                   region: str = "all") -> float:
    """Integral of a . b over a boundary region."""
    mask = _region_mask(space, region)
    if not mask.any():
        return 0.0
    ax, ay = space.velocity_at_boundary_quad(np.asarray(a_values), mask)
    bx, by = space.velocity_at_boundary_quad(np.asarray(b_values), mask)
    return float(np.sum(space.be_w[mask] * (ax * bx + ay * by)))


def rhs_forcing(space: TaylorHoodSpace, f, t: float) -> np.ndarray:
    """Load vector with components (f(t) . phi_i) by quadrature.

    f(x, y, t) must return the two force components for array inputs.
    """
    x = space.quad_xy[:, :, 0]
    y = space.quad_xy[:, :, 1]
    fx, fy = f(x, y, t)
    fx = np.broadcast_to(fx, x.shape)
    fy = np.broadcast_to(fy, x.shape)
    out = np.zeros(space.n_vel)
    lx = np.einsum("tq,qi->ti", space.qw * fx, space.phi)
    ly = np.einsum("tq,qi->ti", space.qw * fy, space.phi)
    np.add.at(out, space.tri_dofs, lx)
    np.add.at(out, space.n_p2 + space.tri_dofs, ly)
    return out
