"""Taylor-Hood (P2 velocity / P1 pressure) spaces on triangle meshes.

Provides dof layout, interpolation, quadrature-backed norms, discrete
sup-norms, and the smoothed switch functions used for backflow control
on open boundaries.

Velocity dof layout: scalar P2 dofs are [vertex dofs | edge-midpoint dofs];
a velocity vector stacks the x-component block before the y-component block.
Pressure dofs are the P1 vertex values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import Mesh, BoundaryPartition


# Degree-6 exact quadrature on the reference triangle (12 points).
# Barycentric coordinates; weights sum to 1 and scale with element area.
_BARY_GROUPS = [
    (0.873821971016996, 0.063089014491502, 0.050844906370207),
    (0.501426509658179, 0.249286745170910, 0.116786275726379),
]
_BARY_6PERM = (0.636502499121399, 0.310352451033785, 0.053145049844816,
               0.082851075618374)


def _triangle_rule():
    pts, wts = [], []
    for a, b, w in _BARY_GROUPS:
        for lam in ((a, b, b), (b, a, b), (b, b, a)):
            pts.append(lam)
            wts.append(w)
    a, b, c, w = _BARY_6PERM
    import itertools

    for lam in set(itertools.permutations((a, b, c))):
        pts.append(lam)
        wts.append(w)
    lam = np.array(pts)
    # The published weights sum to 1; scale to the reference-triangle area.
    return np.column_stack([lam[:, 1], lam[:, 2]]), 0.5 * np.array(wts)

TRI_QP, TRI_QW = _triangle_rule()        # reference (x, y) and weights (sum 1/2)
N_TRI_QP = len(TRI_QW)

# 4-point Gauss rule on [0, 1] (degree-7 exact) for boundary edges.
_gx, _gw = np.polynomial.legendre.leggauss(4)
EDGE_QP = 0.5 * (_gx + 1.0)
EDGE_QW = 0.5 * _gw


def p2_shape(xy):
    """P2 basis values and reference gradients at points xy (nq, 2).

    Local order: three vertices, then the edge midpoints opposite each
    vertex. Returns (values (nq, 6), gradients (nq, 6, 2)).
    """
    x, y = xy[:, 0], xy[:, 1]
    lam = np.column_stack([1.0 - x - y, x, y])
    dlam = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    nq = len(x)
    vals = np.empty((nq, 6))
    grads = np.empty((nq, 6, 2))
    for i in range(3):
        vals[:, i] = lam[:, i] * (2.0 * lam[:, i] - 1.0)
        grads[:, i] = (4.0 * lam[:, i, None] - 1.0) * dlam[i]
    for i, (j, k) in enumerate(((1, 2), (2, 0), (0, 1))):
        vals[:, 3 + i] = 4.0 * lam[:, j] * lam[:, k]
        grads[:, 3 + i] = 4.0 * (lam[:, j, None] * dlam[k] + lam[:, k, None] * dlam[j])
    return vals, grads


def p1_shape(xy):
    """P1 basis values at reference points xy (nq, 2); shape (nq, 3)."""
    x, y = xy[:, 0], xy[:, 1]
    return np.column_stack([1.0 - x - y, x, y])


def _edge_trace_shape(s):
    """P2 trace on an edge at parameters s in [0, 1].

    Order: endpoint a, endpoint b, midpoint dof. Shape (ns, 3).
    """
    return np.column_stack([(1.0 - s) * (1.0 - 2.0 * s),
                            s * (2.0 * s - 1.0),
                            4.0 * s * (1.0 - s)])


@dataclass(frozen=True)
class ThetaParams:
    """Parameters of the smoothed backflow switch.

    theta0(s) = (1 - tanh(s / (epsilon * U0))) / 2 approximates the
    indicator of s < 0; epsilon is dimensionless, U0 a reference speed.
    """

    epsilon: float = 0.01
    U0: float = 1.0

    def __post_init__(self):
        if self.epsilon <= 0 or self.U0 <= 0:
            raise ValueError("epsilon and U0 must be positive")


def theta0(s, params: ThetaParams):
    return 0.5 * (1.0 - np.tanh(np.asarray(s, dtype=float)
                                / (params.epsilon * params.U0)))


def theta1(s, params: ThetaParams):
    return 1.0 - theta0(s, params)


def theta(s, params: ThetaParams):
    """Both switch values at s; they sum to 1 exactly."""
    t0 = theta0(s, params)
    return {"theta0": t0, "theta1": 1.0 - t0}


class TaylorHoodSpace:
    """P2/P1 mixed space with precomputed element quadrature data.

    Attributes
    ----------
    n_p2 : scalar P2 dof count (= #vertices + #edges)
    n_vel : velocity dof count (= 2 * n_p2)
    n_pr : pressure dof count (= #vertices)
    tri_dofs : (nt, 6) global scalar-P2 dofs per triangle
    qw : (nt, nq) physical quadrature weights
    dphi : (nt, nq, 6, 2) physical P2 gradients at quadrature points
    dirichlet_scalar_dofs : sorted array of constrained scalar P2 dofs
    """

    def __init__(self, mesh: Mesh, partition: BoundaryPartition):
        partition.validate(mesh)
        self.mesh = mesh
        self.partition = partition
        nv, ne = mesh.n_vertices, mesh.n_edges
        self.n_p2 = nv + ne
        self.n_vel = 2 * self.n_p2
        self.n_pr = nv

        mids = 0.5 * (mesh.vertices[mesh.edges[:, 0]] + mesh.vertices[mesh.edges[:, 1]])
        self.p2_coords = np.vstack([mesh.vertices, mids])

        self.tri_dofs = np.hstack([mesh.triangles, nv + mesh.tri_edges])

        # Element affine maps and quadrature data.
        p = mesh.vertices[mesh.triangles]          # (nt, 3, 2)
        jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)  # (nt,2,2)
        detj = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        inv_jt = np.empty_like(jac)
        inv_jt[:, 0, 0] = jac[:, 1, 1]
        inv_jt[:, 0, 1] = -jac[:, 1, 0]
        inv_jt[:, 1, 0] = -jac[:, 0, 1]
        inv_jt[:, 1, 1] = jac[:, 0, 0]
        inv_jt /= detj[:, None, None]

        self.phi, ref_grad = p2_shape(TRI_QP)      # (nq,6), (nq,6,2)
        self.psi = p1_shape(TRI_QP)                # (nq,3)
        self.qw = np.abs(detj)[:, None] * TRI_QW[None, :]          # (nt, nq)
        self.dphi = np.einsum("qbd,ted->tqbe", ref_grad, inv_jt)   # (nt,nq,6,2)
        dlam = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
        self.dpsi = np.einsum("bd,ted->tbe", dlam, inv_jt)         # (nt,3,2)
        self.quad_xy = (p[:, None, 0, :]
                        + np.einsum("qd,tcd->tqc", TRI_QP, jac))   # (nt,nq,2)

        self._setup_boundary()
        self._setup_constraints()

    # -- boundary quadrature ------------------------------------------------
    def _setup_boundary(self):
        mesh = self.mesh
        nv = mesh.n_vertices
        edge_lookup = {tuple(e): i for i, e in enumerate(map(tuple, mesh.edges))}
        nb = len(mesh.boundary_edges)
        nqe = len(EDGE_QP)
        self.be_dofs = np.empty((nb, 3), dtype=np.int64)
        self.be_qxy = np.empty((nb, nqe, 2))
        self.be_w = np.empty((nb, nqe))
        self.be_normal = mesh.boundary_edge_normals()
        self.be_trace = _edge_trace_shape(EDGE_QP)       # (nqe, 3)
        for i, (a, b) in enumerate(mesh.boundary_edges):
            e = edge_lookup[(min(a, b), max(a, b))]
            self.be_dofs[i] = (a, b, nv + e)
            pa, pb = mesh.vertices[a], mesh.vertices[b]
            self.be_qxy[i] = pa + EDGE_QP[:, None] * (pb - pa)
            self.be_w[i] = np.linalg.norm(pb - pa) * EDGE_QW
        self.be_open_mask = self.partition.open_edge_mask(mesh)
        self.be_dirichlet_mask = self.partition.dirichlet_edge_mask(mesh)

    def _setup_constraints(self):
        dofs = set()
        for i in np.flatnonzero(self.be_dirichlet_mask):
            dofs.update(self.be_dofs[i])
        self.dirichlet_scalar_dofs = np.array(sorted(dofs), dtype=np.int64)
        self.dirichlet_vel_dofs = np.concatenate(
            [self.dirichlet_scalar_dofs, self.n_p2 + self.dirichlet_scalar_dofs])

    # -- field evaluation ---------------------------------------------------
    def velocity_at_quad(self, values):
        """Velocity components at volume quadrature points, two (nt, nq) arrays."""
        ux = values[:self.n_p2][self.tri_dofs]     # (nt, 6)
        uy = values[self.n_p2:][self.tri_dofs]
        return ux @ self.phi.T, uy @ self.phi.T

    def velocity_grad_at_quad(self, values):
        """Gradient tensor at quadrature points, shape (nt, nq, 2, 2)."""
        ux = values[:self.n_p2][self.tri_dofs]
        uy = values[self.n_p2:][self.tri_dofs]
        gx = np.einsum("tb,tqbe->tqe", ux, self.dphi)
        gy = np.einsum("tb,tqbe->tqe", uy, self.dphi)
        return np.stack([gx, gy], axis=2)

    def divergence_at_quad(self, values):
        g = self.velocity_grad_at_quad(values)
        return g[:, :, 0, 0] + g[:, :, 1, 1]

    def velocity_at_boundary_quad(self, values, edge_mask=None):
        """Components at boundary-edge quadrature points, two (nb, nqe) arrays."""
        dofs = self.be_dofs if edge_mask is None else self.be_dofs[edge_mask]
        ux = values[:self.n_p2][dofs] @ self.be_trace.T
        uy = values[self.n_p2:][dofs] @ self.be_trace.T
        return ux, uy

    def pressure_at_quad(self, values):
        return values[self.mesh.triangles] @ self.psi.T


@dataclass
class FEFunction:
    """A finite element field: coefficient vector over a space."""

    space: TaylorHoodSpace
    kind: str          # "velocity" or "pressure"
    values: np.ndarray

    def __post_init__(self):
        expected = self.space.n_vel if self.kind == "velocity" else self.space.n_pr
        if self.kind not in ("velocity", "pressure"):
            raise ValueError(f"unknown field kind {self.kind!r}")
        if len(self.values) != expected:
            raise ValueError(
                f"{self.kind} field needs {expected} coefficients, got {len(self.values)}")

    def copy(self):
        return FEFunction(self.space, self.kind, self.values.copy())


def build_space(mesh: Mesh, partition: BoundaryPartition) -> TaylorHoodSpace:
    """Construct the mixed P2/P1 space with its constrained-dof sets."""
    return TaylorHoodSpace(mesh, partition)


def interpolate(space: TaylorHoodSpace, field, t: float = 0.0,
                kind: str = "velocity") -> FEFunction:
    """Nodal interpolant of a closed-form field.

    field(x, y, t) returns (ux, uy) for velocity or a scalar for pressure;
    it must accept numpy arrays.
    """
    if kind == "velocity":
        x, y = space.p2_coords[:, 0], space.p2_coords[:, 1]
        ux, uy = field(x, y, t)
        vals = np.concatenate([np.broadcast_to(ux, x.shape),
                               np.broadcast_to(uy, x.shape)]).astype(float)
    elif kind == "pressure":
        x, y = space.mesh.vertices[:, 0], space.mesh.vertices[:, 1]
        vals = np.broadcast_to(field(x, y, t), x.shape).astype(float).copy()
    else:
        raise ValueError(f"unknown field kind {kind!r}")
    return FEFunction(space, kind, np.ascontiguousarray(vals))


def norms(f: FEFunction) -> dict:
    """L2 norm, H1 seminorm, and L2 norm of the trace on the open boundary."""
    sp = f.space
    if f.kind == "velocity":
        ux, uy = sp.velocity_at_quad(f.values)
        l2 = np.sqrt(np.sum(sp.qw * (ux ** 2 + uy ** 2)))
        g = sp.velocity_grad_at_quad(f.values)
        h1 = np.sqrt(np.sum(sp.qw * np.sum(g ** 2, axis=(2, 3))))
        if sp.be_open_mask.any():
            bx, by = sp.velocity_at_boundary_quad(f.values, sp.be_open_mask)
            bl2 = np.sqrt(np.sum(sp.be_w[sp.be_open_mask] * (bx ** 2 + by ** 2)))
        else:
            bl2 = 0.0
    else:
        pq = sp.pressure_at_quad(f.values)
        l2 = np.sqrt(np.sum(sp.qw * pq ** 2))
        g = np.einsum("tb,tbe->te", f.values[sp.mesh.triangles], sp.dpsi)
        h1 = np.sqrt(np.sum(sp.qw.sum(axis=1) * np.sum(g ** 2, axis=1)))
        bl2 = 0.0
    return {"L2": float(l2), "H1_semi": float(h1), "boundary_L2": float(bl2)}


def inf_norms(f: FEFunction, theta_params: ThetaParams | None = None) -> dict:
    """Discrete sup-norms over the node + quadrature sample set.

    value_inf: max |u| over P2 nodes and volume quadrature points;
    divergence_inf: max |div u| over volume quadrature points;
    boundary_normal_theta_inf: max |(u.n) theta0(u.n)| over open-boundary
    quadrature points (0 when there is no open boundary).
    """
    if f.kind != "velocity":
        raise ValueError("sup-norms are defined for velocity fields only")
    sp = f.space
    nodal = np.hypot(f.values[:sp.n_p2], f.values[sp.n_p2:])
    ux, uy = sp.velocity_at_quad(f.values)
    value_inf = max(nodal.max(), np.hypot(ux, uy).max())
    div_inf = np.abs(sp.divergence_at_quad(f.values)).max()
    bnt = 0.0
    if sp.be_open_mask.any():
        params = theta_params or ThetaParams()
        bx, by = sp.velocity_at_boundary_quad(f.values, sp.be_open_mask)
        n = sp.be_normal[sp.be_open_mask]
        un = bx * n[:, 0:1] + by * n[:, 1:2]
        bnt = float(np.abs(un * theta0(un, params)).max())
    return {"value_inf": float(value_inf), "divergence_inf": float(div_inf),
            "boundary_normal_theta_inf": bnt}
