"""Saddle-point system construction, reusable sparse LU solves, and the
smallest mixed Dirichlet-Neumann Laplace eigenvalue.

A single factorization of the coupled velocity-pressure matrix is reused
for all right-hand-side columns of an ensemble step; module-level counters
track factorizations and solves so callers can assert the one-factorization
/ J-solves pattern.
"""

from __future__ import annotations

import hashlib

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .assembly import scalar_mass_stiffness
from .fespace import TaylorHoodSpace

COUNTERS = {"factorizations": 0, "solves": 0}


def reset_counters():
    COUNTERS["factorizations"] = 0
    COUNTERS["solves"] = 0


class SingularSystemError(Exception):
    """The coupled matrix is singular after constraints."""


class EigenSolveError(Exception):
    """Eigenvalue iteration failed to converge."""


def matrix_fingerprint(matrix: sp.csr_matrix) -> str:
    """Stable content hash of a CSR matrix (structure and values)."""
    m = matrix.tocsr()
    m.sort_indices()
    h = hashlib.blake2b(digest_size=16)
    h.update(np.asarray(m.shape, dtype=np.int64).tobytes())
    h.update(m.indptr.astype(np.int64).tobytes())
    h.update(m.indices.astype(np.int64).tobytes())
    h.update(m.data.tobytes())
    return h.hexdigest()


class SaddleSystem:
    """Coupled velocity-pressure matrix with constraints applied.

    Layout: velocity block A (n_vel), pressure coupling -B^T / B, and,
    when the open boundary is empty, one extra row/column enforcing a
    zero-mean pressure via a Lagrange multiplier. Velocity Dirichlet dofs
    are imposed strongly: their rows are replaced by identity rows while
    their columns stay intact, so prescribed boundary values couple into
    the interior equations through the solve itself and the coefficient
    matrix stays identical for every ensemble member.
    """

    def __init__(self, space: TaylorHoodSpace, a_vel: sp.spmatrix,
                 b_div: sp.spmatrix, constrained_dofs=None,
                 mean_pressure: bool | None = None):
        self.space = space
        self.n_vel = space.n_vel
        self.n_pr = space.n_pr
        if constrained_dofs is None:
            constrained_dofs = space.dirichlet_vel_dofs
        self.constrained_dofs = np.asarray(constrained_dofs, dtype=np.int64)
        if mean_pressure is None:
            mean_pressure = not space.be_open_mask.any()
        self.mean_pressure = bool(mean_pressure)

        blocks = [[a_vel, -b_div.T], [b_div, None]]
        if self.mean_pressure:
            w = np.zeros(space.n_pr)
            local = np.einsum("tq,qk->tk", space.qw, space.psi)
            np.add.at(w, space.mesh.triangles, local)
            wcol = sp.csr_matrix((w, (np.arange(space.n_pr),
                                      np.zeros(space.n_pr, dtype=int))),
                                 shape=(space.n_pr, 1))
            blocks = [[a_vel, -b_div.T, None],
                      [b_div, None, wcol],
                      [None, wcol.T, None]]
        full = sp.bmat(blocks, format="csr")
        self.n = full.shape[0]

        # Replace constrained velocity rows by identity rows.
        keep = np.ones(self.n)
        keep[self.constrained_dofs] = 0.0
        sel = sp.diags(keep)
        ident = sp.coo_matrix(
            (np.ones(len(self.constrained_dofs)),
             (self.constrained_dofs, self.constrained_dofs)), shape=(self.n, self.n))
        self.matrix = (sel @ full + ident).tocsr()
        self.matrix.sort_indices()
        self.fingerprint = matrix_fingerprint(self.matrix)

    def build_rhs(self, forcing_vel: np.ndarray,
                  dirichlet_values: np.ndarray | None = None) -> np.ndarray:
        """Full-system RHS from a velocity load vector and boundary data."""
        rhs = np.zeros(self.n)
        rhs[:self.n_vel] = forcing_vel
        if dirichlet_values is not None:
            rhs[self.constrained_dofs] = dirichlet_values[self.constrained_dofs]
        else:
            rhs[self.constrained_dofs] = 0.0
        return rhs

    def split(self, solution: np.ndarray):
        """Velocity and pressure parts of a full-system solution."""
        return solution[:self.n_vel], solution[self.n_vel:self.n_vel + self.n_pr]


class Factorization:
    """Reusable sparse LU decomposition with solve accounting."""

    def __init__(self, matrix: sp.spmatrix, fingerprint: str):
        try:
            self.lu = splu(matrix.tocsc())
        except RuntimeError as exc:
            raise SingularSystemError(
                "sparse LU failed: " + str(exc) +
                " (a pure-Dirichlet problem needs the zero-mean pressure "
                "constraint)") from exc
        # SuperLU can silently complete with a near-zero pivot; reject that.
        diag = np.abs(self.lu.U.diagonal())
        if diag.min() < 1e-12 * diag.max():
            raise SingularSystemError(
                "coefficient matrix is numerically singular (a pure-Dirichlet "
                "problem needs the zero-mean pressure constraint)")
        self.fingerprint = fingerprint
        self.n = matrix.shape[0]
        self.solve_count = 0

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve for one RHS vector or a block of RHS columns."""
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape[0] != self.n:
            raise ValueError(f"RHS has {rhs.shape[0]} rows, matrix has {self.n}")
        ncols = 1 if rhs.ndim == 1 else rhs.shape[1]
        x = self.lu.solve(rhs)
        self.solve_count += ncols
        COUNTERS["solves"] += ncols
        return x

    def check_matrix(self, matrix: sp.spmatrix):
        if matrix_fingerprint(matrix) != self.fingerprint:
            raise ValueError("factorization does not match this matrix")


def factorize(system) -> Factorization:
    """Factor a SaddleSystem (or a raw sparse matrix) once."""
    if isinstance(system, SaddleSystem):
        matrix, fp = system.matrix, system.fingerprint
    else:
        matrix = sp.csr_matrix(system)
        fp = matrix_fingerprint(matrix)
    fact = Factorization(matrix, fp)
    COUNTERS["factorizations"] += 1
    return fact


def solve_multi(fact: Factorization, rhs_block: np.ndarray) -> np.ndarray:
    """Solve against J right-hand-side columns with one factorization."""
    return fact.solve(rhs_block)


def smallest_mixed_eigenvalue(k_mat: sp.spmatrix, m_mat: sp.spmatrix,
                              free_dofs, tol: float = 1e-10,
                              max_iter: int = 1000, seed: int = 0) -> float:
    """Smallest eigenvalue of K x = lambda M x on the given free dofs.

    Inverse power iteration with M-normalization, stopping on Rayleigh
    quotient stagnation.
    """
    free = np.asarray(free_dofs, dtype=np.int64)
    if len(free) == 0:
        raise ValueError("no free dofs: the constrained problem is empty")
    kc = k_mat.tocsr()[free][:, free].tocsc()
    mc = m_mat.tocsr()[free][:, free].tocsc()
    lu = splu(kc)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(len(free))
    lam_old = np.inf
    for _ in range(max_iter):
        y = lu.solve(mc @ x)
        y /= np.sqrt(y @ (mc @ y))
        lam = (y @ (kc @ y)) / (y @ (mc @ y))
        x = y
        if abs(lam - lam_old) <= tol * abs(lam):
            resid = np.linalg.norm(kc @ x - lam * (mc @ x))
            if resid <= 1e-8 * np.linalg.norm(kc @ x):
                return float(lam)
        lam_old = lam
    raise EigenSolveError("inverse power iteration did not converge")


def lambda1(space: TaylorHoodSpace, **kwargs) -> float:
    """Smallest mixed Dirichlet-Neumann Laplace eigenvalue on a space.

    Dirichlet on the tagged Dirichlet boundary, natural (Neumann) on the
    rest. Returns 0 when no Dirichlet boundary is present.
    """
    if len(space.dirichlet_scalar_dofs) == 0:
        return 0.0
    m_s, k_s = scalar_mass_stiffness(space)
    free = np.setdiff1d(np.arange(space.n_p2), space.dirichlet_scalar_dofs)
    return smallest_mixed_eigenvalue(k_s, m_s, free, **kwargs)


def export_matrix_market(matrix: sp.spmatrix) -> str:
    """Matrix in MatrixMarket coordinate text, for external debugging."""
    import io

    from scipy.io import mmwrite

    buf = io.BytesIO()
    mmwrite(buf, sp.coo_matrix(matrix))
    return buf.getvalue().decode()
