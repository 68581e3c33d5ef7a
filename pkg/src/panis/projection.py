"""Fixed linear maps between coarse FE nodal values and fine RBF coefficients.

A = a^{-1} B minimizes the squared field mismatch between the coarse P1
reconstruction and the RBF expansion for given nodal values; a is the RBF
Gram matrix, B the cross-Gram against the hat functions, both under the
shared trapezoidal quadrature. The columns of Aperp span the orthogonal
complement of col(A), carrying the fine-scale fluctuations of the
multiscale split.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import NumericalError
from .fem import TriMesh
from .residuals import QuadratureGrid, TrialBasis

__all__ = [
    "ProjectionOperators",
    "build_projection",
    "ortho_complement",
    "coarse_project",
    "hat_matrix",
]


@dataclass
class ProjectionOperators:
    A: np.ndarray  # (d_y, d_Y)
    Aperp: np.ndarray  # (d_y, d_y - d_Y)
    gram: np.ndarray | None = field(default=None, repr=False)
    cross: np.ndarray | None = field(default=None, repr=False)
    gram_cond: float = 0.0
    tikhonov_applied: float = 0.0
    _ata_cho: object = field(default=None, repr=False)

    @property
    def d_y(self) -> int:
        return self.A.shape[0]

    @property
    def d_Y(self) -> int:
        return self.A.shape[1]


def hat_matrix(mesh: TriMesh, quad: QuadratureGrid) -> sp.csc_matrix:
    """P1 hat-function values at the quadrature points, (Q, n_nodes) sparse.

    Points are located in the structured mesh analytically; each row has at
    most three nonzeros (the barycentric coordinates in its triangle).
    """
    n = mesh.n
    m = n + 1
    c = quad.coords
    q = quad.n
    s1 = np.repeat(c, q)
    s2 = np.tile(c, q)
    ix = np.minimum((s1 * n).astype(int), n - 1)
    iy = np.minimum((s2 * n).astype(int), n - 1)
    xi = s1 * n - ix
    eta = s2 * n - iy
    lower = eta <= xi

    n00 = ix * m + iy
    n10 = (ix + 1) * m + iy
    n11 = (ix + 1) * m + (iy + 1)
    n01 = ix * m + (iy + 1)

    rows = np.repeat(np.arange(q * q), 3)
    cols = np.empty((q * q, 3), dtype=np.int64)
    vals = np.empty((q * q, 3))
    # lower triangle (n00, n10, n11): 1-xi, xi-eta, eta
    cols[lower] = np.column_stack([n00[lower], n10[lower], n11[lower]])
    vals[lower] = np.column_stack([1 - xi[lower], xi[lower] - eta[lower], eta[lower]])
    up = ~lower
    # upper triangle (n00, n11, n01): 1-eta, xi, eta-xi
    cols[up] = np.column_stack([n00[up], n11[up], n01[up]])
    vals[up] = np.column_stack([1 - eta[up], xi[up], eta[up] - xi[up]])
    return sp.csc_matrix((vals.ravel(), (rows, cols.ravel())), shape=(q * q, m * m))


def build_projection(trial: TrialBasis, mesh: TriMesh, quad: QuadratureGrid,
                     *, cond_limit: float = 1e12,
                     tikhonov: str = "auto") -> ProjectionOperators:
    """Assemble a, B, A = a^{-1} B and the orthonormal complement basis.

    The Gram factorizes as kron(a1, a1), so its condition number is known
    exactly from the 1-D factor. ``tikhonov="auto"`` adds the relative floor
    1e-10 * trace(a)/d_y when conditioning exceeds ``cond_limit``;
    ``"off"`` raises instead.
    """
    if quad.n < max(trial.side, mesh.n + 1):
        raise NumericalError(
            f"quadrature with {quad.n} points per side cannot resolve the bases")
    g1, _ = trial.matrices(quad.coords)
    a1 = g1.T @ (quad.w1d[:, None] * g1)
    gram = np.kron(a1, a1)
    ev1 = np.linalg.eigvalsh(a1)
    cond = float((ev1[-1] / ev1[0]) ** 2) if ev1[0] > 0 else np.inf

    shift = 0.0
    if cond > cond_limit:
        if tikhonov == "off":
            raise NumericalError(
                f"RBF Gram condition {cond:.2e} exceeds {cond_limit:.1e}; "
                "enable the Tikhonov floor (tikhonov='auto') to proceed")
        shift = 1e-10 * np.trace(gram) / gram.shape[0]
        gram = gram + shift * np.eye(gram.shape[0])

    hat = hat_matrix(mesh, quad)
    w2 = np.outer(quad.w1d, quad.w1d).ravel()
    wh = hat.multiply(w2[:, None]).tocsc()
    d_y = trial.count
    d_big = mesh.n_nodes
    cross = np.empty((d_y, d_big))
    q = quad.n
    for j in range(d_big):
        col = np.asarray(wh[:, j].todense()).reshape(q, q)
        cross[:, j] = (g1.T @ col @ g1).ravel()

    cho = sla.cho_factor(gram)
    a_map = sla.cho_solve(cho, cross)
    aperp = ortho_complement(a_map)

    ops = ProjectionOperators(A=a_map, Aperp=aperp, gram=gram, cross=cross,
                              gram_cond=cond, tikhonov_applied=shift)
    _assert_invariants(ops)
    return ops


def _assert_invariants(ops: ProjectionOperators) -> None:
    scale = max(1.0, float(np.abs(ops.A).max()))
    ortho = np.abs(ops.A.T @ ops.Aperp).max() / scale
    if ortho > 1e-10:
        raise NumericalError(f"A^T Aperp deviates from zero by {ortho:.2e}")
    qq = ops.Aperp.T @ ops.Aperp
    dev = np.abs(qq - np.eye(qq.shape[0])).max()
    if dev > 1e-10:
        raise NumericalError(f"Aperp columns deviate from orthonormality by {dev:.2e}")
    if ops.gram is not None and ops.cross is not None:
        resid = np.abs(ops.gram @ ops.A - ops.cross).max()
        if resid > 1e-8 * max(1.0, np.abs(ops.cross).max()):
            raise NumericalError(f"normal equations violated by {resid:.2e}")


def ortho_complement(a_map: np.ndarray) -> np.ndarray:
    """Orthonormal basis of null(A^T) via full column-pivoted QR."""
    d_y, d_big = a_map.shape
    q, r, _ = sla.qr(a_map, mode="full", pivoting=True)
    diag = np.abs(np.diag(r)[:d_big])
    rank = int(np.sum(diag > max(d_y, d_big) * np.finfo(float).eps * diag.max()))
    if rank < d_big:
        raise NumericalError(
            f"coarse-to-fine map is rank deficient: numerical rank {rank} < {d_big}")
    return q[:, d_big:]


def coarse_project(ops: ProjectionOperators | np.ndarray, y: np.ndarray) -> np.ndarray:
    """Least-squares coordinates of y in col(A): (A^T A)^{-1} A^T y."""
    if isinstance(ops, ProjectionOperators):
        if ops._ata_cho is None:
            ops._ata_cho = sla.cho_factor(ops.A.T @ ops.A)
        return sla.cho_solve(ops._ata_cho, ops.A.T @ np.asarray(y, dtype=np.float64))
    a_map = ops
    return sla.cho_solve(sla.cho_factor(a_map.T @ a_map),
                         a_map.T @ np.asarray(y, dtype=np.float64))
