"""Triangular P1 finite elements on the unit square.

One engine serves two roles: the small coarse-grained solver embedded in the
surrogate (dense factorizations, exact adjoint gradients) and the fine
reference solver used only to produce validation data (sparse). Meshes are
structured: an n x n grid of squares, each split along the (0,0)-(1,1)
diagonal into two triangles.

The nonlinear constitutive law scales the flux by exp(alpha * (u - u_bar));
element integrals use the one-point centroid rule, which collapses to the
standard linear stiffness at alpha = 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import MeshError, NonConvergenceError, NumericalError

__all__ = [
    "ConstitutiveLaw",
    "TriMesh",
    "CoarseModel",
    "CoarseSolution",
    "assemble",
    "solve_linear",
    "solve_newton",
    "adjoint_gradient",
    "element_perm_from_nodal",
    "nodal_gradient_from_elements",
    "element_perm_from_pixels",
]

_DENSE_LIMIT = 2500  # node count below which dense factorizations are used


@dataclass(frozen=True)
class ConstitutiveLaw:
    """Flux law q = -c * exp(alpha*(u - u_bar)) * grad u; alpha = 0 is Darcy."""

    alpha: float = 0.0
    u_bar: float = 0.0

    @property
    def is_linear(self) -> bool:
        return self.alpha == 0.0


class TriMesh:
    """Structured triangulation of [0,1]^2 with (n+1)^2 nodes, 2 n^2 elements."""

    def __init__(self, n: int):
        if n < 1:
            raise MeshError(f"mesh needs at least one square per side, got n={n}")
        self.n = n
        self.h = 1.0 / n
        m = n + 1
        ii, jj = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
        self.nodes = np.column_stack([ii.ravel() * self.h, jj.ravel() * self.h])

        def idx(i, j):
            return i * m + j

        i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        i, j = i.ravel(), j.ravel()
        lower = np.column_stack([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)])
        upper = np.column_stack([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)])
        # interleave so element 2*k, 2*k+1 are the pair of square k
        self.elements = np.empty((2 * n * n, 3), dtype=np.int64)
        self.elements[0::2] = lower
        self.elements[1::2] = upper

        onb = (ii == 0) | (ii == n) | (jj == 0) | (jj == n)
        self.boundary_nodes = np.flatnonzero(onb.ravel())
        self.interior_nodes = np.flatnonzero(~onb.ravel())
        self._geometry()

    def _geometry(self):
        pts = self.nodes[self.elements]  # (E, 3, 2)
        ones = np.ones((len(self.elements), 3, 1))
        # columns [1; x; y] per vertex: phi_i coefficients from the inverse
        h_mat = np.concatenate([ones, pts], axis=2).transpose(0, 2, 1)
        det = np.linalg.det(h_mat)
        self.area = 0.5 * det
        if np.any(self.area <= 1e-14):
            bad = int(np.argmin(self.area))
            raise MeshError(f"degenerate element {bad} with area {self.area[bad]:.3e}")
        sel = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        self.grads = np.linalg.inv(h_mat) @ sel  # (E, 3, 2): rows grad(phi_i)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    def element_centroids(self) -> np.ndarray:
        return self.nodes[self.elements].mean(axis=1)


@dataclass
class CoarseModel:
    """A mesh with per-element permeability, Dirichlet data and a constant source."""

    mesh: TriMesh
    element_perm: np.ndarray  # (E,)
    dirichlet_values: np.ndarray  # (len(boundary_nodes),)
    source: float

    def __post_init__(self):
        self.element_perm = np.asarray(self.element_perm, dtype=np.float64)
        self.dirichlet_values = np.asarray(self.dirichlet_values, dtype=np.float64)
        if self.element_perm.shape != (self.mesh.n_elements,):
            raise MeshError(
                f"element_perm has shape {self.element_perm.shape}, "
                f"expected ({self.mesh.n_elements},)"
            )
        if np.any(self.element_perm <= 0.0):
            bad = int(np.argmin(self.element_perm))
            raise NumericalError(
                f"non-positive permeability {self.element_perm[bad]:.3e} "
                f"in element {bad}"
            )
        if self.dirichlet_values.shape != (len(self.mesh.boundary_nodes),):
            raise MeshError("dirichlet_values must match the boundary node count")


@dataclass
class CoarseSolution:
    Y: np.ndarray
    iterations: int = 0
    residual_norm: float = 0.0
    factor: object = field(default=None, repr=False)  # cached Jacobian factorization


def element_stiffness(coords: np.ndarray, perm: float = 1.0) -> np.ndarray:
    """P1 stiffness of a single triangle given its (3, 2) vertex coordinates."""
    h_mat = np.vstack([np.ones(3), np.asarray(coords, dtype=np.float64).T])
    area = 0.5 * np.linalg.det(h_mat)
    if area <= 1e-14:
        raise MeshError(f"degenerate triangle with area {area:.3e}")
    grads = np.linalg.inv(h_mat) @ np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    return perm * area * (grads @ grads.T)


def element_perm_from_nodal(mesh: TriMesh, x_nodal: np.ndarray) -> np.ndarray:
    """Element permeability as the mean of the three vertex values."""
    x_nodal = np.asarray(x_nodal, dtype=np.float64).ravel()
    if x_nodal.shape != (mesh.n_nodes,):
        raise MeshError(f"nodal field has length {x_nodal.size}, expected {mesh.n_nodes}")
    return x_nodal[mesh.elements].mean(axis=1)


def nodal_gradient_from_elements(mesh: TriMesh, d_elem: np.ndarray) -> np.ndarray:
    """Adjoint of element_perm_from_nodal: scatter d/3 back to the vertices."""
    out = np.zeros(mesh.n_nodes)
    np.add.at(out, mesh.elements.ravel(), np.repeat(d_elem / 3.0, 3))
    return out


def element_perm_from_pixels(mesh: TriMesh, c_field: np.ndarray) -> np.ndarray:
    """Nearest-pixel lookup of a (g, g) image at the element centroids."""
    g = c_field.shape[0]
    cen = mesh.element_centroids()
    ij = np.rint(cen * (g - 1)).astype(int)
    return c_field[ij[:, 0], ij[:, 1]]


def _element_multipliers(model: CoarseModel, law: ConstitutiveLaw, y_full: np.ndarray):
    """exp(alpha*(u_centroid - u_bar)) per element; ones for the linear law."""
    if law.is_linear:
        return np.ones(model.mesh.n_elements)
    u_cent = y_full[model.mesh.elements].mean(axis=1)
    return np.exp(law.alpha * (u_cent - law.u_bar))


def _stiffness(model: CoarseModel, mult: np.ndarray):
    """Global stiffness from per-element coefficient perm*mult (sparse COO parts)."""
    mesh = model.mesh
    coeff = model.element_perm * mult * mesh.area  # (E,)
    local = np.einsum("eia,eja->eij", mesh.grads, mesh.grads) * coeff[:, None, None]
    rows = np.repeat(mesh.elements, 3, axis=1).ravel()
    cols = np.tile(mesh.elements, (1, 3)).ravel()
    return rows, cols, local.ravel()


def assemble(model: CoarseModel, law: ConstitutiveLaw = ConstitutiveLaw(),
             Y: np.ndarray | None = None):
    """Global operator and load vector.

    For the linear law this is the symmetric stiffness K; for alpha != 0 the
    tangent operator linearized at the supplied Y is returned. The load
    carries the consistent source term plus the Dirichlet lifting on free
    rows; Dirichlet entries of the load hold the prescribed values.
    """
    mesh = model.mesh
    if not law.is_linear and Y is None:
        raise NumericalError("nonlinear assembly requires the current solution Y")
    y_full = np.zeros(mesh.n_nodes) if Y is None else np.asarray(Y, dtype=np.float64)
    mult = _element_multipliers(model, law, y_full)
    if law.is_linear:
        rows, cols, vals = _stiffness(model, mult)
        op = sp.coo_matrix((vals, (rows, cols)), shape=(mesh.n_nodes,) * 2).tocsr()
    else:
        op = _jacobian(model, law, y_full)

    load = np.zeros(mesh.n_nodes)
    np.add.at(load, mesh.elements.ravel(),
              np.repeat(model.source * mesh.area / 3.0, 3))
    free = mesh.interior_nodes
    fixed = mesh.boundary_nodes
    load[free] -= op[free][:, fixed] @ model.dirichlet_values
    load[fixed] = model.dirichlet_values
    return op, load


def _solve_spd(k_ff, rhs, dense: bool):
    if dense:
        kd = k_ff.toarray() if sp.issparse(k_ff) else k_ff
        try:
            c_factor = sla.cho_factor(kd)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"singular operator: {exc}") from exc
        return sla.cho_solve(c_factor, rhs), ("cho", c_factor)
    try:
        lu = spla.splu(k_ff.tocsc())
    except RuntimeError as exc:
        raise NumericalError(f"singular operator: {exc}") from exc
    return lu.solve(rhs), ("splu", lu)


def solve_linear(model: CoarseModel) -> CoarseSolution:
    """Direct solve of the Darcy system with Dirichlet elimination."""
    mesh = model.mesh
    op, load = assemble(model)
    free, fixed = mesh.interior_nodes, mesh.boundary_nodes
    k_ff = op[free][:, free]
    y = np.zeros(mesh.n_nodes)
    y[fixed] = model.dirichlet_values
    dense = mesh.n_nodes <= _DENSE_LIMIT
    y_f, factor = _solve_spd(k_ff, load[free], dense)
    y[free] = y_f
    res = np.linalg.norm(k_ff @ y_f - load[free])
    ref = max(np.linalg.norm(load[free]), 1.0)
    if res > 1e-10 * ref:
        raise NumericalError(f"linear solve residual {res:.3e} exceeds tolerance")
    return CoarseSolution(Y=y, iterations=1, residual_norm=float(res), factor=factor)


def _nonlinear_residual(model: CoarseModel, law: ConstitutiveLaw,
                        y_full: np.ndarray) -> np.ndarray:
    """Assembled weak-form residual R(Y) on all nodes (free rows meaningful)."""
    mesh = model.mesh
    mult = _element_multipliers(model, law, y_full)
    coeff = model.element_perm * mult * mesh.area
    grad_u = np.einsum("eia,ei->ea", mesh.grads, y_full[mesh.elements])
    flux = np.einsum("eia,ea->ei", mesh.grads, grad_u) * coeff[:, None]
    out = np.zeros(mesh.n_nodes)
    np.add.at(out, mesh.elements.ravel(), flux.ravel())
    np.add.at(out, mesh.elements.ravel(),
              np.repeat(-model.source * mesh.area / 3.0, 3))
    return out


def _jacobian(model: CoarseModel, law: ConstitutiveLaw, y_full: np.ndarray):
    """Tangent dR/dY; nonsymmetric for alpha != 0 via the centroid chain term."""
    mesh = model.mesh
    mult = _element_multipliers(model, law, y_full)
    coeff = model.element_perm * mult * mesh.area
    local = np.einsum("eia,eja->eij", mesh.grads, mesh.grads)
    if not law.is_linear:
        grad_u = np.einsum("eia,ei->ea", mesh.grads, y_full[mesh.elements])
        gdotu = np.einsum("eia,ea->ei", mesh.grads, grad_u)
        local = local + law.alpha / 3.0 * gdotu[:, :, None] * np.ones((1, 1, 3))
    vals = (local * coeff[:, None, None]).ravel()
    rows = np.repeat(mesh.elements, 3, axis=1).ravel()
    cols = np.tile(mesh.elements, (1, 3)).ravel()
    return sp.coo_matrix((vals, (rows, cols)), shape=(mesh.n_nodes,) * 2).tocsr()


def solve_newton(model: CoarseModel, law: ConstitutiveLaw, tol: float = 1e-10,
                 max_iter: int = 50, y0: np.ndarray | None = None) -> CoarseSolution:
    """Newton iteration with halving line search on the residual norm."""
    if tol <= 0:
        raise NumericalError(f"Newton tolerance must be positive, got {tol}")
    mesh = model.mesh
    free, fixed = mesh.interior_nodes, mesh.boundary_nodes
    y = np.zeros(mesh.n_nodes) if y0 is None else np.array(y0, dtype=np.float64)
    y[fixed] = model.dirichlet_values
    dense = mesh.n_nodes <= _DENSE_LIMIT

    res = _nonlinear_residual(model, law, y)[free]
    norm = np.linalg.norm(res)
    factor = None
    for it in range(1, max_iter + 1):
        if norm <= tol:
            return CoarseSolution(Y=y, iterations=it - 1, residual_norm=float(norm),
                                  factor=factor)
        jac = _jacobian(model, law, y)
        j_ff = jac[free][:, free]
        if dense:
            jd = j_ff.toarray()
            try:
                lu = sla.lu_factor(jd)
            except np.linalg.LinAlgError as exc:
                raise NumericalError(f"singular Jacobian at iteration {it}: {exc}") from exc
            step = sla.lu_solve(lu, -res)
            factor = ("lu", lu)
        else:
            slu = spla.splu(j_ff.tocsc())
            step = slu.solve(-res)
            factor = ("splu", slu)
        scale = 1.0
        for _ in range(40):
            y_try = y.copy()
            y_try[free] += scale * step
            res_try = _nonlinear_residual(model, law, y_try)[free]
            norm_try = np.linalg.norm(res_try)
            if norm_try < norm or norm_try <= tol:
                break
            scale *= 0.5
        else:
            raise NonConvergenceError(
                f"Newton line search stalled at iteration {it}",
                iterations=it, residual_norm=float(norm))
        y, res, norm = y_try, res_try, norm_try
    if norm <= tol:
        return CoarseSolution(Y=y, iterations=max_iter, residual_norm=float(norm),
                              factor=factor)
    raise NonConvergenceError(
        f"Newton did not reach tol={tol:.1e} in {max_iter} iterations "
        f"(last residual norm {norm:.3e})",
        iterations=max_iter, residual_norm=float(norm))


def solve(model: CoarseModel, law: ConstitutiveLaw = ConstitutiveLaw(),
          tol: float = 1e-10, max_iter: int = 50,
          y0: np.ndarray | None = None) -> CoarseSolution:
    if law.is_linear:
        return solve_linear(model)
    return solve_newton(model, law, tol=tol, max_iter=max_iter, y0=y0)


def adjoint_gradient(model: CoarseModel, law: ConstitutiveLaw,
                     solution: CoarseSolution, d_loss_d_y: np.ndarray) -> np.ndarray:
    """Gradient of a scalar loss through the solve, per element permeability.

    One transposed solve with the Jacobian linearized at the converged state;
    Dirichlet components of the loss gradient do not propagate (those nodes
    are data, not unknowns).
    """
    mesh = model.mesh
    free = mesh.interior_nodes
    y = solution.Y
    g_f = np.asarray(d_loss_d_y, dtype=np.float64)[free]
    if not np.any(g_f):
        return np.zeros(mesh.n_elements)

    factor = solution.factor
    if factor is not None and law.is_linear:
        kind, fac = factor
        # stiffness is symmetric: reuse the forward factorization
        lam_f = sla.cho_solve(fac, g_f) if kind == "cho" else fac.solve(g_f)
    else:
        jac = _jacobian(model, law, y)
        j_ff = jac[free][:, free]
        if mesh.n_nodes <= _DENSE_LIMIT:
            lam_f = sla.lu_solve(sla.lu_factor(j_ff.toarray().T), g_f)
        else:
            lam_f = spla.splu(j_ff.tocsc().T).solve(g_f)

    lam = np.zeros(mesh.n_nodes)
    lam[free] = lam_f
    # dR_i/dX_e = area_e * mult_e * grad(phi_i) . grad(u_h) for i in element e
    mult = _element_multipliers(model, law, y)
    grad_u = np.einsum("eia,ei->ea", mesh.grads, y[mesh.elements])
    dr_dx = np.einsum("eia,ea->ei", mesh.grads, grad_u) * (mesh.area * mult)[:, None]
    return -np.einsum("ei,ei->e", lam[mesh.elements], dr_dx)
