"""Weighted residuals of the weak form over a Gaussian RBF trial space.

Trial functions sit on a regular grid with width equal to the grid spacing,
so every 2-D quantity factorizes into 1-D profiles: field evaluation,
residual tables and their gradients reduce to small dense matmuls. Weight
functions are the same bumps damped by tau(s) = s1(1-s1) s2(1-s2), which
pins them to zero on the whole boundary.

For a weight w and coefficients y the residual is

    r_w(y, x) = int_{Gq} w q0 dGamma
                + int grad(w) . c exp(alpha (u_y - u_bar)) grad(u_y) ds
                - int w f ds

with the boundary-flux term present only when a Neumann edge is configured.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError
from .fem import ConstitutiveLaw

__all__ = [
    "QuadratureGrid",
    "TrialBasis",
    "WeightBank",
    "NeumannFlux",
    "ResidualValue",
    "BatchResiduals",
    "ResidualEngine",
    "subsample_residuals",
    "trial_space_galerkin",
]


class QuadratureGrid:
    """Tensor-product trapezoidal rule on [0,1]^2; weights sum to 1 exactly."""

    def __init__(self, n: int):
        if n < 2:
            raise DomainError(f"quadrature needs >= 2 points per side, got {n}")
        self.n = n
        self.coords = np.linspace(0.0, 1.0, n)
        h = 1.0 / (n - 1)
        w = np.full(n, h)
        w[0] = w[-1] = 0.5 * h
        self.w1d = w

    @property
    def weights2d(self) -> np.ndarray:
        return np.outer(self.w1d, self.w1d)


class _GaussianGrid:
    """Gaussian bumps exp(-|s - s0|^2 / dl^2) centered on a regular grid."""

    def __init__(self, side: int):
        if side < 2:
            raise DomainError(f"basis grid needs >= 2 points per side, got {side}")
        self.side = side
        self.centers = np.linspace(0.0, 1.0, side)
        self.dl = 1.0 / (side - 1)
        self._cache: dict[bytes, tuple[np.ndarray, np.ndarray]] = {}

    def matrices(self, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """1-D value and derivative matrices (len(coords) x side), cached."""
        coords = np.asarray(coords, dtype=np.float64)
        key = coords.tobytes()
        if key not in self._cache:
            diff = coords[:, None] - self.centers[None, :]
            g = np.exp(-(diff**2) / self.dl**2)
            gd = -2.0 * diff / self.dl**2 * g
            self._cache[key] = (g, gd)
        return self._cache[key]


class TrialBasis(_GaussianGrid):
    """Trial space u_y(s) = sum_i y_i eta_i(s); coefficients index row-major."""

    @property
    def count(self) -> int:
        return self.side * self.side

    def evaluate(self, y: np.ndarray, quad: QuadratureGrid | np.ndarray):
        """Field and spatial gradients on a tensor grid; linear in y."""
        coords = quad.coords if isinstance(quad, QuadratureGrid) else quad
        g, gd = self.matrices(coords)
        y2 = np.asarray(y, dtype=np.float64).reshape(self.side, self.side)
        u = g @ y2 @ g.T
        ux = gd @ y2 @ g.T
        uy = g @ y2 @ gd.T
        return u, ux, uy

    def design_matrix(self, points: np.ndarray) -> np.ndarray:
        """(P, d_y) matrix of basis values at arbitrary points."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        d1 = pts[:, 0:1] - self.centers[None, :]
        d2 = pts[:, 1:2] - self.centers[None, :]
        g1 = np.exp(-(d1**2) / self.dl**2)
        g2 = np.exp(-(d2**2) / self.dl**2)
        return (g1[:, :, None] * g2[:, None, :]).reshape(len(pts), -1)


class WeightBank(_GaussianGrid):
    """Bank of N = side^2 boundary-vanishing weight functions."""

    @property
    def count(self) -> int:
        return self.side * self.side

    def unravel(self, j: int) -> tuple[int, int]:
        if not 0 <= j < self.count:
            raise DomainError(f"weight index {j} outside [0, {self.count})")
        return divmod(j, self.side)

    def profiles(self, coords: np.ndarray):
        """tau-damped 1-D profiles P and their derivatives D at coords."""
        coords = np.asarray(coords, dtype=np.float64)
        g, gd = self.matrices(coords)
        tau = coords * (1.0 - coords)
        dtau = 1.0 - 2.0 * coords
        p = tau[:, None] * g
        d = dtau[:, None] * g + tau[:, None] * gd
        return p, d

    def integrals(self, quad: QuadratureGrid) -> np.ndarray:
        """1-D quadrature of each damped profile (used by the source term)."""
        p, _ = self.profiles(quad.coords)
        return quad.w1d @ p

    def field(self, j: int, coords: np.ndarray) -> np.ndarray:
        j1, j2 = self.unravel(j)
        p, _ = self.profiles(coords)
        return np.outer(p[:, j1], p[:, j2])


@dataclass(frozen=True)
class NeumannFlux:
    """Prescribed constant flux on one edge of the square."""

    edge: str  # one of "s1=0", "s1=1", "s2=0", "s2=1"
    value: float


@dataclass
class ResidualValue:
    value: float
    dR_dy: np.ndarray
    dR_du: np.ndarray | None = None  # quadrature-node sensitivity, nonlinear only


@dataclass
class BatchResiduals:
    """Residuals for a multiset of weight indices plus their shared pullback."""

    values: np.ndarray
    _engine: "ResidualEngine"
    _state: tuple

    def pullback(self, coeffs: np.ndarray) -> np.ndarray:
        """Gradient of sum_m coeffs_m * r_m with respect to y (flat)."""
        return self._engine._pullback(self._state, coeffs)


class ResidualEngine:
    """Evaluates weighted residuals and their y-gradients by quadrature."""

    def __init__(self, quad: QuadratureGrid, trial: TrialBasis, bank: WeightBank,
                 source: float, neumann: tuple[NeumannFlux, ...] = ()):
        self.quad = quad
        self.trial = trial
        self.bank = bank
        self.source = source
        self.neumann = tuple(neumann)
        self.p, self.d = bank.profiles(quad.coords)
        self.iw = bank.integrals(quad)
        self.w2d = quad.weights2d
        self._flux_table = self._neumann_table()

    @property
    def n_weights(self) -> int:
        return self.bank.count

    def _neumann_table(self) -> np.ndarray:
        """Boundary-flux contribution per weight; identically zero for the
        tau-damped bank but carried for the general contract."""
        table = np.zeros((self.bank.side, self.bank.side))
        if not self.neumann:
            return table
        pq, _ = self.bank.profiles(self.quad.coords)
        line = self.quad.w1d @ pq  # 1-D quadrature along the edge
        for flux in self.neumann:
            var, _, val = flux.edge.partition("=")
            if var not in ("s1", "s2") or val not in ("0", "1"):
                raise ConfigError(f"unknown Neumann edge {flux.edge!r}")
            fixed, _ = self.bank.profiles(np.array([float(val)]))
            at_edge = fixed[0]  # profile values at the fixed coordinate
            if var == "s1":
                table += flux.value * np.outer(at_edge, line)
            else:
                table += flux.value * np.outer(line, at_edge)
        return table

    def map_c(self, c_field: np.ndarray) -> np.ndarray:
        """Pixelwise (nearest) lookup of the permeability image on the grid."""
        c_field = np.asarray(c_field, dtype=np.float64)
        if c_field.ndim != 2 or c_field.shape[0] != c_field.shape[1]:
            raise ConfigError(f"permeability image must be square, got {c_field.shape}")
        if c_field.shape[0] == self.quad.n:
            return c_field
        g = c_field.shape[0]
        if g < 2:
            raise ConfigError("permeability image must have at least 2 pixels per side")
        idx = np.rint(self.quad.coords * (g - 1)).astype(int)
        return c_field[np.ix_(idx, idx)]

    def _forward(self, y, c_field, law: ConstitutiveLaw):
        c_q = self.map_c(c_field)
        u, ux, uy = self.trial.evaluate(y, self.quad)
        mult = np.exp(law.alpha * (u - law.u_bar)) if not law.is_linear else None
        wcm = self.w2d * c_q if mult is None else self.w2d * c_q * mult
        return u, ux, uy, mult, wcm

    def residual_table(self, y, c_field, law: ConstitutiveLaw = ConstitutiveLaw()):
        """All N residuals at once as a (side, side) table."""
        _, ux, uy, _, wcm = self._forward(y, c_field, law)
        table = self.d.T @ (wcm * ux) @ self.p + self.p.T @ (wcm * uy) @ self.d
        table -= self.source * np.outer(self.iw, self.iw)
        return table + self._flux_table

    def eval_batch(self, indices: np.ndarray, y, c_field,
                   law: ConstitutiveLaw = ConstitutiveLaw()) -> BatchResiduals:
        """Residuals for a multiset of weight indices, sharing one forward pass."""
        indices = np.asarray(indices, dtype=np.int64)
        if indices.size == 0:
            raise DomainError("empty residual index batch")
        if indices.min() < 0 or indices.max() >= self.n_weights:
            raise DomainError("residual index outside the weight bank")
        u, ux, uy, mult, wcm = self._forward(y, c_field, law)
        j1, j2 = np.divmod(indices, self.bank.side)
        fx = wcm * ux
        fy = wcm * uy
        vals = (np.einsum("qm,qp,pm->m", self.d[:, j1], fx, self.p[:, j2], optimize=True)
                + np.einsum("qm,qp,pm->m", self.p[:, j1], fy, self.d[:, j2], optimize=True))
        vals -= self.source * self.iw[j1] * self.iw[j2]
        vals += self._flux_table[j1, j2]
        state = (j1, j2, u, ux, uy, mult, wcm, law)
        return BatchResiduals(values=vals, _engine=self, _state=state)

    def _pullback(self, state, coeffs) -> np.ndarray:
        j1, j2, u, ux, uy, mult, wcm, law = state
        coeffs = np.asarray(coeffs, dtype=np.float64)
        side = self.bank.side
        s_tab = np.zeros((side, side))
        np.add.at(s_tab, (j1, j2), coeffs)
        zx = self.d @ s_tab @ self.p.T
        zy = self.p @ s_tab @ self.d.T
        g, gd = self.trial.matrices(self.quad.coords)
        dy2 = gd.T @ (wcm * zx) @ g + g.T @ (wcm * zy) @ gd
        if mult is not None:
            du = law.alpha * wcm * (zx * ux + zy * uy)
            dy2 += g.T @ du @ g
        return dy2.ravel()

    def eval(self, j: int, y, c_field,
             law: ConstitutiveLaw = ConstitutiveLaw()) -> ResidualValue:
        """One residual with its full coefficient gradient."""
        batch = self.eval_batch(np.array([j]), y, c_field, law)
        grad = batch.pullback(np.array([1.0]))
        dr_du = None
        if not law.is_linear:
            j1, j2, u, ux, uy, mult, wcm, _ = batch._state
            wjx = np.outer(self.d[:, j1[0]], self.p[:, j2[0]])
            wjy = np.outer(self.p[:, j1[0]], self.d[:, j2[0]])
            dr_du = law.alpha * wcm * (wjx * ux + wjy * uy)
        return ResidualValue(value=float(batch.values[0]), dR_dy=grad, dR_du=dr_du)


def subsample_residuals(n_weights: int, m: int,
                        rng: np.random.Generator) -> np.ndarray:
    """m uniform draws with replacement from [0, n_weights)."""
    if m < 1:
        raise DomainError(f"subsample size must be >= 1, got {m}")
    if m > n_weights:
        raise DomainError(f"subsample size {m} exceeds bank size {n_weights}")
    return rng.integers(0, n_weights, size=m)


def residual_rows(engine: ResidualEngine, c_field) -> np.ndarray:
    """(N, d_y) matrix of residual gradients for the linear law.

    Row (j1, j2) of the affine map r = V y + r(0); assembled by contracting
    the shared quadrature axis once instead of looping over the bank.
    """
    c_q = engine.map_c(c_field)
    wc = engine.w2d * c_q  # (q, q)
    g, gd = engine.trial.matrices(engine.quad.coords)
    p, d = engine.p, engine.d
    # term 1: d/ds1 of the weight against d/ds1 of the trial
    m1 = np.einsum("qQ,Qj,Qi->qji", wc, p, g, optimize=True)
    v1 = np.einsum("qm,qn,qji->mnji", d, gd, m1, optimize=True)
    # term 2: the s2 derivatives
    m2 = np.einsum("qQ,Qj,Qi->qji", wc, d, gd, optimize=True)
    v2 = np.einsum("qm,qn,qji->mnji", p, g, m2, optimize=True)
    side_w, side_t = engine.bank.side, engine.trial.side
    return (v1 + v2).transpose(0, 2, 1, 3).reshape(side_w**2, side_t**2)


def trial_space_galerkin(engine: ResidualEngine, c_field,
                         law: ConstitutiveLaw = ConstitutiveLaw()) -> np.ndarray:
    """Minimum-norm trial coefficients zeroing every residual in the bank.

    Linear law only: each residual is affine in y, so stacking the gradients
    gives a consistent underdetermined system solved by least squares.
    This is the zero-residual manifold probe used in verification.
    """
    if not law.is_linear:
        raise ConfigError("trial-space Galerkin construction requires the linear law")
    d_y = engine.trial.count
    r0 = engine.residual_table(np.zeros(d_y), c_field, law).ravel()
    rows = residual_rows(engine, c_field)
    y, *_ = np.linalg.lstsq(rows, -r0, rcond=None)
    return y
