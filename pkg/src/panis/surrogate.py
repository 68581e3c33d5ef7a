"""Gaussian approximate posterior over fine solution coefficients.

The mean pipeline is CNN -> coarse solve -> fixed lift: mu(x) = A Y(X(c)).
Covariance is low-rank-plus-scalar; by default the rank factor lives on the
coarse nodal space and is lifted through A, which reproduces the published
trainable-parameter totals, while ``cov_space="fine"`` keeps the factor in
the fine coefficient space. The multiscale mode adds per-atom fine
fluctuations in the orthogonal complement of col(A) and draws its samples
by perturbing the solver input, one fresh coarse solve per sample.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import fem, network
from .errors import ConfigError, NumericalError
from .fem import ConstitutiveLaw, CoarseModel, CoarseSolution, TriMesh
from .projection import ProjectionOperators
from .residuals import QuadratureGrid, TrialBasis

__all__ = [
    "Atom",
    "SurrogateState",
    "MeanSolveResult",
    "PosteriorSample",
    "atom_key",
    "mean_solve",
    "sample_posterior",
    "log_entropy",
    "entropy_gradients",
    "half_logdet_lowrank",
    "fluctuation_mask",
]


def atom_key(x: np.ndarray) -> str:
    """Content hash of an input vector; stable across shuffled minibatches."""
    return hashlib.sha256(np.ascontiguousarray(x, dtype=np.float64).tobytes()).hexdigest()


@dataclass
class Atom:
    key: str
    x: np.ndarray
    c: np.ndarray  # cached image so training never regenerates it
    yf: np.ndarray  # fluctuation coefficients in the Aperp column space


@dataclass
class SurrogateState:
    mode: str  # "panis" | "mpanis"
    arch: network.Architecture
    params: dict
    bn_state: dict
    cov_L: np.ndarray
    log_sigma: float
    cov_space: str = "coarse"  # "coarse" | "fine"
    coarse_input_mode: str = "nodal"  # "nodal" | "element_pairs"
    atoms: list[Atom] = field(default_factory=list)
    fluct_free: np.ndarray | None = None  # boolean, True = trainable component

    def __post_init__(self):
        if self.mode not in ("panis", "mpanis"):
            raise ConfigError(f"unknown surrogate mode {self.mode!r}")
        if self.cov_space not in ("coarse", "fine"):
            raise ConfigError(f"unknown covariance space {self.cov_space!r}")

    @property
    def sigma(self) -> float:
        return float(np.exp(self.log_sigma))

    def atom_by_key(self, key: str) -> Atom:
        for atom in self.atoms:
            if atom.key == key:
                return atom
        raise ConfigError(f"no atom with key {key[:12]}...")

    def trainable_count(self) -> int:
        n = self.arch.n_params + self.cov_L.size + 1
        if self.mode == "mpanis":
            n += sum(atom.yf.size for atom in self.atoms)
        return n


@dataclass
class MeanSolveResult:
    X_out: np.ndarray  # raw network output (C, H, W)
    X_flat: np.ndarray  # solver-input vector (nodal values or element pairs)
    tape: network.Tape
    model: CoarseModel
    solution: CoarseSolution
    mu: np.ndarray  # fine coefficients A Y


@dataclass
class PosteriorSample:
    y: np.ndarray
    eps1: np.ndarray
    eps2: np.ndarray
    y_c: np.ndarray | None = None
    y_f: np.ndarray | None = None
    atom: Atom | None = None
    model: CoarseModel | None = None  # perturbed-solve model (multiscale)
    solution: CoarseSolution | None = None
    clamped: np.ndarray | None = None  # mask of floored solver inputs


def solver_input(state: SurrogateState, x_out: np.ndarray, mesh: TriMesh) -> np.ndarray:
    """Flatten the network output into the solver's property vector."""
    if state.coarse_input_mode == "nodal":
        m = mesh.n + 1
        if x_out.shape != (1, m, m):
            raise ConfigError(
                f"network emits {x_out.shape}, nodal mode expects (1, {m}, {m})")
        return x_out[0].ravel()
    if x_out.shape != (2, mesh.n, mesh.n):
        raise ConfigError(
            f"network emits {x_out.shape}, element-pair mode expects (2, {mesh.n}, {mesh.n})")
    perm = np.empty(mesh.n_elements)
    perm[0::2] = x_out[0].ravel()
    perm[1::2] = x_out[1].ravel()
    return perm


def input_to_elements(state: SurrogateState, x_flat: np.ndarray,
                      mesh: TriMesh) -> np.ndarray:
    if state.coarse_input_mode == "nodal":
        return fem.element_perm_from_nodal(mesh, x_flat)
    return x_flat


def elements_grad_to_input(state: SurrogateState, d_elem: np.ndarray,
                           mesh: TriMesh) -> np.ndarray:
    if state.coarse_input_mode == "nodal":
        return fem.nodal_gradient_from_elements(mesh, d_elem)
    return d_elem


def input_grad_to_net(state: SurrogateState, d_flat: np.ndarray,
                      mesh: TriMesh) -> np.ndarray:
    """Reshape a solver-input gradient back to the network output layout."""
    if state.coarse_input_mode == "nodal":
        m = mesh.n + 1
        return d_flat.reshape(1, m, m)
    out = np.empty((2, mesh.n, mesh.n))
    out[0] = d_flat[0::2].reshape(mesh.n, mesh.n)
    out[1] = d_flat[1::2].reshape(mesh.n, mesh.n)
    return out


def _build_model(state: SurrogateState, x_flat: np.ndarray, mesh: TriMesh,
                 bc_values: np.ndarray, source: float) -> CoarseModel:
    return CoarseModel(
        mesh=mesh,
        element_perm=input_to_elements(state, x_flat, mesh),
        dirichlet_values=bc_values,
        source=source,
    )


def mean_solve(state: SurrogateState, c_field: np.ndarray, mesh: TriMesh,
               bc_values: np.ndarray, source: float, ops: ProjectionOperators,
               law: ConstitutiveLaw = ConstitutiveLaw(), *, train: bool = True,
               update_running: bool = True, newton_tol: float = 1e-10,
               newton_max_iter: int = 50, warm_start: np.ndarray | None = None
               ) -> MeanSolveResult:
    """Deterministic mean pipeline; keeps the tape and solve for backprop."""
    x_out, tape = network.forward(state.arch, state.params, c_field, state.bn_state,
                                  train=train, update_running=update_running)
    x_flat = solver_input(state, x_out, mesh)
    model = _build_model(state, x_flat, mesh, bc_values, source)
    sol = fem.solve(model, law, tol=newton_tol, max_iter=newton_max_iter, y0=warm_start)
    mu = ops.A @ sol.Y
    return MeanSolveResult(X_out=x_out, X_flat=x_flat, tape=tape, model=model,
                           solution=sol, mu=mu)


def sample_posterior(state: SurrogateState, msr: MeanSolveResult,
                     ops: ProjectionOperators, *,
                     eps1: np.ndarray | None = None,
                     eps2: np.ndarray | None = None,
                     rng: np.random.Generator | None = None,
                     atom: Atom | None = None,
                     bc_values: np.ndarray | None = None, source: float = 0.0,
                     law: ConstitutiveLaw = ConstitutiveLaw(),
                     x_floor: float = 1e-6, newton_tol: float = 1e-10,
                     newton_max_iter: int = 50) -> PosteriorSample:
    """Reparametrized draw from the posterior given a completed mean solve."""
    rank = state.cov_L.shape[1]
    if state.mode == "panis":
        dim2 = ops.d_y
    else:
        dim2 = state.cov_L.shape[0]
    if eps1 is None:
        eps1 = rng.standard_normal(rank)
    if eps2 is None:
        eps2 = rng.standard_normal(dim2)

    if state.mode == "panis":
        spread = state.cov_L @ eps1
        if state.cov_space == "coarse":
            spread = ops.A @ spread
        y = msr.mu + spread + state.sigma * eps2
        return PosteriorSample(y=y, eps1=eps1, eps2=eps2)

    if atom is None:
        raise ConfigError("multiscale sampling needs the atom carrying y_f")
    mesh = msr.model.mesh
    x_pert = msr.X_flat + state.cov_L @ eps1 + state.sigma * eps2
    clamped = x_pert < x_floor
    x_pert = np.where(clamped, x_floor, x_pert)
    model = _build_model(state, x_pert, mesh,
                         msr.model.dirichlet_values if bc_values is None else bc_values,
                         msr.model.source if source == 0.0 else source)
    sol = fem.solve(model, law, tol=newton_tol, max_iter=newton_max_iter,
                    y0=msr.solution.Y)
    y_c = ops.A @ sol.Y
    y_f = ops.Aperp @ atom.yf
    return PosteriorSample(y=y_c + y_f, eps1=eps1, eps2=eps2, y_c=y_c, y_f=y_f,
                           atom=atom, model=model, solution=sol, clamped=clamped)


def half_logdet_lowrank(u_factor: np.ndarray, sigma2: float, dim: int) -> float:
    """0.5 * log det(sigma^2 I_dim + U U^T) via the rank-sized capacitance."""
    if sigma2 <= 0 or not np.isfinite(sigma2):
        raise NumericalError(f"scalar covariance must be positive, got {sigma2}")
    rank = u_factor.shape[1]
    cap = np.eye(rank) + (u_factor.T @ u_factor) / sigma2
    sign, logdet = np.linalg.slogdet(cap)
    if sign <= 0:
        raise NumericalError("capacitance matrix lost positive definiteness")
    return 0.5 * (dim * np.log(sigma2) + logdet)


def _entropy_factor(state: SurrogateState, ops: ProjectionOperators):
    if state.mode == "panis":
        dim = ops.d_y
        u = ops.A @ state.cov_L if state.cov_space == "coarse" else state.cov_L
    else:
        # covariance lives on the coarse subspace; its A-lift adds a constant
        dim = state.cov_L.shape[0]
        u = state.cov_L
    return u, dim


def log_entropy(state: SurrogateState, ops: ProjectionOperators) -> float:
    """Posterior entropy up to the Gaussian constant: 0.5 log det Sigma."""
    u, dim = _entropy_factor(state, ops)
    return half_logdet_lowrank(u, state.sigma**2, dim)


def entropy_gradients(state: SurrogateState, ops: ProjectionOperators):
    """Closed-form gradients of log_entropy w.r.t. cov_L and log_sigma."""
    u, dim = _entropy_factor(state, ops)
    sigma2 = state.sigma**2
    rank = u.shape[1]
    cap = np.eye(rank) + (u.T @ u) / sigma2
    cap_inv = np.linalg.inv(cap)
    d_u = u @ cap_inv / sigma2
    if state.mode == "panis" and state.cov_space == "coarse":
        d_l = ops.A.T @ d_u
    else:
        d_l = d_u
    d_log_sigma = dim - float(np.trace(cap_inv @ (u.T @ u))) / sigma2
    return d_l, d_log_sigma


def fluctuation_mask(ops: ProjectionOperators, trial: TrialBasis,
                     quad: QuadratureGrid, tol: float = 0.2,
                     batch: int = 256) -> np.ndarray:
    """Mark Aperp columns whose fine field leaks onto the boundary.

    A component is frozen (False) when the sup of its field over the
    boundary quadrature points exceeds ``tol`` times its sup over the whole
    grid; those fluctuations would disturb the Dirichlet trace carried by
    the coarse part.
    """
    g1, _ = trial.matrices(quad.coords)
    q = quad.n
    d_f = ops.Aperp.shape[1]
    edge = np.zeros((q, q), dtype=bool)
    edge[0, :] = edge[-1, :] = edge[:, 0] = edge[:, -1] = True
    free = np.empty(d_f, dtype=bool)
    side = trial.side
    for start in range(0, d_f, batch):
        cols = ops.Aperp[:, start:start + batch]
        fields = np.einsum("qs,stk,Qt->qQk", g1,
                           cols.reshape(side, side, -1), g1, optimize=True)
        sup_all = np.abs(fields).max(axis=(0, 1))
        sup_edge = np.abs(fields[edge, :]).max(axis=0)
        free[start:start + cols.shape[1]] = sup_edge <= tol * np.maximum(sup_all, 1e-300)
    return free
