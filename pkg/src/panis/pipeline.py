"""Wires a configuration into a ready-to-train problem.

Builds the KLE input distribution, the quadrature/trial/weight spaces, the
coarse mesh with its fixed coarse-to-fine lift, boundary data and the
surrogate state, and handles checkpoint round-trips. The fine reference
solver lives here too; it is used only to manufacture validation data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import fem, network, surrogate
from .config import Config, parse_config
from .containers import container_config, read_container, write_container
from .errors import ConfigError
from .fem import ConstitutiveLaw, CoarseModel, TriMesh
from .microstructure import (KernelSpec, MicrostructureSpec, build_kle_basis,
                             sample_field)
from .projection import ProjectionOperators, build_projection
from .residuals import QuadratureGrid, ResidualEngine, TrialBasis, WeightBank
from .surrogate import Atom, SurrogateState, atom_key
from .training import TemperSchedule, TrainSettings

__all__ = [
    "BoundaryCondition",
    "parse_bc",
    "Problem",
    "build_problem",
    "init_state",
    "make_atoms",
    "make_train_settings",
    "solve_reference",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class BoundaryCondition:
    """Dirichlet data on the boundary of the unit square."""

    name: str
    offset: float = 0.0
    sinusoidal: bool = False

    def values(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        if not self.sinusoidal:
            return np.full(len(pts), self.offset)
        s1, s2 = pts[:, 0], pts[:, 1]
        out = np.empty(len(pts))
        out[:] = np.nan
        tol = 1e-12
        # four edges of a continuous piecewise-sinusoidal profile
        m = np.abs(s1) < tol
        out[m] = 10.0 + 5.0 * np.sin(0.5 * math.pi * s2[m])
        m = (np.abs(s2 - 1.0) < tol) & np.isnan(out)
        out[m] = 10.0 + 5.0 * np.sin(0.5 * math.pi * (s1[m] + 1.0))
        m = (np.abs(s1 - 1.0) < tol) & np.isnan(out)
        out[m] = 10.0 - 5.0 * np.sin(0.5 * math.pi * (s2[m] + 1.0))
        m = (np.abs(s2) < tol) & np.isnan(out)
        out[m] = 10.0 - 5.0 * np.sin(0.5 * math.pi * s1[m])
        if np.any(np.isnan(out)):
            raise ConfigError("sinusoidal boundary data requested off the boundary")
        return out


def parse_bc(name: str) -> BoundaryCondition:
    if name == "zero":
        return BoundaryCondition(name="zero", offset=0.0)
    if name == "sin":
        return BoundaryCondition(name="sin", sinusoidal=True)
    if name.startswith("const:"):
        try:
            return BoundaryCondition(name=name, offset=float(name.split(":", 1)[1]))
        except ValueError as exc:
            raise ConfigError(f"bad constant boundary value in {name!r}") from exc
    raise ConfigError(f"unknown boundary condition {name!r}")


@dataclass
class Problem:
    config: Config
    microspec: MicrostructureSpec
    quad: QuadratureGrid
    trial: TrialBasis
    bank: WeightBank
    engine: ResidualEngine
    mesh: TriMesh
    ops: ProjectionOperators
    bc: BoundaryCondition
    coarse_bc: np.ndarray  # Dirichlet values at the coarse boundary nodes
    source: float
    law: ConstitutiveLaw
    _fine_mesh: TriMesh | None = field(default=None, repr=False)

    @property
    def d_y(self) -> int:
        return self.trial.count

    def fine_mesh(self) -> TriMesh:
        if self._fine_mesh is None or self._fine_mesh.n != self.config.fine_resolution - 1:
            self._fine_mesh = TriMesh(self.config.fine_resolution - 1)
        return self._fine_mesh

    def coarse_bc_for(self, bc: BoundaryCondition) -> np.ndarray:
        return bc.values(self.mesh.nodes[self.mesh.boundary_nodes])

    def with_bc(self, bc: BoundaryCondition) -> "Problem":
        import copy

        other = copy.copy(self)
        other.bc = bc
        other.coarse_bc = self.coarse_bc_for(bc)
        return other


def build_problem(cfg: Config, *, ops: ProjectionOperators | None = None,
                  build_ops: bool = True) -> Problem:
    """Deterministic assembly of every fixed operator the run needs."""
    cfg.validate()
    kernel = KernelSpec(length_scale=cfg.length_scale,
                        grid_resolution=cfg.grid_resolution)
    kle = build_kle_basis(kernel, cfg.input_dim)
    microspec = MicrostructureSpec(kle=kle, volume_fraction=cfg.volume_fraction,
                                   contrast_ratio=cfg.contrast_ratio)
    quad = QuadratureGrid(cfg.quad_points or cfg.grid_resolution)
    trial = TrialBasis(cfg.trial_side)
    bank = WeightBank(cfg.weight_side)
    engine = ResidualEngine(quad, trial, bank, source=cfg.source)
    mesh = TriMesh(cfg.coarse_elements)
    if ops is None and build_ops:
        ops = build_projection(trial, mesh, quad)
    bc = parse_bc(cfg.bc)
    law = ConstitutiveLaw(alpha=cfg.alpha, u_bar=cfg.u_bar)
    return Problem(config=cfg, microspec=microspec, quad=quad, trial=trial,
                   bank=bank, engine=engine, mesh=mesh, ops=ops, bc=bc,
                   coarse_bc=bc.values(mesh.nodes[mesh.boundary_nodes]),
                   source=cfg.source, law=law)


def _architecture(cfg: Config) -> network.Architecture:
    out_ch = 1 if cfg.coarse_input_mode == "nodal" else 2
    if cfg.mode == "panis":
        arch = network.panis_cnn(cfg.grid_resolution, out_ch=out_ch)
        if cfg.coarse_input_mode == "element_pairs":
            arch = _element_variant(arch)
    else:
        arch = network.mpanis_cnn(cfg.grid_resolution, out_ch=out_ch)
        if cfg.coarse_input_mode == "element_pairs":
            arch = _element_variant(arch)
    shape = arch.output_shape
    n = cfg.coarse_elements
    want = (1, n + 1, n + 1) if cfg.coarse_input_mode == "nodal" else (2, n, n)
    if shape != want:
        raise ConfigError(
            f"architecture emits {shape}, the coarse mesh needs {want}; "
            "adjust grid_resolution/coarse_elements")
    return arch


def _element_variant(arch: network.Architecture) -> network.Architecture:
    """Swap the widening final deconvolutions for shape-preserving ones so the
    output grid matches the element-pair layout (one channel per triangle)."""
    layers = list(arch.layers)
    for i, spec in enumerate(layers):
        if spec.kind == "deconv" and spec.kernel == 4:
            layers[i] = network.LayerSpec("deconv", kernel=3, stride=1, padding=1,
                                          in_ch=spec.in_ch, out_ch=spec.out_ch)
    return network.Architecture(name=arch.name + "-elements", input_hw=arch.input_hw,
                                layers=tuple(layers))


def make_atoms(problem: Problem, count: int, rng: np.random.Generator,
               d_f: int) -> list[Atom]:
    atoms = []
    for _ in range(count):
        fs = sample_field(problem.microspec, rng=rng)
        atoms.append(Atom(key=atom_key(fs.x), x=fs.x, c=fs.c, yf=np.zeros(d_f)))
    return atoms


def init_state(cfg: Config, problem: Problem,
               rng: np.random.Generator) -> SurrogateState:
    arch = _architecture(cfg)
    params = network.init_xavier(arch, rng)
    bn_state = network.init_bn_state(arch)
    d_y = problem.d_y
    d_coarse = problem.mesh.n_nodes
    d_input = (problem.mesh.n_nodes if cfg.coarse_input_mode == "nodal"
               else problem.mesh.n_elements)
    if cfg.mode == "panis":
        rows = d_coarse if cfg.cov_space == "coarse" else d_y
    else:
        rows = d_input  # perturbation enters at the solver input
    cov_l = 1e-3 * rng.standard_normal((rows, cfg.cov_rank))
    state = SurrogateState(mode=cfg.mode, arch=arch, params=params,
                           bn_state=bn_state, cov_L=cov_l,
                           log_sigma=float(np.log(cfg.init_sigma)),
                           cov_space=cfg.cov_space,
                           coarse_input_mode=cfg.coarse_input_mode)
    if cfg.mode == "mpanis":
        d_f = d_y - problem.ops.d_Y
        state.atoms = make_atoms(problem, cfg.atom_count, rng, d_f)
        if cfg.fluctuations:
            state.fluct_free = surrogate.fluctuation_mask(
                problem.ops, problem.trial, problem.quad,
                tol=cfg.fluctuation_boundary_tol)
            if cfg.fluctuation_init == "fit":
                init_fluctuations(state, problem)
        else:
            state.fluct_free = np.zeros(d_f, dtype=bool)  # fluctuation-free baseline
    return state


def init_fluctuations(state: SurrogateState, problem: Problem) -> None:
    """Seed each atom's fluctuation with its least-squares subproblem.

    Residuals are affine in y for the linear law, so for the initial network
    output the optimal free fluctuation components solve one small lstsq per
    atom; starting there lets the shared property map train against
    fluctuations that already carry the fine-scale content.
    """
    from .residuals import residual_rows

    free = state.fluct_free
    ops = problem.ops
    for atom in state.atoms:
        msr = surrogate.mean_solve(state, atom.c, problem.mesh, problem.coarse_bc,
                                   problem.source, ops, train=False)
        rows = residual_rows(problem.engine, atom.c)
        r_at_mean = problem.engine.residual_table(msr.mu, atom.c).ravel()
        design = rows @ ops.Aperp[:, free]
        sol, *_ = np.linalg.lstsq(design, -r_at_mean, rcond=None)
        atom.yf[:] = 0.0
        atom.yf[free] = sol


def make_train_settings(cfg: Config) -> TrainSettings:
    temper = None
    if cfg.alpha != 0.0:
        temper = TemperSchedule(final_alpha=cfg.alpha,
                                ramp_steps=int(cfg.temper_ramp_fraction * cfg.max_steps))
    return TrainSettings(
        lam=cfg.lam, subsample=cfg.subsample, r_samples=cfg.samples_per_step,
        prior_variance=cfg.prior_variance, learning_rate=cfg.learning_rate,
        final_lr_fraction=cfg.final_lr_fraction, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, adam_eps=cfg.adam_eps,
        max_steps=cfg.max_steps, convergence_window=cfg.convergence_window,
        convergence_tol=cfg.convergence_tol, temper=temper, u_bar=cfg.u_bar,
        x_floor=cfg.x_floor, newton_tol=cfg.newton_tol,
        newton_max_iter=cfg.newton_max_iter, snapshot_every=cfg.snapshot_every,
        fluctuation_lr_scale=cfg.fluctuation_lr_scale)


def solve_reference(problem: Problem, c_field: np.ndarray,
                    bc: BoundaryCondition | None = None,
                    law: ConstitutiveLaw | None = None) -> np.ndarray:
    """Fine-mesh reference solution on the validation grid, (G, G)."""
    mesh = problem.fine_mesh()
    bc = problem.bc if bc is None else bc
    law = problem.law if law is None else law
    model = CoarseModel(
        mesh=mesh,
        element_perm=fem.element_perm_from_pixels(mesh, c_field),
        dirichlet_values=bc.values(mesh.nodes[mesh.boundary_nodes]),
        source=problem.source,
    )
    sol = fem.solve(model, law, tol=problem.config.newton_tol,
                    max_iter=problem.config.newton_max_iter)
    g = mesh.n + 1
    return sol.Y.reshape(g, g)


def save_checkpoint(path, state: SurrogateState, ops: ProjectionOperators,
                    cfg: Config) -> None:
    arrays: dict[str, np.ndarray] = {}
    for k, v in state.params.items():
        arrays[f"psi_x/{k}"] = v
    for layer, st in state.bn_state.items():
        arrays[f"bn/{layer}/mean"] = st["mean"]
        arrays[f"bn/{layer}/var"] = st["var"]
    arrays["cov/L"] = state.cov_L
    arrays["cov/log_sigma"] = np.array([state.log_sigma])
    arrays["proj/A"] = ops.A
    arrays["proj/Aperp"] = ops.Aperp
    if state.fluct_free is not None:
        arrays["fluct_free"] = state.fluct_free.astype(np.float64)
    for k, atom in enumerate(state.atoms):
        arrays[f"atoms/x_{k}"] = atom.x
        arrays[f"atoms/yf_{k}"] = atom.yf
        arrays[f"atoms/x_hash_{k}"] = np.frombuffer(
            bytes.fromhex(atom.key), dtype=np.uint8).astype(np.float64)
    write_container(path, arrays, config_text=cfg.effective_text())


def load_checkpoint(path):
    """Rebuild (state, ops, cfg) from a checkpoint container."""
    arrays = read_container(path)
    text = container_config(arrays)
    if text is None:
        raise ConfigError(f"{path}: checkpoint carries no config echo")
    cfg = parse_config(text)
    arch = _architecture(cfg)
    params = {}
    for k, v in arrays.items():
        if k.startswith("psi_x/"):
            params[k[len("psi_x/"):]] = v
    missing = set(arch.param_layout()) - set(params)
    if missing:
        raise ConfigError(f"{path}: checkpoint is missing tensors {sorted(missing)}")
    bn_state = network.init_bn_state(arch)
    for layer in bn_state:
        bn_state[layer]["mean"] = arrays[f"bn/{layer}/mean"]
        bn_state[layer]["var"] = arrays[f"bn/{layer}/var"]
    ops = ProjectionOperators(A=arrays["proj/A"], Aperp=arrays["proj/Aperp"])
    state = SurrogateState(mode=cfg.mode, arch=arch, params=params,
                           bn_state=bn_state, cov_L=arrays["cov/L"],
                           log_sigma=float(arrays["cov/log_sigma"][0]),
                           cov_space=cfg.cov_space,
                           coarse_input_mode=cfg.coarse_input_mode)
    if "fluct_free" in arrays:
        state.fluct_free = arrays["fluct_free"] > 0.5
    atoms = []
    if "atoms/x_0" in arrays:
        # images regenerate deterministically from the stored input vectors
        kernel = KernelSpec(length_scale=cfg.length_scale,
                            grid_resolution=cfg.grid_resolution)
        spec = MicrostructureSpec(kle=build_kle_basis(kernel, cfg.input_dim),
                                  volume_fraction=cfg.volume_fraction,
                                  contrast_ratio=cfg.contrast_ratio)
        k = 0
        while f"atoms/x_{k}" in arrays:
            x = arrays[f"atoms/x_{k}"]
            stored = bytes(arrays[f"atoms/x_hash_{k}"].astype(np.uint8)).hex()
            key = atom_key(x)
            if key != stored:
                raise ConfigError(f"{path}: atom {k} hash mismatch; container corrupted")
            atoms.append(Atom(key=key, x=x, c=sample_field(spec, x=x).c,
                              yf=arrays[f"atoms/yf_{k}"]))
            k += 1
    state.atoms = atoms
    return state, ops, cfg
