"""Posterior predictions with uncertainty bands, validation data and metrics.

Bands are closed form: the mean field comes from the deterministic pipeline
and the pointwise standard deviation from pushing the low-rank covariance
through the trial basis, u_sigma(s)^2 = eta(s)^T Sigma eta(s). No sampling
is involved, so prediction is deterministic given a checkpoint. In the
multiscale mode only the coarse part is predicted and reference solutions
are projected onto col(A) before metrics are computed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from . import fem, published
from .errors import ConfigError, DomainError, NumericalError
from .fem import ConstitutiveLaw
from .microstructure import MicrostructureSpec, sample_field
from .pipeline import BoundaryCondition, Problem, parse_bc, solve_reference
from .projection import coarse_project
from .surrogate import SurrogateState, mean_solve, sample_posterior

__all__ = [
    "PredictionBands",
    "ValidationSet",
    "EvalReport",
    "predict",
    "r_squared",
    "rel_l2",
    "band_coverage",
    "gen_validation",
    "evaluate_state",
    "sweep",
    "field_of_coefficients",
    "project_reference",
    "write_pgm",
]


@dataclass
class PredictionBands:
    mean: np.ndarray
    sigma: np.ndarray
    upper: np.ndarray  # mean + 2 sigma
    lower: np.ndarray  # mean - 2 sigma


@dataclass
class ValidationSet:
    x: np.ndarray  # (Nv, d_x)
    c: np.ndarray  # (Nv, g, g)
    u: np.ndarray  # (Nv, G, G) fine reference solutions
    bc_name: str
    alpha: float = 0.0
    u_bar: float = 0.0

    @property
    def count(self) -> int:
        return len(self.u)

    @property
    def grid(self) -> int:
        return self.u.shape[1]


@dataclass
class EvalReport:
    r2: float = np.nan
    eps: float = np.nan
    per_sample_eps: np.ndarray | None = None
    coverage: float = np.nan
    rows: list = field(default_factory=list)  # sweep cells
    label: str = ""

    def to_text(self) -> str:
        lines = []
        if np.isfinite(self.r2) or np.isfinite(self.eps):
            lines.append(f"{self.label or 'evaluation'}: "
                         f"R^2 = {self.r2:.4f}  eps = {self.eps:.4f}  "
                         f"band coverage = {self.coverage:.3f}")
        if self.rows:
            keys: list[str] = []
            for row in self.rows:
                keys.extend(k for k in row if k not in keys)
            widths = {k: max(len(k), 12) for k in keys}
            lines.append("  ".join(k.ljust(widths[k]) for k in keys))
            for row in self.rows:
                cells = []
                for k in keys:
                    v = row.get(k, "")
                    cells.append((f"{v:.4f}" if isinstance(v, float) else str(v))
                                 .ljust(widths[k]))
                lines.append("  ".join(cells))
        return "\n".join(lines) + "\n"

    def to_csv(self, path) -> None:
        rows = self.rows or [{"r2": self.r2, "eps": self.eps,
                              "coverage": self.coverage}]
        keys: list[str] = []
        for row in rows:
            keys.extend(k for k in row if k not in keys)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(keys) + "\n")
            for row in rows:
                fh.write(",".join(str(row.get(k, "")) for k in keys) + "\n")


def save_validation(path, vset: ValidationSet, config_text: str) -> None:
    from .containers import encode_text, write_container

    write_container(path, {
        "x": vset.x, "c": vset.c, "u": vset.u,
        "meta/bc": encode_text(vset.bc_name),
        "meta/alpha": np.array([vset.alpha]),
        "meta/u_bar": np.array([vset.u_bar]),
    }, config_text=config_text)


def load_validation(path) -> ValidationSet:
    from .containers import decode_text, read_container

    arrays = read_container(path)
    return ValidationSet(x=arrays["x"], c=arrays["c"], u=arrays["u"],
                         bc_name=decode_text(arrays["meta/bc"]),
                         alpha=float(arrays["meta/alpha"][0]),
                         u_bar=float(arrays["meta/u_bar"][0]))


def field_of_coefficients(trial, coeffs: np.ndarray,
                          coords: np.ndarray) -> np.ndarray:
    """Trial-space field of a coefficient vector on a tensor grid."""
    g, _ = trial.matrices(coords)
    return g @ coeffs.reshape(trial.side, trial.side) @ g.T


def _interp_matrix(src_n: int, coords: np.ndarray) -> np.ndarray:
    """Linear interpolation weights from a src_n uniform grid to coords."""
    pos = np.clip(coords, 0.0, 1.0) * (src_n - 1)
    idx = np.minimum(pos.astype(int), src_n - 2)
    w = pos - idx
    mat = np.zeros((len(coords), src_n))
    mat[np.arange(len(coords)), idx] = 1.0 - w
    mat[np.arange(len(coords)), idx + 1] = w
    return mat


def grid_resample(fld: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Bilinear resample of a square grid field onto a tensor grid."""
    m = _interp_matrix(fld.shape[0], coords)
    return m @ fld @ m.T


def predict(state: SurrogateState, c_field: np.ndarray, problem: Problem, *,
            bc: BoundaryCondition | None = None,
            law: ConstitutiveLaw | None = None,
            eval_coords: np.ndarray | None = None) -> PredictionBands:
    """Closed-form mean and +/- 2 sigma fields for one input image."""
    bc = problem.bc if bc is None else bc
    law = problem.law if law is None else law
    if eval_coords is None:
        eval_coords = np.linspace(0.0, 1.0, problem.config.fine_resolution)
    ops = problem.ops
    msr = mean_solve(state, c_field, problem.mesh, problem.coarse_bc_for(bc),
                     problem.source, ops, law, train=False,
                     newton_tol=problem.config.newton_tol,
                     newton_max_iter=problem.config.newton_max_iter)
    mean = field_of_coefficients(problem.trial, msr.mu, eval_coords)

    # rank-factor fields
    if state.mode == "panis":
        u_fact = (ops.A @ state.cov_L if state.cov_space == "coarse"
                  else state.cov_L)
    else:
        u_fact = ops.A @ state.cov_L if state.coarse_input_mode == "nodal" else None
        if u_fact is None:
            raise ConfigError("element-pair multiscale prediction bands are not defined")
    var = np.zeros_like(mean)
    for k in range(u_fact.shape[1]):
        fk = field_of_coefficients(problem.trial, u_fact[:, k], eval_coords)
        var += fk * fk
    sigma2 = state.sigma**2
    if state.mode == "panis":
        g, _ = problem.trial.matrices(eval_coords)
        norm1 = (g * g).sum(axis=1)
        var += sigma2 * np.outer(norm1, norm1)  # sigma^2 |eta(s)|^2
    else:
        # scalar part lives on the coarse subspace: sigma^2 |A^T eta(s)|^2
        for k in range(ops.d_Y):
            fk = field_of_coefficients(problem.trial, ops.A[:, k], eval_coords)
            var += sigma2 * fk * fk
    sigma_field = np.sqrt(var)
    return PredictionBands(mean=mean, sigma=sigma_field,
                           upper=mean + 2 * sigma_field,
                           lower=mean - 2 * sigma_field)


def sampled_variance(state: SurrogateState, c_field: np.ndarray, problem: Problem,
                     points: np.ndarray, n_samples: int,
                     rng: np.random.Generator, *,
                     bc: BoundaryCondition | None = None,
                     law: ConstitutiveLaw | None = None) -> np.ndarray:
    """Monte-Carlo variance of the posterior field at probe points (oracle
    counterpart of the closed-form band; used in verification)."""
    bc = problem.bc if bc is None else bc
    law = problem.law if law is None else law
    msr = mean_solve(state, c_field, problem.mesh, problem.coarse_bc_for(bc),
                     problem.source, problem.ops, law, train=False)
    design = problem.trial.design_matrix(points)
    vals = np.empty((n_samples, len(points)))
    atom = state.atoms[0] if state.mode == "mpanis" else None
    for i in range(n_samples):
        s = sample_posterior(state, msr, problem.ops, rng=rng, atom=atom, law=law)
        vals[i] = design @ s.y
    return vals.var(axis=0)


def r_squared(refs: np.ndarray, means: np.ndarray) -> float:
    """1 - sum |u - u_mu|^2 / sum |u - u_bar|^2 over the validation set."""
    refs = np.asarray(refs)
    means = np.asarray(means)
    u_bar = refs.mean(axis=0)
    denom = float(np.sum((refs - u_bar) ** 2))
    if denom == 0.0:
        raise NumericalError("all reference solutions identical; R^2 undefined")
    return 1.0 - float(np.sum((refs - means) ** 2)) / denom


def rel_l2(refs: np.ndarray, means: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean and per-sample relative L2 errors; zero-norm references skipped."""
    out = []
    skipped = 0
    for u, um in zip(refs, means):
        norm = np.linalg.norm(u)
        if norm == 0.0:
            skipped += 1
            continue
        out.append(np.linalg.norm(u - um) / norm)
    if not out:
        raise NumericalError("every reference had zero norm; eps undefined")
    if skipped:
        import warnings

        warnings.warn(f"skipped {skipped} zero-norm reference solutions")
    per = np.array(out)
    return float(per.mean()), per


def band_coverage(refs: np.ndarray, bands: list[PredictionBands]) -> float:
    inside = 0
    total = 0
    for u, b in zip(refs, bands):
        inside += int(np.sum((u >= b.lower) & (u <= b.upper)))
        total += u.size
    return inside / total


def gen_validation(problem: Problem, rng: np.random.Generator, *,
                   count: int | None = None,
                   bc: BoundaryCondition | None = None,
                   law: ConstitutiveLaw | None = None,
                   microspec: MicrostructureSpec | None = None) -> ValidationSet:
    """Fresh inputs with fine-solver references under the given BC/law."""
    count = problem.config.validation_count if count is None else count
    bc = problem.bc if bc is None else bc
    law = problem.law if law is None else law
    spec = problem.microspec if microspec is None else microspec
    xs, cs, us = [], [], []
    for _ in range(count):
        fs = sample_field(spec, rng=rng)
        xs.append(fs.x)
        cs.append(fs.c)
        us.append(solve_reference(problem, fs.c, bc=bc, law=law))
    return ValidationSet(x=np.array(xs), c=np.array(cs), u=np.array(us),
                         bc_name=bc.name, alpha=law.alpha, u_bar=law.u_bar)


def _gram_solve(problem: Problem, rhs: np.ndarray) -> np.ndarray:
    ops = problem.ops
    if ops.gram is None:
        g1, _ = problem.trial.matrices(problem.quad.coords)
        a1 = g1.T @ (problem.quad.w1d[:, None] * g1)
        ops.gram = np.kron(a1, a1)
    if not hasattr(ops, "_gram_cho") or ops._gram_cho is None:
        ops._gram_cho = sla.cho_factor(ops.gram)
    return sla.cho_solve(ops._gram_cho, rhs)


def project_reference(problem: Problem, u_grid: np.ndarray,
                      eval_coords: np.ndarray) -> np.ndarray:
    """Coarse-scale part of a reference field: fit trial coefficients by
    least squares, project onto col(A), re-evaluate on the grid."""
    u_q = grid_resample(u_grid, problem.quad.coords)
    g1, _ = problem.trial.matrices(problem.quad.coords)
    w = problem.quad.w1d
    rhs = (g1.T @ (w[:, None] * u_q * w[None, :]) @ g1).ravel()
    y_ref = _gram_solve(problem, rhs)
    y_c = problem.ops.A @ coarse_project(problem.ops, y_ref)
    return field_of_coefficients(problem.trial, y_c, eval_coords)


def evaluate_state(state: SurrogateState, problem: Problem,
                   vset: ValidationSet, *, label: str = "") -> EvalReport:
    """Metrics of a checkpoint on one validation set."""
    coords = np.linspace(0.0, 1.0, vset.grid)
    bc = parse_bc(vset.bc_name)
    law = ConstitutiveLaw(alpha=vset.alpha, u_bar=vset.u_bar)
    bands = [predict(state, c, problem, bc=bc, law=law, eval_coords=coords)
             for c in vset.c]
    means = np.array([b.mean for b in bands])
    if state.mode == "mpanis":
        refs = np.array([project_reference(problem, u, coords) for u in vset.u])
    else:
        refs = vset.u
    eps, per = rel_l2(refs, means)
    return EvalReport(r2=r_squared(refs, means), eps=eps, per_sample_eps=per,
                      coverage=band_coverage(refs, bands), label=label)


def sweep(state: SurrogateState, problem: Problem, axis: str, values,
          rng: np.random.Generator, *, count: int | None = None) -> EvalReport:
    """Out-of-distribution study along one axis; each cell regenerates its
    validation data and carries the published full-scale numbers alongside."""
    axis = axis.lower()
    if axis not in ("vf", "bc", "alpha"):
        raise ConfigError(f"sweep axis must be vf, bc or alpha, got {axis!r}")
    multiscale = state.mode == "mpanis"
    report = EvalReport(label=f"sweep over {axis}")
    for value in values:
        row: dict = {axis: value}
        try:
            if axis == "vf":
                spec = MicrostructureSpec(kle=problem.microspec.kle,
                                          volume_fraction=float(value),
                                          contrast_ratio=problem.config.contrast_ratio)
                vset = gen_validation(problem, rng, count=count, microspec=spec)
                ref_cols = published.vf_reference(float(value),
                                                  nonlinear=problem.law.alpha != 0,
                                                  multiscale=multiscale)
            elif axis == "bc":
                vset = gen_validation(problem, rng, count=count,
                                      bc=parse_bc(str(value)))
                ref_cols = published.bc_reference(str(value),
                                                  nonlinear=problem.law.alpha != 0,
                                                  multiscale=multiscale)
            else:
                law = ConstitutiveLaw(alpha=float(value), u_bar=problem.law.u_bar)
                vset = gen_validation(problem, rng, count=count, law=law)
                ref_cols = (published.vf_reference(problem.config.volume_fraction,
                                                   nonlinear=True)
                            if float(value) == 0.05 else {})
            cell = evaluate_state(state, problem, vset)
            row.update(r2=cell.r2, eps=cell.eps, coverage=cell.coverage)
            row.update(ref_cols)
        except (NumericalError, ConfigError, DomainError) as exc:
            row["error"] = str(exc)  # keep sweeping the remaining cells
        report.rows.append(row)
    return report


def write_pgm(path, fld: np.ndarray) -> None:
    """Portable graymap render of a field (min -> black, max -> white)."""
    lo, hi = float(fld.min()), float(fld.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    img = ((fld - lo) * scale).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
