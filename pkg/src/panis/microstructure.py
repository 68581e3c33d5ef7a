"""Parametric random microstructures: truncated KLE of a Gaussian field,
thresholded into a two-phase permeability image.

The squared-exponential kernel exp(-|s-s'|^2 / l^2) factorizes over the two
coordinates, so the discrete (Nystrom) eigenproblem on the pixel grid is
solved exactly from two one-dimensional eigendecompositions: 2-D eigenpairs
are products of 1-D ones. Grid points carry uniform cell measure 1/g per
axis and eigenfunctions are orthonormal under that measure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NumericalError

__all__ = [
    "KernelSpec",
    "KleBasis",
    "MicrostructureSpec",
    "FieldSample",
    "build_kle_basis",
    "threshold_for_vf",
    "sample_field",
    "gaussian_field",
    "std_normal_cdf",
]


@dataclass(frozen=True)
class KernelSpec:
    """Squared-exponential kernel on the unit square, sampled on a g x g grid."""

    length_scale: float
    grid_resolution: int

    def __post_init__(self):
        if not self.length_scale > 0:
            raise DomainError(f"length_scale must be positive, got {self.length_scale}")
        if self.grid_resolution < 2:
            raise DomainError(f"grid_resolution must be >= 2, got {self.grid_resolution}")

    @property
    def coords(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.grid_resolution)

    def evaluate(self, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Kernel value for point arrays of shape (..., 2)."""
        d2 = np.sum((np.asarray(s) - np.asarray(t)) ** 2, axis=-1)
        return np.exp(-d2 / self.length_scale**2)


@dataclass
class KleBasis:
    """Top modes of the discrete KLE.

    Eigenfunctions are stored in factored form: mode i is the outer product
    ``factors_a[i]`` x ``factors_b[i]`` on the grid. ``eigenfunction(i)``
    materializes the 2-D field.
    """

    kernel: KernelSpec
    eigenvalues: np.ndarray  # (d,), descending
    factors_a: np.ndarray  # (d, g)
    factors_b: np.ndarray  # (d, g)
    truncation: int
    total_energy: float = 1.0  # trace of the weighted kernel operator

    def __post_init__(self):
        if np.any(np.diff(self.eigenvalues) > 1e-12):
            raise NumericalError("KLE eigenvalues are not sorted descending")
        if np.any(self.eigenvalues < -1e-12):
            raise NumericalError("KLE produced a negative eigenvalue")

    @property
    def grid_resolution(self) -> int:
        return self.kernel.grid_resolution

    def eigenfunction(self, i: int) -> np.ndarray:
        return np.outer(self.factors_a[i], self.factors_b[i])

    def gram(self) -> np.ndarray:
        """Gram matrix of the eigenfunctions under the uniform cell measure."""
        g = self.grid_resolution
        ga = (self.factors_a @ self.factors_a.T) / g
        gb = (self.factors_b @ self.factors_b.T) / g
        return ga * gb

    def captured_energy(self) -> float:
        return float(self.eigenvalues.sum() / self.total_energy)

    def evaluate_field(self, coeffs: np.ndarray) -> np.ndarray:
        """Linear combination sum_i coeffs_i * eigenfunction_i as a (g, g) field."""
        coeffs = np.asarray(coeffs, dtype=np.float64)
        return (coeffs[:, None] * self.factors_a).T @ self.factors_b


def build_kle_basis(kernel: KernelSpec, d_x: int) -> KleBasis:
    """Top ``d_x`` eigenpairs of the measure-weighted kernel matrix.

    The 2-D problem (1/g^2) K v = lambda v with K = K1 (x) K1 is solved by
    eigendecomposing the 1-D matrix (1/g) K1 once and pairing its modes.
    """
    g = kernel.grid_resolution
    if not 1 <= d_x <= g * g:
        raise DomainError(f"d_x must lie in [1, {g * g}], got {d_x}")
    c = kernel.coords
    k1 = np.exp(-((c[:, None] - c[None, :]) ** 2) / kernel.length_scale**2)
    try:
        mu, q = np.linalg.eigh(k1 / g)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"eigendecomposition failed for the {g}x{g} kernel matrix"
        ) from exc
    mu = mu[::-1]
    q = q[:, ::-1]
    mu = np.clip(mu, 0.0, None)  # clip fp-negative tail modes

    # product spectrum, top d_x
    lam2d = np.multiply.outer(mu, mu)
    flat = lam2d.ravel()
    top = np.argsort(flat)[::-1][:d_x]
    ai, bi = np.unravel_index(top, lam2d.shape)

    v1 = q * math.sqrt(g)  # orthonormal under the 1/g measure
    basis = KleBasis(
        kernel=kernel,
        eigenvalues=flat[top],
        factors_a=np.ascontiguousarray(v1[:, ai].T),
        factors_b=np.ascontiguousarray(v1[:, bi].T),
        truncation=d_x,
        total_energy=float(mu.sum() ** 2),
    )
    return basis


# Acklam's rational approximation to the standard normal quantile, refined
# with one Newton step against the erfc-based CDF; absolute error < 1e-12.
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)


def std_normal_cdf(t: float) -> float:
    return 0.5 * math.erfc(-t / math.sqrt(2.0))


def _acklam(p: float) -> float:
    p_low, p_high = 0.02425, 1 - 0.02425
    if p < p_low:
        qv = math.sqrt(-2 * math.log(p))
        return ((((((_C[0] * qv + _C[1]) * qv + _C[2]) * qv + _C[3]) * qv + _C[4]) * qv + _C[5])
                / ((((_D[0] * qv + _D[1]) * qv + _D[2]) * qv + _D[3]) * qv + 1))
    if p > p_high:
        qv = math.sqrt(-2 * math.log(1 - p))
        return -((((((_C[0] * qv + _C[1]) * qv + _C[2]) * qv + _C[3]) * qv + _C[4]) * qv + _C[5])
                 / ((((_D[0] * qv + _D[1]) * qv + _D[2]) * qv + _D[3]) * qv + 1))
    qv = p - 0.5
    r = qv * qv
    return ((((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * qv
            / (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1))


def threshold_for_vf(vf: float, *, floor: float = 1e-12) -> float:
    """Standard-normal quantile of the volume fraction; monotone in vf."""
    if not 0.0 < vf < 1.0:
        raise DomainError(f"volume fraction must lie in (0, 1), got {vf}")
    if vf < floor or vf > 1.0 - floor:
        raise DomainError(
            f"volume fraction {vf} is beyond the configured floor {floor}; "
            "the threshold would be numerically infinite"
        )
    t = _acklam(vf)
    pdf = math.exp(-0.5 * t * t) / math.sqrt(2 * math.pi)
    return t - (std_normal_cdf(t) - vf) / pdf


@dataclass
class MicrostructureSpec:
    """Input distribution p(x) and the induced two-phase image."""

    kle: KleBasis
    volume_fraction: float
    contrast_ratio: float
    threshold: float = field(init=False)

    def __post_init__(self):
        if not 0.0 < self.volume_fraction < 1.0:
            raise DomainError(f"volume fraction must be in (0,1), got {self.volume_fraction}")
        if not self.contrast_ratio > 0:
            raise DomainError(f"contrast ratio must be positive, got {self.contrast_ratio}")
        self.threshold = threshold_for_vf(self.volume_fraction)

    @property
    def input_dim(self) -> int:
        return self.kle.truncation


@dataclass
class FieldSample:
    """One draw: the coefficient vector x and the binary image it induces.

    Both are kept so training can replay fixed atoms.
    """

    x: np.ndarray  # (d_x,)
    c: np.ndarray  # (g, g) values in {1, 1/CR}


def gaussian_field(spec: MicrostructureSpec | KleBasis, x: np.ndarray) -> np.ndarray:
    """Pre-threshold Gaussian field G(s; x) = sum_i sqrt(lambda_i) x_i v_i(s)."""
    kle = spec.kle if isinstance(spec, MicrostructureSpec) else spec
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (kle.truncation,):
        raise DomainError(f"x must have length {kle.truncation}, got shape {x.shape}")
    return kle.evaluate_field(np.sqrt(kle.eigenvalues) * x)


def sample_field(spec: MicrostructureSpec, x: np.ndarray | None = None,
                 rng: np.random.Generator | None = None) -> FieldSample:
    """Draw (or replay) one two-phase permeability image.

    Phase 1 (c = 1) occupies {G <= t}; its expected pixel fraction is the
    prescribed volume fraction. Ties G = t go to phase 1.
    """
    if x is None:
        if rng is None:
            raise DomainError("either x or rng must be supplied")
        x = rng.standard_normal(spec.input_dim)
    g_field = gaussian_field(spec, x)
    c = np.where(g_field <= spec.threshold, 1.0, 1.0 / spec.contrast_ratio)
    return FieldSample(x=np.asarray(x, dtype=np.float64), c=c)
