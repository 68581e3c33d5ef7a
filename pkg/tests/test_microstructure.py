import math

import numpy as np
import pytest

from panis import microstructure as ms
from panis.errors import DomainError


@pytest.fixture(scope="module")
def basis33():
    return ms.build_kle_basis(ms.KernelSpec(0.25, 33), 128)


class TestBuildKleBasis:
    def test_constant_kernel_limit_is_rank_one(self):
        basis = ms.build_kle_basis(ms.KernelSpec(1e8, 17), 4)
        assert basis.eigenvalues[0] == pytest.approx(1.0, abs=1e-8)
        assert basis.eigenvalues[1] == pytest.approx(0.0, abs=1e-8)

    def test_full_scale_dimensions(self):
        basis = ms.build_kle_basis(ms.KernelSpec(0.25, 129), 1024)
        assert basis.truncation == 1024
        assert basis.eigenvalues.shape == (1024,)
        assert basis.eigenfunction(0).shape == (129, 129)

    def test_eigenvalues_sorted_descending(self, basis33):
        assert np.all(np.diff(basis33.eigenvalues) <= 1e-14)

    def test_gram_is_identity(self, basis33):
        gram = basis33.gram()
        assert np.abs(gram - np.eye(len(gram))).max() < 1e-8

    def test_kernel_reconstruction_within_tail_bound(self, basis33):
        # oracle: direct kernel evaluation at random grid point pairs
        rng = np.random.default_rng(7)
        kern = basis33.kernel
        g = kern.grid_resolution
        coords = kern.coords
        lam = basis33.eigenvalues
        for _ in range(10):
            i1, j1, i2, j2 = rng.integers(0, g, 4)
            s = np.array([coords[i1], coords[j1]])
            t = np.array([coords[i2], coords[j2]])
            approx = float(np.sum(
                lam * basis33.factors_a[:, i1] * basis33.factors_b[:, j1]
                * basis33.factors_a[:, i2] * basis33.factors_b[:, j2]))
            exact = float(kern.evaluate(s, t))
            tail_s = max(kern.evaluate(s, s)
                         - np.sum(lam * (basis33.factors_a[:, i1]
                                         * basis33.factors_b[:, j1]) ** 2), 0.0)
            tail_t = max(kern.evaluate(t, t)
                         - np.sum(lam * (basis33.factors_a[:, i2]
                                         * basis33.factors_b[:, j2]) ** 2), 0.0)
            assert abs(exact - approx) <= math.sqrt(tail_s * tail_t) + 1e-10

    def test_truncation_bounds_enforced(self):
        with pytest.raises(DomainError):
            ms.build_kle_basis(ms.KernelSpec(0.25, 5), 26)


class TestThresholdForVf:
    def test_half_gives_zero(self):
        assert ms.threshold_for_vf(0.5) == pytest.approx(0.0, abs=1e-14)

    def test_known_quantile(self):
        # oracle: invert the normal CDF by quadrature of the density + bisection
        target = 0.841345
        grid = np.linspace(-8.0, 8.0, 400001)
        dens = np.exp(-grid**2 / 2) / math.sqrt(2 * math.pi)
        cdf = np.concatenate([[0.0], np.cumsum((dens[1:] + dens[:-1]) / 2
                                               * np.diff(grid))])
        t_oracle = float(np.interp(target, cdf, grid))
        assert ms.threshold_for_vf(target) == pytest.approx(t_oracle, abs=1e-6)
        assert ms.threshold_for_vf(target) == pytest.approx(1.0, abs=1e-4)

    def test_monotone_increasing(self):
        vfs = np.linspace(0.01, 0.99, 57)
        ts = [ms.threshold_for_vf(v) for v in vfs]
        assert np.all(np.diff(ts) > 0)

    def test_roundtrip_with_cdf_identity(self):
        for t in np.linspace(-5, 5, 41):
            p = ms.std_normal_cdf(t)
            assert ms.threshold_for_vf(p) == pytest.approx(t, abs=1e-10)

    @pytest.mark.parametrize("bad", [0.0, 1.0, -0.3, 2.0])
    def test_domain_errors(self, bad):
        with pytest.raises(DomainError):
            ms.threshold_for_vf(bad)

    def test_floor_reports_error(self):
        with pytest.raises(DomainError):
            ms.threshold_for_vf(1e-300)


class TestSampleField:
    def test_zero_coefficients_give_phase_one_everywhere(self, basis33):
        spec = ms.MicrostructureSpec(basis33, 0.5, 10.0)
        fs = ms.sample_field(spec, x=np.zeros(spec.input_dim))
        assert np.all(fs.c == 1.0)

    def test_low_phase_value_is_exact(self, basis33):
        spec = ms.MicrostructureSpec(basis33, 0.5, 10.0)
        rng = np.random.default_rng(3)
        fs = ms.sample_field(spec, rng=rng)
        assert set(np.unique(fs.c)) <= {1.0, 0.1}
        assert np.any(fs.c == 0.1)

    def test_phase_fraction_matches_volume_fraction(self, basis33):
        # Monte-Carlo oracle with a CLT band
        spec = ms.MicrostructureSpec(basis33, 0.3, 10.0)
        rng = np.random.default_rng(11)
        n = 10_000
        xs = rng.standard_normal((n, spec.input_dim))
        coef = np.sqrt(basis33.eigenvalues)[None, :] * xs
        fracs = np.empty(n)
        for k in range(n):
            g = (coef[k][:, None] * basis33.factors_a).T @ basis33.factors_b
            fracs[k] = np.mean(g <= spec.threshold)
        assert abs(fracs.mean() - 0.3) < 0.01

    def test_gaussian_field_linear_in_x(self, basis33):
        spec = ms.MicrostructureSpec(basis33, 0.5, 10.0)
        rng = np.random.default_rng(5)
        x1 = rng.standard_normal(spec.input_dim)
        x2 = rng.standard_normal(spec.input_dim)
        g12 = ms.gaussian_field(spec, x1 + x2)
        g1 = ms.gaussian_field(spec, x1)
        g2 = ms.gaussian_field(spec, x2)
        assert np.abs(g12 - (g1 + g2)).max() < 1e-10

    def test_sample_caches_x_and_c(self, basis33):
        spec = ms.MicrostructureSpec(basis33, 0.5, 10.0)
        rng = np.random.default_rng(9)
        fs = ms.sample_field(spec, rng=rng)
        replay = ms.sample_field(spec, x=fs.x)
        assert np.array_equal(fs.c, replay.c)

    def test_wrong_length_rejected(self, basis33):
        spec = ms.MicrostructureSpec(basis33, 0.5, 10.0)
        with pytest.raises(DomainError):
            ms.sample_field(spec, x=np.zeros(3))
