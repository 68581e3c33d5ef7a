import numpy as np
import pytest

from panis import fem, residuals
from panis.errors import ConfigError, DomainError

LINEAR = fem.ConstitutiveLaw()
NONLINEAR = fem.ConstitutiveLaw(0.05, 5.0)


@pytest.fixture(scope="module")
def engine():
    quad = residuals.QuadratureGrid(33)
    return residuals.ResidualEngine(quad, residuals.TrialBasis(16),
                                    residuals.WeightBank(9), source=100.0)


@pytest.fixture(scope="module")
def c_field():
    rng = np.random.default_rng(0)
    return np.where(rng.standard_normal((33, 33)) > 0, 1.0, 0.1)


class TestQuadratureGrid:
    def test_weights_sum_to_domain_area(self):
        for n in (17, 33, 129):
            quad = residuals.QuadratureGrid(n)
            assert abs(quad.weights2d.sum() - 1.0) < 1e-12

    def test_refinement_convergence(self):
        # residual of a fixed smooth pair on two quadrature resolutions
        rng = np.random.default_rng(1)
        trial = residuals.TrialBasis(16)
        y = rng.standard_normal(trial.count)
        vals = {}
        for n in (129, 257):
            eng = residuals.ResidualEngine(residuals.QuadratureGrid(n), trial,
                                           residuals.WeightBank(9), source=100.0)
            vals[n] = eng.eval(40, y, np.ones((n, n)), LINEAR).value
        assert abs(vals[129] - vals[257]) < 1e-4 * max(abs(vals[257]), 1.0)


class TestEvalTrial:
    def test_zero_coefficients(self):
        trial = residuals.TrialBasis(8)
        quad = residuals.QuadratureGrid(17)
        u, ux, uy = trial.evaluate(np.zeros(trial.count), quad)
        assert not u.any() and not ux.any() and not uy.any()

    def test_one_hot_at_own_center(self):
        trial = residuals.TrialBasis(8)
        i1, i2 = 3, 5
        y = np.zeros(trial.count)
        y[i1 * 8 + i2] = 1.0
        val = trial.design_matrix(np.array([[trial.centers[i1], trial.centers[i2]]]))
        assert val @ y == pytest.approx(1.0, abs=1e-12)

    def test_linearity(self):
        trial = residuals.TrialBasis(8)
        quad = residuals.QuadratureGrid(17)
        rng = np.random.default_rng(2)
        y1 = rng.standard_normal(trial.count)
        y2 = rng.standard_normal(trial.count)
        for a, b in zip(trial.evaluate(y1 + y2, quad),
                        (u1 + u2 for u1, u2 in zip(trial.evaluate(y1, quad),
                                                   trial.evaluate(y2, quad)))):
            assert np.abs(a - b).max() < 1e-12


class TestWeightBank:
    def test_vanishes_on_boundary_exactly(self):
        bank = residuals.WeightBank(9)
        quad = residuals.QuadratureGrid(33)
        for j in (0, 13, 80):
            w = bank.field(j, quad.coords)
            assert not w[0, :].any() and not w[-1, :].any()
            assert not w[:, 0].any() and not w[:, -1].any()

    def test_count(self):
        assert residuals.WeightBank(17).count == 289


class TestEvalResidual:
    def test_zero_solution_source_term(self, engine, c_field):
        # oracle: direct quadrature of the weight field
        for j in (0, 27, 44):
            w = engine.bank.field(j, engine.quad.coords)
            oracle = -engine.source * float((engine.quad.weights2d * w).sum())
            got = engine.eval(j, np.zeros(engine.trial.count), c_field, LINEAR)
            assert got.value == pytest.approx(oracle, abs=1e-12)

    def test_galerkin_solution_zeroes_every_residual(self, engine, c_field):
        y = residuals.trial_space_galerkin(engine, c_field)
        table = engine.residual_table(y, c_field, LINEAR)
        assert np.abs(table).max() <= 1e-8

    @pytest.mark.parametrize("law,tol", [(LINEAR, 1e-7), (NONLINEAR, 1e-5)])
    def test_gradient_matches_finite_differences(self, engine, c_field, law, tol):
        rng = np.random.default_rng(3)
        y = rng.standard_normal(engine.trial.count)
        j = 40
        got = engine.eval(j, y, c_field, law)
        strong = np.argsort(np.abs(got.dR_dy))[::-1][:10]
        h = 1e-6
        for i in strong:
            yp, ym = y.copy(), y.copy()
            yp[i] += h
            ym[i] -= h
            fd = (engine.eval(j, yp, c_field, law).value
                  - engine.eval(j, ym, c_field, law).value) / (2 * h)
            assert abs(fd - got.dR_dy[i]) <= tol * max(abs(fd), 1e-8)

    def test_affine_in_y_for_linear_law(self, engine, c_field):
        rng = np.random.default_rng(4)
        y1 = rng.standard_normal(engine.trial.count)
        y2 = rng.standard_normal(engine.trial.count)
        r0 = engine.residual_table(np.zeros_like(y1), c_field, LINEAR)
        r1 = engine.residual_table(y1, c_field, LINEAR)
        r2 = engine.residual_table(y2, c_field, LINEAR)
        r12 = engine.residual_table(y1 + y2, c_field, LINEAR)
        assert np.abs(r12 - (r1 + r2 - r0)).max() < 1e-10

    def test_gradient_independent_of_y_for_linear_law(self, engine, c_field):
        rng = np.random.default_rng(5)
        g1 = engine.eval(7, rng.standard_normal(engine.trial.count), c_field).dR_dy
        g2 = engine.eval(7, rng.standard_normal(engine.trial.count), c_field).dR_dy
        assert np.abs(g1 - g2).max() < 1e-12

    def test_nonlinear_returns_field_sensitivity(self, engine, c_field):
        rng = np.random.default_rng(6)
        got = engine.eval(11, rng.standard_normal(engine.trial.count), c_field,
                          NONLINEAR)
        assert got.dR_du is not None
        assert got.dR_du.shape == (33, 33)

    def test_batch_matches_table(self, engine, c_field):
        rng = np.random.default_rng(7)
        y = rng.standard_normal(engine.trial.count)
        table = engine.residual_table(y, c_field, LINEAR)
        idx = np.arange(engine.n_weights)
        batch = engine.eval_batch(idx, y, c_field, LINEAR)
        assert np.abs(batch.values - table.ravel()).max() < 1e-13

    def test_resolution_mismatch_uses_nearest_pixel(self, engine):
        c65 = np.ones((65, 65))
        assert engine.map_c(c65).shape == (33, 33)
        with pytest.raises(ConfigError):
            engine.map_c(np.ones((4, 5)))

    def test_neumann_term_matches_direct_quadrature(self, c_field):
        # tau-damped weights vanish on the edge, so the flux term is zero and
        # must agree with directly quadrating w along the edge
        quad = residuals.QuadratureGrid(33)
        bank = residuals.WeightBank(9)
        flux = (residuals.NeumannFlux("s1=0", 3.0),)
        eng = residuals.ResidualEngine(quad, residuals.TrialBasis(16), bank,
                                       source=100.0, neumann=flux)
        base = residuals.ResidualEngine(quad, residuals.TrialBasis(16), bank,
                                        source=100.0)
        j = 31
        w_edge = bank.field(j, quad.coords)[0, :]  # s1 = 0 line
        direct = 3.0 * float(quad.w1d @ w_edge)
        y = np.zeros(eng.trial.count)
        got = eng.eval(j, y, c_field).value - base.eval(j, y, c_field).value
        assert got == pytest.approx(direct, abs=1e-14)
        assert direct == 0.0


class TestSubsampleResiduals:
    def test_range_and_size(self):
        rng = np.random.default_rng(0)
        idx = residuals.subsample_residuals(289, 100, rng)
        assert idx.shape == (100,)
        assert idx.min() >= 0 and idx.max() < 289

    def test_deterministic_under_seed(self):
        a = residuals.subsample_residuals(50, 20, np.random.default_rng(42))
        b = residuals.subsample_residuals(50, 20, np.random.default_rng(42))
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("m", [0, -1, 300])
    def test_domain_errors(self, m):
        with pytest.raises(DomainError):
            residuals.subsample_residuals(289, m, np.random.default_rng(0))

    def test_estimator_unbiased(self, engine, c_field):
        # Monte-Carlo oracle for the with-replacement estimator
        rng = np.random.default_rng(9)
        y = rng.standard_normal(engine.trial.count)
        vals = np.abs(engine.residual_table(y, c_field, LINEAR).ravel())
        full = vals.sum()
        n, m, reps = engine.n_weights, 20, 100_000
        draws = rng.integers(0, n, size=(reps, m))
        est = (n / m) * vals[draws].sum(axis=1)
        se = est.std(ddof=1) / np.sqrt(reps)
        assert abs(est.mean() - full) < 3 * se
