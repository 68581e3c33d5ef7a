import numpy as np
import pytest

from panis import fem, network, pipeline, surrogate
from panis.config import Config
from panis.errors import ConfigError, NumericalError


@pytest.fixture(scope="module")
def tiny():
    cfg = Config(grid_resolution=17, input_dim=16, trial_side=8, weight_side=5,
                 coarse_elements=4, lam=50.0, subsample=8, samples_per_step=2,
                 cov_rank=3, fine_resolution=33, validation_count=4)
    problem = pipeline.build_problem(cfg)
    state = pipeline.init_state(cfg, problem, np.random.default_rng(0))
    return cfg, problem, state


@pytest.fixture(scope="module")
def tiny_multi():
    cfg = Config(mode="mpanis", grid_resolution=36, input_dim=16, trial_side=8,
                 weight_side=8, coarse_elements=4, lam=50.0, subsample=10,
                 samples_per_step=2, atom_count=3, cov_rank=3,
                 fine_resolution=33, validation_count=4)
    problem = pipeline.build_problem(cfg)
    state = pipeline.init_state(cfg, problem, np.random.default_rng(1))
    return cfg, problem, state


def _c(problem, seed=5):
    from panis.microstructure import sample_field

    return sample_field(problem.microspec, rng=np.random.default_rng(seed)).c


class TestMeanSolve:
    def test_constant_bc_zero_source_fixes_mean(self, tiny):
        cfg, problem, state = tiny
        bc10 = np.full(len(problem.mesh.boundary_nodes), 10.0)
        msr = surrogate.mean_solve(state, _c(problem), problem.mesh, bc10, 0.0,
                                   problem.ops)
        # Y == 10 regardless of the network, so mu = A (10 * ones)
        want = problem.ops.A @ np.full(problem.ops.d_Y, 10.0)
        assert np.abs(msr.mu - want).max() < 1e-9

    def test_bc_change_leaves_parameters_untouched(self, tiny):
        cfg, problem, state = tiny
        before = {k: v.copy() for k, v in state.params.items()}
        sin_bc = pipeline.parse_bc("sin")
        vals = sin_bc.values(problem.mesh.nodes[problem.mesh.boundary_nodes])
        surrogate.mean_solve(state, _c(problem), problem.mesh, vals, 100.0,
                             problem.ops)
        assert all(np.array_equal(before[k], state.params[k]) for k in before)

    def test_mu_depends_on_c_only_through_network_output(self, tiny):
        cfg, problem, state = tiny
        msr = surrogate.mean_solve(state, _c(problem), problem.mesh,
                                   problem.coarse_bc, 100.0, problem.ops,
                                   train=False)
        model = fem.CoarseModel(problem.mesh,
                                fem.element_perm_from_nodal(problem.mesh,
                                                            msr.X_flat),
                                problem.coarse_bc, 100.0)
        sol = fem.solve_linear(model)
        assert np.abs(problem.ops.A @ sol.Y - msr.mu).max() < 1e-12


class TestSamplePosterior:
    def test_zero_noise_returns_mean(self, tiny):
        cfg, problem, state = tiny
        msr = surrogate.mean_solve(state, _c(problem), problem.mesh,
                                   problem.coarse_bc, 100.0, problem.ops)
        s = surrogate.sample_posterior(state, msr, problem.ops,
                                       eps1=np.zeros(cfg.cov_rank),
                                       eps2=np.zeros(problem.ops.d_y))
        assert np.array_equal(s.y, msr.mu)

    def test_sample_covariance_matches_low_rank_form(self, tiny):
        # Monte-Carlo moment oracle on random 2-D marginals
        cfg, problem, state = tiny
        rng = np.random.default_rng(11)
        state.cov_L = 0.5 * rng.standard_normal(state.cov_L.shape)
        state.log_sigma = np.log(0.3)
        msr = surrogate.mean_solve(state, _c(problem), problem.mesh,
                                   problem.coarse_bc, 100.0, problem.ops)
        n = 100_000
        u_fact = problem.ops.A @ state.cov_L
        cov_true = u_fact @ u_fact.T + state.sigma**2 * np.eye(problem.ops.d_y)
        eps1 = rng.standard_normal((n, cfg.cov_rank))
        eps2 = rng.standard_normal((n, problem.ops.d_y))
        dev = eps1 @ u_fact.T + state.sigma * eps2
        picks = rng.choice(problem.ops.d_y, size=(20, 2), replace=True)
        for i, j in picks:
            emp = (dev[:, i] * dev[:, j]).mean()
            se = (dev[:, i] * dev[:, j]).std(ddof=1) / np.sqrt(n)
            assert abs(emp - cov_true[i, j]) < 4 * max(se, 1e-12)

    def test_multiscale_sample_decomposition(self, tiny_multi):
        cfg, problem, state = tiny_multi
        atom = state.atoms[0]
        atom.yf[:] = 0.1
        atom.yf[~state.fluct_free] = 0.0
        msr = surrogate.mean_solve(state, atom.c, problem.mesh,
                                   problem.coarse_bc, 100.0, problem.ops)
        rank = cfg.cov_rank
        s = surrogate.sample_posterior(state, msr, problem.ops,
                                       eps1=np.zeros(rank),
                                       eps2=np.zeros(state.cov_L.shape[0]),
                                       atom=atom)
        assert np.abs(s.y - (s.y_c + s.y_f)).max() < 1e-14
        # with zero noise the coarse part reproduces the mean pipeline
        assert np.abs(s.y_c - msr.mu).max() < 1e-9

    def test_multiscale_clamp_counts(self, tiny_multi):
        cfg, problem, state = tiny_multi
        atom = state.atoms[0]
        msr = surrogate.mean_solve(state, atom.c, problem.mesh,
                                   problem.coarse_bc, 100.0, problem.ops)
        big = -100.0 * np.ones(state.cov_L.shape[0])
        s = surrogate.sample_posterior(state, msr, problem.ops,
                                       eps1=np.zeros(cfg.cov_rank), eps2=big,
                                       atom=atom)
        assert s.clamped.all()
        assert np.all(s.model.element_perm > 0)

    def test_multiscale_requires_atom(self, tiny_multi):
        cfg, problem, state = tiny_multi
        msr = surrogate.mean_solve(state, state.atoms[0].c, problem.mesh,
                                   problem.coarse_bc, 100.0, problem.ops)
        with pytest.raises(ConfigError):
            surrogate.sample_posterior(state, msr, problem.ops,
                                       rng=np.random.default_rng(0))


class TestLogEntropy:
    def test_zero_factor_reduces_to_isotropic(self, tiny):
        cfg, problem, state = tiny
        keep = state.cov_L.copy()
        state.cov_L = np.zeros_like(state.cov_L)
        state.log_sigma = np.log(0.7)
        h = surrogate.log_entropy(state, problem.ops)
        assert h == pytest.approx(problem.ops.d_y * np.log(0.7), rel=1e-12)
        state.cov_L = keep

    def test_matches_dense_logdet_oracle(self):
        rng = np.random.default_rng(3)
        u = rng.standard_normal((12, 4))
        sigma2 = 0.4
        dense = 0.5 * np.linalg.slogdet(sigma2 * np.eye(12) + u @ u.T)[1]
        assert surrogate.half_logdet_lowrank(u, sigma2, 12) == pytest.approx(
            dense, abs=1e-10)

    def test_monotone_in_sigma(self, tiny):
        cfg, problem, state = tiny
        vals = []
        for s in (0.1, 0.2, 0.4, 0.8):
            state.log_sigma = np.log(s)
            vals.append(surrogate.log_entropy(state, problem.ops))
        assert np.all(np.diff(vals) > 0)

    def test_degenerate_sigma_rejected(self):
        with pytest.raises(NumericalError):
            surrogate.half_logdet_lowrank(np.zeros((4, 2)), 0.0, 4)

    def test_entropy_gradients_match_fd(self, tiny):
        cfg, problem, state = tiny
        rng = np.random.default_rng(4)
        state.cov_L = 0.3 * rng.standard_normal(state.cov_L.shape)
        state.log_sigma = np.log(0.5)
        d_l, d_ls = surrogate.entropy_gradients(state, problem.ops)
        h = 1e-6
        state.log_sigma += h
        up = surrogate.log_entropy(state, problem.ops)
        state.log_sigma -= 2 * h
        dn = surrogate.log_entropy(state, problem.ops)
        state.log_sigma += h
        assert d_ls == pytest.approx((up - dn) / (2 * h), rel=1e-6)
        i, j = 5, 2
        state.cov_L[i, j] += h
        up = surrogate.log_entropy(state, problem.ops)
        state.cov_L[i, j] -= 2 * h
        dn = surrogate.log_entropy(state, problem.ops)
        state.cov_L[i, j] += h
        assert d_l[i, j] == pytest.approx((up - dn) / (2 * h), rel=1e-6)


class TestStateStructure:
    def test_published_trainable_totals(self):
        # full-scale defaults: CNN + coarse covariance factor + scalar
        arch = network.panis_cnn(129)
        total = arch.n_params + 289 * 10 + 1
        assert total == 7956
        arch = network.mpanis_cnn(129)
        total = arch.n_params + 81 * 10 + 1 + 100 * (4096 - 81)
        assert total == 415112

    def test_trainable_count_property(self, tiny_multi):
        cfg, problem, state = tiny_multi
        d_f = problem.ops.Aperp.shape[1]
        want = state.arch.n_params + state.cov_L.size + 1 + cfg.atom_count * d_f
        assert state.trainable_count() == want

    def test_atom_lookup_by_content_hash(self, tiny_multi):
        cfg, problem, state = tiny_multi
        atom = state.atoms[1]
        assert state.atom_by_key(surrogate.atom_key(atom.x)) is atom

    def test_frozen_components_have_boundary_trace(self, tiny_multi):
        cfg, problem, state = tiny_multi
        free = state.fluct_free
        assert free.shape == (problem.ops.Aperp.shape[1],)
        assert 0 < free.sum() < free.size
