import pytest

from panis.config import Config, parse_config, preset_config
from panis.errors import ConfigError


class TestParseConfig:
    def test_key_value_lines_with_comments(self):
        cfg = parse_config("""
            # training setup
            mode = panis
            lambda = 2.5e3   # precision of the virtual likelihood
            subsample = 40
            bc = const:10
        """)
        assert cfg.lam == 2500.0
        assert cfg.subsample == 40
        assert cfg.bc == "const:10"

    def test_preset_line_seeds_defaults(self):
        cfg = parse_config("preset = panis-desk\nmax_steps = 123\n")
        assert cfg.grid_resolution == 33
        assert cfg.max_steps == 123

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            parse_config("sooperparam = 3\n")

    def test_malformed_line_rejected(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_config("mode = panis\nnonsense without equals\n")

    def test_effective_text_roundtrips(self):
        cfg = preset_config("mpanis-desk")
        back = parse_config(cfg.effective_text())
        assert back == cfg

    def test_bool_coercion(self):
        assert parse_config("fluctuations = false\n").fluctuations is False
        with pytest.raises(ConfigError):
            parse_config("fluctuations = maybe\n")


class TestValidation:
    def test_subsample_bounded_by_bank(self):
        with pytest.raises(ConfigError, match="subsample"):
            Config(weight_side=5, subsample=26).validate()

    def test_lambda_positive(self):
        with pytest.raises(ConfigError, match="lambda"):
            Config(lam=0.0).validate()

    def test_volume_fraction_open_interval(self):
        with pytest.raises(ConfigError):
            Config(volume_fraction=1.0).validate()

    def test_bc_grammar(self):
        with pytest.raises(ConfigError, match="bc"):
            Config(bc="ramp").validate()
        Config(bc="const:-2.5").validate()

    def test_cov_rank_below_coarse_dimension(self):
        with pytest.raises(ConfigError, match="cov_rank"):
            Config(coarse_elements=2, cov_rank=9).validate()

    def test_published_full_scale_defaults(self):
        cfg = Config().validate()
        assert (cfg.lam, cfg.n_weights, cfg.subsample) == (1e4, 289, 100)
        assert cfg.d_y == 4096
        assert cfg.prior_variance == 1e16
        mp = preset_config("mpanis-full")
        assert (mp.n_weights, mp.subsample, mp.atom_count) == (4096, 1500, 100)
        assert mp.lam == pytest.approx(10**2.2)
        nl = preset_config("panis-full-nonlinear")
        assert (nl.subsample, nl.alpha, nl.u_bar) == (200, 0.05, 5.0)
