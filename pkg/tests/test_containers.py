import numpy as np
import pytest

from panis import containers
from panis.errors import ConfigError


class TestContainerRoundTrip:
    def test_bit_exact_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = {
            "x": rng.standard_normal(17),
            "c": rng.standard_normal((5, 7)),
            "psi_x/00_conv/weight": rng.standard_normal((2, 1, 3, 3)),
            "scalar": np.array(3.25),
        }
        path = tmp_path / "box.panisbox"
        containers.write_container(path, arrays)
        back = containers.read_container(path)
        assert list(back) == list(arrays)
        for k in arrays:
            assert np.array_equal(back[k], np.asarray(arrays[k], dtype=float))
            assert back[k].shape == np.asarray(arrays[k]).shape

    def test_header_is_readable_text(self, tmp_path):
        path = tmp_path / "box.panisbox"
        containers.write_container(path, {"eigvals": np.arange(3.0)})
        head = path.read_bytes().split(b"\n")[:3]
        assert head[0] == b"PANISBOX1"
        assert head[1] == b"eigvals f64 3"
        assert head[2] == b""

    def test_config_echo_roundtrip(self, tmp_path):
        path = tmp_path / "box.panisbox"
        text = "mode = panis\nlambda = 10000.0\n# comment with unicode é\n"
        containers.write_container(path, {"u": np.zeros(2)}, config_text=text)
        back = containers.read_container(path)
        assert containers.container_config(back) == text

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.panisbox"
        path.write_bytes(b"NOTABOX\n\n")
        with pytest.raises(ConfigError, match="magic"):
            containers.read_container(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "box.panisbox"
        containers.write_container(path, {"u": np.zeros(100)})
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(ConfigError, match="truncated"):
            containers.read_container(path)

    def test_whitespace_names_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            containers.write_container(tmp_path / "x", {"bad name": np.zeros(1)})

    def test_deterministic_bytes(self, tmp_path):
        rng = np.random.default_rng(1)
        arrays = {"a": rng.standard_normal(9), "b": rng.standard_normal((2, 2))}
        p1, p2 = tmp_path / "one", tmp_path / "two"
        containers.write_container(p1, arrays, config_text="k = v\n")
        containers.write_container(p2, arrays, config_text="k = v\n")
        assert p1.read_bytes() == p2.read_bytes()
