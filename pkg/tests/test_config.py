import pytest

from pnphvae import config
from pnphvae.config import ConfigError


def test_precedence_cli_over_file_over_default(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("# comment\nsigma = 7.65\nseed = 3\n\nmax_iter = 10  # trailing\n")
    cfg = config.load(f, {"seed": "9"})
    assert cfg["sigma"] == 7.65 and cfg["seed"] == 9 and cfg["max_iter"] == 10
    assert cfg["output"] == "out"


def test_errors():
    with pytest.raises(ConfigError, match="unknown config key"):
        config.resolve({"sigmaa": "1"})
    with pytest.raises(ConfigError, match="expected key = value"):
        config.parse_text("sigma 3")
    with pytest.raises(ConfigError, match="as int"):
        config.resolve({"seed": "x"})
    with pytest.raises(ConfigError):
        config.resolve({"tau": "1.5"})
    with pytest.raises(ConfigError):
        config.resolve({"task": "paint"})
    with pytest.raises(ConfigError):
        config.resolve({"sigma": "-1"})


def test_default_tau_table_and_interpolation():
    assert config.default_tau(2.55) == 0.95
    assert config.default_tau(7.65) == 0.8
    assert config.default_tau(12.75) == 0.6
    assert config.default_tau(5.1) == pytest.approx(0.875)
    assert config.default_tau(0.0) == 0.95 and config.default_tau(50.0) == 0.6


def test_tau_lists():
    cfg = config.resolve({"tau": "0.9,0.7"})
    assert config.tau_for(cfg, 2) == (0.9, 0.7)
    with pytest.raises(ConfigError):
        config.tau_for(cfg, 3)
    assert config.tau_for(config.resolve({"sigma": "7.65"}), 4) == 0.8


def test_task_defaults():
    assert config.solver_max_iter(config.resolve({"task": "inpaint"})) == 200
    assert config.solver_max_iter(config.resolve({"task": "deblur"})) == 50
    assert config.plateau_window(config.resolve({"task": "inpaint"})) == 10
    assert config.plateau_window(config.resolve({"task": "deblur"})) == 0
    assert config.solver_tol(config.resolve({}), 64) == pytest.approx(8e-5)


def test_manifest_roundtrip():
    cfg = config.resolve({"task": "deblur", "sigma": "0.1", "tau": "0.9", "kernel_bandwidth": "1.25"})
    assert config.resolve(config.parse_text(config.dumps(cfg))) == cfg


def test_kv_roundtrip(tmp_path):
    config.write_kv(tmp_path / "m.txt", {"psnr": 27.5, "stop": "tol"})
    assert config.read_kv(tmp_path / "m.txt") == {"psnr": "27.5", "stop": "tol"}
