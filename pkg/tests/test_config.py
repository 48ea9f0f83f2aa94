import pytest

from dagankit.config import SEED_ENV, ConfigError, RunConfig, format_config, load_config, parse_config_text


def test_defaults():
    cfg = load_config(env={})
    assert cfg == RunConfig()
    assert cfg.num_kp == 15 and cfg.gan_steps == 5000 and cfg.depth_steps == 2000


def test_file_overrides_defaults_and_flags_override_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 7\n# comment line\nnum_kp = 10  # trailing comment\n\ngan_lr = 1e-3\n")
    cfg = load_config(path, env={})
    assert (cfg.seed, cfg.num_kp, cfg.gan_lr) == (7, 10, 1e-3)
    cfg = load_config(path, {"num_kp": 5, "seed": None}, env={})
    assert (cfg.seed, cfg.num_kp) == (7, 5)


def test_env_seed_overrides_file_but_not_flag(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 7\n")
    assert load_config(path, env={SEED_ENV: "11"}).seed == 11
    assert load_config(path, {"seed": 3}, env={SEED_ENV: "11"}).seed == 3


@pytest.mark.parametrize("text", ["bogus = 1", "seed = abc", "seed 3", "distance_surrogate = maybe"])
def test_bad_lines_rejected(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


@pytest.mark.parametrize("word,value", [("true", True), ("On", True), ("0", False), ("no", False)])
def test_bool_parsing(word, value):
    assert parse_config_text(f"distance_surrogate = {word}") == {"distance_surrogate": value}


def test_format_round_trips():
    cfg = RunConfig(seed=4, distance_surrogate=True, gan_lr=3e-4)
    assert load_config(overrides=parse_config_text(format_config(cfg)), env={}) == cfg


def test_digest_tracks_values():
    assert RunConfig().digest() == RunConfig().digest()
    assert RunConfig().digest() != RunConfig(seed=1).digest()


def test_invalid_values_rejected():
    with pytest.raises(ConfigError):
        RunConfig(resolution=60)
    with pytest.raises(ConfigError):
        RunConfig(num_kp=0)


def test_stage_configs_carry_values():
    cfg = RunConfig(lambda_e=3.0, distance_surrogate=True, depth_steps=12)
    assert cfg.gan_config().weights.equivariance == 3.0
    assert cfg.gan_config().distance_surrogate
    assert cfg.depth_config().steps == 12
