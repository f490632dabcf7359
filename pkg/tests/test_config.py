import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from Utils.config import (
    EFFECTIVE_CONFIG_NAME,
    ConfigError,
    RunConfig,
    apply_values,
    config_hash,
    dump_config,
    load_run_config,
    parse_dotted,
    parse_overrides,
    write_effective_config,
)

PROJECT_ROOT = Path(__file__).resolve().parents[1]
SMOKE = PROJECT_ROOT / "config" / "smoke.cfg"
DEFAULT = PROJECT_ROOT / "config" / "default_config.json"


def test_default_profile_loads():
    config = load_run_config(DEFAULT)
    assert config.geometry.n_views == 60
    assert config.geometry.angular_increment == 6.0
    assert config.model.resolution_levels == [64, 32, 16]
    assert config.sampler.snr == 0.4
    assert config.eval.methods == ("unet", "csm", "ctm")
    assert config.phantom.leg_radius_range == (26.0, 32.0)


def test_smoke_profile_loads():
    config = load_run_config(SMOKE)
    assert config.out_dir == Path("runs/smoke")
    assert config.dataset_dir == Path("data/smoke")
    assert config.phantom.grid_size == (16, 16, 16)
    assert config.model.channels_per_level == [8, 16]
    assert config.dataset.show_progress is False


def test_dump_reload_reproduces_the_config(tmp_path):
    config = load_run_config(SMOKE, overrides=["train.max_steps=7", "sampler.discretization=literal"])
    path = tmp_path / "echo.cfg"
    path.write_text(dump_config(config), encoding="utf-8")
    reloaded = load_run_config(path)
    assert reloaded == config
    assert config_hash(reloaded) == config_hash(config)


def test_json_and_dotted_profiles_agree(tmp_path):
    data = {"train": {"max_epochs": 3, "learning_rate": 0.001}, "sampler": {"n_steps": 50}}
    json_path = tmp_path / "p.json"
    json_path.write_text(json.dumps(data), encoding="utf-8")
    dotted_path = tmp_path / "p.cfg"
    dotted_path.write_text(
        "train.max_epochs = 3  # short\ntrain.learning_rate = 1e-3\n\nsampler.n_steps = 50\n", encoding="utf-8"
    )
    assert load_run_config(json_path) == load_run_config(dotted_path)


def test_overrides_are_coerced_by_field_type():
    config = load_run_config(
        None,
        overrides=[
            "train.max_epochs=5",
            "train.learning_rate=1",
            "sampler.discretization=literal",
            "sampler.clamp_output=false",
            "eval.methods=[\"csm\"]",
        ],
    )
    assert config.train.max_epochs == 5
    assert isinstance(config.train.learning_rate, float)
    assert config.sampler.discretization == "literal"
    assert config.sampler.clamp_output is False
    assert config.eval.methods == ("csm",)


@pytest.mark.parametrize(
    "override",
    [
        "train.epochs=3",
        "trainer.max_epochs=3",
        "train.batch_size=2.5",
        "train.batch_size=big",
        "sampler.clamp_output=1",
        "model.conditional=true",
        "sampler.n_steps=0",
        "eval.methods=[\"gan\"]",
        "model.resolution_levels=[32, 16]",
    ],
)
def test_bad_values_raise_config_errors(override):
    with pytest.raises(ConfigError):
        load_run_config(None, overrides=[override])


def test_derived_model_fields_are_explained():
    with pytest.raises(ConfigError, match="derived"):
        apply_values(RunConfig(), {"model.sigma_max": 64.0})


def test_seed_reaches_every_stochastic_section():
    config = load_run_config(SMOKE, seed=7)
    assert config.run.seed == 7
    assert config.phantom.seed == 7
    assert config.dataset.split_seed == 7
    assert config.model.init_seed == 7
    assert config.train.seed == 7
    assert config.sampler.seed == 7


def test_set_wins_over_seed_and_out(tmp_path):
    config = load_run_config(SMOKE, seed=3, out_dir=tmp_path, overrides=["sampler.seed=11"])
    assert config.sampler.seed == 11
    assert config.train.seed == 3
    assert config.out_dir == tmp_path


def test_model_config_follows_method_and_schedule():
    config = load_run_config(SMOKE, overrides=["schedule.sigma_max=64.0"])
    ctm = config.model_config("ctm")
    assert ctm.input_channels == 2 and ctm.conditional
    assert ctm.sigma_max == 64.0
    assert ctm.channels_per_level == [8, 16]
    assert not config.model_config("unet").noise_conditioned


def test_config_hash_tracks_values():
    base = load_run_config(SMOKE)
    assert len(config_hash(base)) == 64
    assert config_hash(base) == config_hash(load_run_config(SMOKE))
    assert config_hash(base) != config_hash(load_run_config(SMOKE, overrides=["sampler.snr=0.3"]))


def test_parsers_reject_malformed_input(tmp_path):
    with pytest.raises(ConfigError):
        parse_dotted("train.max_epochs 3\n")
    with pytest.raises(ConfigError):
        parse_overrides(["train.max_epochs"])
    assert parse_dotted("run.out_dir = runs/x  # bare word\n") == {"run.out_dir": "runs/x"}

    broken = tmp_path / "broken.json"
    broken.write_text("{", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_run_config(broken)
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "missing.cfg")


def test_effective_config_is_written(tmp_path):
    config = load_run_config(SMOKE)
    path = write_effective_config(config, tmp_path / "run")
    assert path.name == EFFECTIVE_CONFIG_NAME
    assert load_run_config(path) == config
