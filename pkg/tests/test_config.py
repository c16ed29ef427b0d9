import numpy as np
import pytest

from core.config import (
    ConfigError,
    ExperimentConfig,
    load_experiment_config,
    parse_overrides,
    write_manifest,
)
from core.ml_models import ModelKind


def test_toy_config_loads(toy_config):
    config = load_experiment_config(toy_config)
    assert config.model is ModelKind.MF
    assert config.split_ratios == (0.7, 0.1, 0.2)
    assert config.interaction_format().has_header is True
    assert config.train_config(gamma=1.5).gamma == 1.5


def test_overrides_win(toy_config):
    config = load_experiment_config(toy_config, {"epochs": "2", "lambda_f": 0.01})
    assert config.epochs == 2
    assert config.lambda_f == 0.01


def test_ratios_must_sum_to_one():
    with pytest.raises(ConfigError, match="sum to 1"):
        load_experiment_config(None, {"split_ratios": "0.7,0.1,0.1"})


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError):
        load_experiment_config(None, {"epoch": "3"})


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_experiment_config(tmp_path / "missing.env")


def test_parse_overrides():
    assert parse_overrides(["k=10", " dim = 4 "]) == {"k": "10", "dim": "4"}
    with pytest.raises(ConfigError):
        parse_overrides(["k10"])


def test_format_preset_with_column_override():
    config = load_experiment_config(None, {"format": "movielens-1m", "rating_threshold": "4"})
    fmt = config.interaction_format()
    assert fmt.delimiter == "::"
    assert fmt.rating_column == 2
    assert fmt.rating_threshold == 4.0
    with pytest.raises(ConfigError):
        load_experiment_config(None, {"format": "netflix"})


def test_default_sweep_grid():
    values = ExperimentConfig().sweep_values()
    assert len(values) == 20
    assert values[0] == pytest.approx(1e-6)
    assert values[-1] == pytest.approx(1e-2)
    ratios = np.array(values[1:]) / np.array(values[:-1])
    np.testing.assert_allclose(ratios, ratios[0])


def test_explicit_sweep_grid():
    assert load_experiment_config(None, {"sweep_grid": "0.001,0.1"}).sweep_values() == [0.001, 0.1]
    assert ExperimentConfig(sweep_points=1).sweep_values() == [1e-6]
    with pytest.raises(ConfigError):
        load_experiment_config(None, {"sweep_grid": "-1"})


def test_output_dir_defaults_to_environment(tmp_path):
    assert ExperimentConfig().output_dir == str(tmp_path / "runs")


def test_digest_ignores_output_location():
    a = ExperimentConfig(output_dir="a", run_name="x")
    b = ExperimentConfig(output_dir="b")
    assert a.digest() == b.digest()
    assert ExperimentConfig(seed=1).digest() != b.digest()
    assert b.run_id() == f"mf-lf0-s0-{b.digest()}"
    assert a.run_id() == "x"


def test_manifest_reloads_to_the_same_config(tmp_path):
    config = load_experiment_config(None, {
        "dataset_path": "data/some file.tsv",
        "delimiter": "\t",
        "lambda_f": "0.001",
        "gamma": "1.285",
        "sweep_grid": "0.1,0.2",
        "model": "lightgcn",
    })
    path = write_manifest(config, tmp_path / "manifest.txt", extra={"gamma_method": "config-supplied"})
    assert "# gamma_method=config-supplied" in path.read_text()
    reloaded = load_experiment_config(path)
    assert reloaded == config
    assert reloaded.delimiter == "\t"


def test_empty_override_clears_file_value(toy_config):
    assert load_experiment_config(toy_config, {"gamma": ""}).gamma is None


@pytest.mark.parametrize("name", ["../outside", "a/b", "..", ".", "a\\b", "/abs"])
def test_run_name_must_be_one_directory(name):
    with pytest.raises(ConfigError, match="run_name"):
        load_experiment_config(None, {"run_name": name})


def test_run_dir_stays_under_output_dir(tmp_path):
    config = load_experiment_config(None, {"output_dir": str(tmp_path), "run_name": "baseline"})
    assert config.run_dir() == (tmp_path / "baseline").resolve()
    default = load_experiment_config(None, {"output_dir": str(tmp_path)})
    assert default.run_dir().parent == tmp_path.resolve()


def test_run_dir_rejects_symlinked_escape(tmp_path):
    outside = tmp_path / "outside"
    outside.mkdir()
    root = tmp_path / "runs"
    root.mkdir()
    (root / "linked").symlink_to(outside, target_is_directory=True)
    config = load_experiment_config(None, {"output_dir": str(root), "run_name": "linked"})
    with pytest.raises(ConfigError, match="escapes output_dir"):
        config.run_dir()
