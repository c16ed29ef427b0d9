import json

import pytest

from core.models_loader import unload_models
from ipl_experiment import EXIT_CONFIG_ERROR, EXIT_OK, EXIT_STAGE_FAILURE, main


@pytest.fixture(autouse=True)
def empty_cache():
    unload_models()
    yield
    unload_models()


def _json(capsys):
    return json.loads(capsys.readouterr().out)


def test_ingest(capsys, toy_config):
    assert main(["ingest", "--config", str(toy_config)]) == EXIT_OK
    assert _json(capsys)["n_items"] == 35


def test_train_then_evaluate(capsys, toy_config):
    assert main(["train", "--config", str(toy_config), "--epochs", "2", "--set", "dim=4"]) == EXIT_OK
    trained = _json(capsys)
    assert main(["evaluate", trained["run_dir"]]) == EXIT_OK
    assert _json(capsys)["recall_at_k"] == pytest.approx(trained["metrics"]["recall_at_k"])


def test_bad_ratios_exit_code(toy_config):
    assert main(["train", "--config", str(toy_config), "--set", "split_ratios=0.6,0.1,0.2"]) == EXIT_CONFIG_ERROR


def test_malformed_override_exit_code(toy_config):
    assert main(["train", "--config", str(toy_config), "--set", "epochs"]) == EXIT_CONFIG_ERROR


def test_run_name_with_separators_exit_code(toy_config):
    assert main(["train", "--config", str(toy_config), "--set", "run_name=../elsewhere"]) == EXIT_CONFIG_ERROR


def test_stage_failure_exit_code(tmp_path, toy_config):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    assert main(["train", "--config", str(toy_config), "--dataset", str(empty)]) == EXIT_STAGE_FAILURE


def test_sweep_prints_csv(capsys, toy_config):
    assert main(["sweep", "--config", str(toy_config), "--epochs", "1", "--set", "sweep_grid=0.001"]) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("model,seed,lambda_f,status")
    assert len(lines) == 3


def test_check_proposition_with_grid(capsys, tmp_path, toy_config):
    out = tmp_path / "grid.csv"
    code = main([
        "check-proposition", "--config", str(toy_config),
        "--grid-c", "0.5,0.99", "--grid-k", "5", "--grid-out", str(out),
    ])
    assert code == EXIT_OK
    report = _json(capsys)
    assert report["grid_csv"] == str(out)
    assert len(out.read_text().strip().splitlines()) == 3


def test_estimate_gamma_named_dataset(capsys, toy_config):
    code = main(["estimate-gamma", "--config", str(toy_config), "--set", "gamma=", "--dataset-name", "gowalla"])
    assert code == EXIT_OK
    assert _json(capsys)["value"] == 1.285
