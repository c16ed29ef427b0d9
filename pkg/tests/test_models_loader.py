import struct

import numpy as np
import pytest
import torch

import core.models_loader as models_loader
from core.ml_models import init_model
from core.models_loader import get_device, get_or_load_model, load_checkpoint, save_checkpoint, unload_models
from setting_api.settings_management import add_or_update_setting, get_all_settings, get_setting
from tests.conftest import make_log


@pytest.fixture(autouse=True)
def empty_cache():
    unload_models()
    yield
    unload_models()


@pytest.mark.parametrize("suffix", ["json", "bin"])
def test_checkpoint_round_trip(tmp_path, suffix):
    model = init_model("mf", 5, 4, 3, seed=7, dtype=torch.float64)
    path = save_checkpoint(model, tmp_path / f"model.{suffix}", seed=7)
    restored = load_checkpoint(path)
    assert torch.equal(restored.user_emb.weight, model.user_emb.weight)
    assert torch.equal(restored.item_emb.weight, model.item_emb.weight)
    assert restored.kind == model.kind
    assert not restored.training


def test_bin_checkpoint_layout(tmp_path):
    model = init_model("mf", 2, 3, 2, seed=1)
    path = save_checkpoint(model, tmp_path / "model.bin", seed=1)
    raw = path.read_bytes()
    (length,) = struct.unpack("<I", raw[:4])
    body = np.frombuffer(raw[4 + length:], dtype="<f8")
    assert body.size == (2 + 3) * 2
    np.testing.assert_allclose(body[:4].reshape(2, 2), model.user_emb.weight.detach().double().numpy())


def test_lightgcn_checkpoint_needs_train(tmp_path):
    train = make_log(3, 3, [(0, 0), (1, 1), (2, 2), (0, 1)])
    model = init_model("lightgcn", 3, 3, 2, n_layers=2, train=train)
    path = save_checkpoint(model, tmp_path / "gcn.json", seed=0)
    with pytest.raises(ValueError):
        load_checkpoint(path)
    restored = load_checkpoint(path, train=train)
    np.testing.assert_allclose(restored.score_users(range(3)), model.score_users(range(3)), rtol=1e-6)


def test_corrupt_checkpoint(tmp_path):
    path = tmp_path / "model.bin"
    path.write_bytes(b"\x01")
    with pytest.raises(RuntimeError):
        load_checkpoint(path)


def test_cache_keeps_model(tmp_path):
    path = save_checkpoint(init_model("mf", 2, 2, 2), tmp_path / "model.json", seed=0)
    first = get_or_load_model(path)
    assert get_or_load_model(path) is first
    unload_models()
    assert models_loader._model is None


def test_cache_reload_strategy(tmp_path):
    add_or_update_setting("model_retention_strategy", "reload")
    path = save_checkpoint(init_model("mf", 2, 2, 2), tmp_path / "model.json", seed=0)
    first = get_or_load_model(path)
    assert get_or_load_model(path) is not first
    assert models_loader._model is None


def test_settings_defaults_and_validation():
    assert get_setting("model_retention_strategy") == "keep"
    assert get_all_settings()["torch_num_threads"] == 0
    with pytest.raises(ValueError):
        add_or_update_setting("device", "tpu")
    with pytest.raises(ValueError):
        add_or_update_setting("torch_num_threads", -1)


def test_configured_device():
    add_or_update_setting("device", "cpu")
    assert get_device() == "cpu"


def test_checkpoint_loads_on_configured_device(tmp_path, monkeypatch):
    model = init_model("mf", 3, 4, 2, seed=2)
    path = save_checkpoint(model, tmp_path / "model.json", seed=2)
    monkeypatch.setattr(models_loader, "get_device", lambda: "meta")
    assert load_checkpoint(path).device.type == "meta"
    assert load_checkpoint(path, device="cpu").device.type == "cpu"
