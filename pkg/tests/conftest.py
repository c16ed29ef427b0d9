from pathlib import Path

import numpy as np
import pytest

from core.dataset import IdMaps, InteractionLog, stratified_split

REPO_ROOT = Path(__file__).resolve().parent.parent
TOY_DATASET = REPO_ROOT / "data" / "toy_interactions.csv"
TOY_CONFIG = REPO_ROOT / "data" / "toy_experiment.env"


def make_log(n_users, n_items, pairs):
    """Log over u0.. / i0.. tokens from (user, item) index pairs."""
    id_maps = IdMaps(
        tuple(f"u{u}" for u in range(n_users)),
        tuple(f"i{i}" for i in range(n_items)),
    )
    users = [u for u, _ in pairs]
    items = [i for _, i in pairs]
    return InteractionLog.from_pairs(users, items, id_maps)


def random_log(n_users, n_items, density, seed):
    rng = np.random.default_rng(seed)
    mask = rng.random((n_users, n_items)) < density
    # every user keeps at least one positive and one negative
    for u in range(n_users):
        mask[u, rng.integers(n_items)] = True
        if mask[u].all():
            mask[u, rng.integers(n_items)] = False
    users, items = np.nonzero(mask)
    return make_log(n_users, n_items, list(zip(users.tolist(), items.tolist())))


@pytest.fixture
def toy_dataset():
    return TOY_DATASET


@pytest.fixture
def toy_config():
    return TOY_CONFIG


@pytest.fixture
def small_log():
    return random_log(12, 9, 0.35, seed=3)


@pytest.fixture
def small_split(small_log):
    return stratified_split(small_log, (0.7, 0.1, 0.2), seed=0)


@pytest.fixture(autouse=True)
def isolated_runtime(tmp_path, monkeypatch):
    """Keep run outputs and the settings file out of the working tree."""
    monkeypatch.setenv("IPL_OUTPUT_ROOT", str(tmp_path / "runs"))
    monkeypatch.setenv("IPL_SETTINGS_FILE", str(tmp_path / "application_settings.json"))
    monkeypatch.delenv("IPL_DATA_ROOT", raising=False)
    monkeypatch.chdir(REPO_ROOT)
    yield
