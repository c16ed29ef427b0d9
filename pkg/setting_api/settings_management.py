import json
import logging
import os
from typing import Any, Dict

logger = logging.getLogger(__name__)

# Path to the settings file, overridable for tests and multi-tenant hosts
SETTINGS_FILE_PATH = os.getenv("IPL_SETTINGS_FILE", "application_settings.json")

# Values used when a key has never been written
DEFAULT_SETTINGS: Dict[str, Any] = {
    "device": "auto",
    "model_retention_strategy": "keep",
    "torch_num_threads": 0,
}

# Allowed values per key; keys missing here accept any JSON value
ALLOWED_VALUES: Dict[str, tuple] = {
    "device": ("auto", "cpu", "cuda", "xpu"),
    "model_retention_strategy": ("keep", "reload"),
}


def _settings_path() -> str:
    return os.getenv("IPL_SETTINGS_FILE", SETTINGS_FILE_PATH)


def _read() -> Dict[str, Any]:
    create_preference_file_if_not_exists()
    with open(_settings_path(), "r") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            logger.error(f"Settings file '{_settings_path()}' is not valid JSON: {e}")
            return {}


def _write(settings: Dict[str, Any]) -> None:
    with open(_settings_path(), "w") as f:
        json.dump(settings, f, indent=4)


def create_preference_file_if_not_exists() -> bool:
    """Create the settings file if it doesn't exist"""
    if not is_preference_file_exists():
        with open(_settings_path(), "w") as f:
            json.dump({}, f)
        return True
    return False


def is_preference_file_exists() -> bool:
    """Check if the settings file exists"""
    return os.path.exists(_settings_path())


def validate_setting(key: str, value: Any) -> None:
    """Raise ValueError when a value is not accepted for a known key."""
    allowed = ALLOWED_VALUES.get(key)
    if allowed is not None and value not in allowed:
        raise ValueError(f"Invalid value for {key}. Must be one of {list(allowed)}.")
    if key == "torch_num_threads" and (not isinstance(value, int) or isinstance(value, bool) or value < 0):
        raise ValueError("Invalid value for torch_num_threads. Must be a non-negative integer.")


def get_setting(key: str) -> Any:
    """Get a setting by key, falling back to the built-in default"""
    settings = _read()
    if key in settings:
        return settings[key]
    return DEFAULT_SETTINGS.get(key)


def add_or_update_setting(key: str, value: Any) -> bool:
    """Add a new setting or update existing one"""
    validate_setting(key, value)
    settings = _read()
    settings[key] = value
    _write(settings)
    logger.info(f"Setting '{key}' set to {value!r}")
    return True


def get_all_settings() -> Dict[str, Any]:
    """Get all settings, defaults included"""
    merged = dict(DEFAULT_SETTINGS)
    merged.update(_read())
    return merged
