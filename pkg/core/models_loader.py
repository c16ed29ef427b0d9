import json
import logging
import os
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import torch

from core.dataset import InteractionLog
from core.ml_models import ModelKind, PreferenceModel, build_normalized_adjacency
from setting_api.settings_management import get_setting

# Configure logger
logger = logging.getLogger(__name__)

CHECKPOINT_FORMATS = ("json", "bin")

# Cached checkpoint, keyed by its resolved path
_model = None
_model_path = None


def get_device() -> str:
    """Return the configured device, or detect the best available one when set to 'auto'."""
    configured = get_setting("device") or "auto"
    if configured != "auto":
        logger.info(f"Using configured device '{configured}'")
        return configured
    if torch.cuda.is_available():
        device = "cuda"
        logger.info("Using CUDA device")
    elif hasattr(torch, "xpu") and torch.xpu.is_available():
        device = "xpu"
        logger.info("Using XPU device")
    else:
        device = "cpu"
        logger.info("Using CPU device")
    return device


def apply_thread_setting() -> None:
    """Pin torch intra-op threads when 'torch_num_threads' is non-zero."""
    threads = get_setting("torch_num_threads") or 0
    if threads > 0:
        torch.set_num_threads(threads)
        logger.info(f"torch intra-op threads set to {threads}")


def checkpoint_header(model: PreferenceModel, seed: int) -> Dict[str, Any]:
    return {
        "kind": model.kind.value,
        "n_users": model.n_users,
        "n_items": model.n_items,
        "dim": model.dim,
        "n_layers": model.n_layers,
        "seed": seed,
        "dtype": str(model.dtype).replace("torch.", ""),
    }


def _format_for(path: Path, checkpoint_format: Optional[str]) -> str:
    fmt = checkpoint_format or ("bin" if path.suffix == ".bin" else "json")
    if fmt not in CHECKPOINT_FORMATS:
        raise ValueError(f"Unknown checkpoint format '{fmt}'. Must be one of {list(CHECKPOINT_FORMATS)}.")
    return fmt


# Write header then row-major user and item tables
def save_checkpoint(
    model: PreferenceModel,
    path: Union[str, os.PathLike],
    seed: int,
    checkpoint_format: Optional[str] = None,
) -> Path:
    """
    Serialize a model as JSON ({"header": ..., "user_emb": [[...]], "item_emb": [[...]]})
    or as a flat binary container: 4-byte little-endian header length, UTF-8 JSON
    header, then float64 user table and item table, row-major.
    """
    path = Path(path)
    fmt = _format_for(path, checkpoint_format)
    header = checkpoint_header(model, seed)
    with torch.no_grad():
        users = model.user_emb.weight.detach().cpu().double().numpy()
        items = model.item_emb.weight.detach().cpu().double().numpy()

    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        payload = {"header": header, "user_emb": users.tolist(), "item_emb": items.tolist()}
        with open(path, "w") as f:
            json.dump(payload, f)
    else:
        encoded = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as f:
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(np.ascontiguousarray(users, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(items, dtype="<f8").tobytes())
    logger.info(f"Checkpoint written to '{path}' ({fmt})")
    return path


def _read_checkpoint(path: Path):
    if path.suffix == ".bin":
        with open(path, "rb") as f:
            (length,) = struct.unpack("<I", f.read(4))
            header = json.loads(f.read(length).decode("utf-8"))
            body = np.frombuffer(f.read(), dtype="<f8")
        n_users, n_items, dim = header["n_users"], header["n_items"], header["dim"]
        expected = (n_users + n_items) * dim
        if body.size != expected:
            raise ValueError(f"Checkpoint body has {body.size} values, expected {expected}")
        users = body[: n_users * dim].reshape(n_users, dim)
        items = body[n_users * dim:].reshape(n_items, dim)
    else:
        with open(path, "r") as f:
            payload = json.load(f)
        header = payload["header"]
        users = np.asarray(payload["user_emb"], dtype=np.float64).reshape(header["n_users"], header["dim"])
        items = np.asarray(payload["item_emb"], dtype=np.float64).reshape(header["n_items"], header["dim"])
    return header, users, items


def load_checkpoint(
    path: Union[str, os.PathLike],
    train: Optional[InteractionLog] = None,
    device: Optional[Union[str, torch.device]] = None,
) -> PreferenceModel:
    """Rebuild a model from a checkpoint on `device` (the configured one by default); LightGCN needs the training split."""
    path = Path(path)
    try:
        header, users, items = _read_checkpoint(path)
    except (OSError, KeyError, ValueError, struct.error) as e:
        logger.error(f"Failed to read checkpoint '{path}': {e}")
        raise RuntimeError(f"Could not load checkpoint '{path}'.") from e

    if not (np.all(np.isfinite(users)) and np.all(np.isfinite(items))):
        raise RuntimeError(f"Checkpoint '{path}' contains non-finite embeddings")

    kind = ModelKind(header["kind"])
    dtype = getattr(torch, header.get("dtype", "float32"))
    graph = None
    if kind is ModelKind.LIGHTGCN:
        if train is None:
            raise ValueError("Loading a LightGCN checkpoint requires the training split")
        if train.n_users != header["n_users"] or train.n_items != header["n_items"]:
            raise ValueError("Training split shape does not match the checkpoint header")
        graph = build_normalized_adjacency(train, dtype=dtype)

    model = PreferenceModel(
        kind, header["n_users"], header["n_items"], header["dim"],
        n_layers=header["n_layers"], graph=graph, dtype=dtype,
    )
    with torch.no_grad():
        model.user_emb.weight.copy_(torch.from_numpy(users).to(dtype))
        model.item_emb.weight.copy_(torch.from_numpy(items).to(dtype))
    model = model.to(device or get_device())
    model.eval()
    return model


def is_model_retention_reload() -> bool:
    """Check if the checkpoint retention strategy is set to 'reload'."""
    return get_setting("model_retention_strategy") == "reload"


# Used by evaluation surfaces that score the same checkpoint repeatedly
def get_or_load_model(path: Union[str, os.PathLike], train: Optional[InteractionLog] = None) -> PreferenceModel:
    """
    Load a checkpoint unless the same one is already cached. With the 'reload'
    retention strategy the model is returned but never kept in memory.
    """
    global _model, _model_path
    resolved = str(Path(path).resolve())

    if _model is not None and _model_path == resolved:
        logger.info(f"Checkpoint '{resolved}' is already loaded. Returning existing instance.")
        return _model

    if _model is not None and _model_path != resolved:
        logger.info(f"Switching checkpoint from '{_model_path}' to '{resolved}'.")
        _model = None
        _model_path = None

    model = load_checkpoint(resolved, train=train)
    if is_model_retention_reload():
        logger.info(f"Checkpoint '{resolved}' loaded with 'reload' retention strategy; it will not be cached.")
        return model

    _model = model
    _model_path = resolved
    logger.info(f"Checkpoint '{resolved}' loaded and cached.")
    return _model


def is_model_cached(path: Union[str, os.PathLike]) -> bool:
    return _model is not None and _model_path == str(Path(path).resolve())


def unload_models() -> None:
    """Drop the cached checkpoint."""
    global _model, _model_path
    if _model is not None:
        logger.info(f"Unloading checkpoint '{_model_path}' from memory.")
    _model = None
    _model_path = None
