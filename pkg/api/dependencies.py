import os
from pathlib import Path
from typing import Optional

from fastapi import Header, HTTPException, status

from core.config import default_output_root


def get_admin_key() -> Optional[str]:
    return os.getenv("ADMIN_API_KEY")


def validate_admin_key(x_api_key: Optional[str] = Header(None, alias="X-API-KEY")) -> str:
    """Validate admin API key from X-API-KEY header."""
    admin_key = get_admin_key()
    if not admin_key:
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail="Admin key not configured"
        )

    if not x_api_key or x_api_key != admin_key:
        raise HTTPException(
            status_code=status.HTTP_401_UNAUTHORIZED,
            detail="Invalid admin API key"
        )

    return x_api_key


def output_root() -> Path:
    return Path(default_output_root()).resolve()


# Resolve a run artifact, refusing anything that escapes the output root
def resolve_run_file(run_id: str, filename: str) -> Path:
    """Return the artifact path for a run, 404 when missing, 400 on path traversal."""
    root = output_root()
    candidate = (root / run_id / filename).resolve()
    try:
        # Check that the common path of the output root and the requested file is the root itself
        if os.path.commonpath([str(root), str(candidate)]) != str(root) or candidate == root:
            raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail="Invalid file path")
    except ValueError:
        # Paths on different drives
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail="Invalid file path")
    if not candidate.is_file():
        raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail="File not found")
    return candidate


def data_root() -> Path:
    return Path(os.getenv("IPL_DATA_ROOT", "data")).resolve()


def resolve_dataset_path(dataset_path: str) -> Path:
    """Dataset paths from API callers must stay under IPL_DATA_ROOT; 400 otherwise."""
    root = data_root()
    candidate = Path(dataset_path).resolve()
    try:
        inside = os.path.commonpath([str(root), str(candidate)]) == str(root)
    except ValueError:
        inside = False
    if not inside or candidate == root:
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST,
            detail=f"dataset_path must point inside the data root '{root}'",
        )
    return candidate
