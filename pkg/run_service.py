#!/usr/bin/env python3
"""
Quick start script for running the IPL debiasing service.
"""

import importlib
import os
import secrets
import subprocess
import sys
from pathlib import Path

REQUIRED_MODULES = ("fastapi", "uvicorn", "torch", "numpy", "scipy", "pandas", "sklearn", "dotenv")

ROUTES = (
    "POST /v1/datasets/inspect",
    "POST /v1/experiments/run",
    "POST /v1/experiments/sweep",
    "POST /v1/theory/bound",
    "POST /v1/theory/check-proposition",
    "GET  /v1/runs/{run_id}/metrics",
    "POST /v1/runs/{run_id}/evaluate",
    "GET  /downloads/{run_id}/{filename}",
    "GET  /admin/settings (X-API-KEY: ADMIN_API_KEY)",
)


def missing_modules():
    missing = []
    for name in REQUIRED_MODULES:
        try:
            importlib.import_module(name)
        except ImportError:
            missing.append(name)
    return missing


def main():
    print("IPL Debiasing Service")
    print("=" * 30)

    missing = missing_modules()
    if missing:
        print(f"✗ Missing dependencies: {', '.join(missing)}")
        print("Please run: pip install -r requirements.txt")
        return 1
    print("✓ All required dependencies are installed")

    output_root = Path(os.environ.setdefault("IPL_OUTPUT_ROOT", "runs"))
    output_root.mkdir(parents=True, exist_ok=True)
    print(f"✓ Runs are written under {output_root.resolve()}")

    if not os.getenv("ADMIN_API_KEY"):
        os.environ["ADMIN_API_KEY"] = secrets.token_urlsafe(32)
        print("✓ Generated temporary ADMIN_API_KEY for the settings endpoints:")
        print(f"  {os.environ['ADMIN_API_KEY']}")
        print("  Set ADMIN_API_KEY yourself to keep it stable across restarts.")

    host = os.getenv("HOST", "127.0.0.1")
    port = os.getenv("PORT", "8000")
    print(f"\nStarting service on http://{host}:{port}")
    for route in ROUTES:
        print(f"  - {route}")

    try:
        subprocess.run([sys.executable, "main.py"], check=True)
    except subprocess.CalledProcessError as e:
        print(f"Service exited with status {e.returncode}")
        return 1
    except KeyboardInterrupt:
        print("\nService stopped by user")
    return 0


if __name__ == "__main__":
    sys.exit(main())
