"""Run manifests: content digests for every stage output, timing kept apart.

manifest.json must be byte-stable when a deterministic stage re-runs with the
same config and seed, so it carries only reproducible facts (config hash,
seed, sha256 of each output, library versions). Wall-clock lives in a sibling
timing.json that is free to differ between runs.
"""

from __future__ import annotations

import hashlib
import json
import platform
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import PipelineConfig, config_hash

MANIFEST_FORMAT = "fodapg.manifest/1"


def file_digest(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _key_for(path: Path, out_dir: Path) -> str:
    try:
        return path.relative_to(out_dir).as_posix()
    except ValueError:
        return path.as_posix()


def write_manifest(out_dir, command: str, cfg: PipelineConfig, outputs,
                   started: float) -> Path:
    """Write manifest.json + timing.json; returns the manifest path."""
    out_dir = Path(out_dir)
    entries = {_key_for(Path(p), out_dir): file_digest(p) for p in outputs}
    payload = {
        "format": MANIFEST_FORMAT,
        "command": command,
        "config_sha256": config_hash(cfg),
        "seed": cfg.seed,
        "outputs": dict(sorted(entries.items())),
        "versions": {
            "fodapg": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }
    path = out_dir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out_dir / "timing.json", "w") as fh:
        json.dump({"command": command,
                   "wall_clock_s": round(time.time() - started, 3)},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def read_manifest(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
