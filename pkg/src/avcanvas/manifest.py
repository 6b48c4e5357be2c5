"""Run manifests: resolved config plus git-style content hashes of inputs."""
from __future__ import annotations

import hashlib
import json
import platform
from pathlib import Path

import numpy as np


def blob_hash(data: bytes) -> str:
    """Hash of ``data`` as git computes it for a blob object."""
    h = hashlib.sha1(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


def tree_hash(paths) -> str:
    """Order-independent hash over files (directories are walked)."""
    entries = []
    for p in paths:
        p = Path(p)
        files = sorted(f for f in p.rglob("*") if f.is_file()) if p.is_dir() else [p]
        for f in files:
            rel = f.relative_to(p).as_posix() if p.is_dir() else f.name
            entries.append(f"{rel} {blob_hash(f.read_bytes())}")
    entries.sort()
    return blob_hash("\n".join(entries).encode())


def config_hash(config: dict) -> str:
    return blob_hash(canonical_json(config).encode())


def canonical_json(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"))


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    return obj


def _relative(p, root: Path) -> str:
    try:
        return Path(p).relative_to(root).as_posix()
    except ValueError:
        return str(p)


def write_manifest(
    out_dir, command: str, config: dict, inputs=(), outputs=(), extra: dict | None = None, name: str = "run_manifest.json"
) -> Path:
    """Write the run manifest; timestamps are deliberately omitted so reruns match."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    existing = [p for p in inputs if Path(p).exists()]
    body = {
        "command": command,
        "config": _plain(config),
        "config_hash": config_hash(config),
        "inputs": [str(p) for p in existing],
        "input_hash": tree_hash(existing) if existing else blob_hash(b""),
        "outputs": sorted(_relative(p, out_dir) for p in outputs),
        "numpy": np.__version__,
        "python": platform.python_version(),
    }
    if extra:
        body.update(_plain(extra))
    path = out_dir / name
    path.write_text(json.dumps(body, indent=1, sort_keys=True) + "\n")
    return path
