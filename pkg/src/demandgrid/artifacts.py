"""Reproducible artifact files: deterministic npz containers, content hashes, manifests."""

from __future__ import annotations

import hashlib
import io
import json
import time
import zipfile
from importlib import metadata
from pathlib import Path

import numpy as np

_EPOCH = (1980, 1, 1, 0, 0, 0)


def write_npz(path: str | Path, arrays: dict[str, np.ndarray], compress: bool = False) -> None:
    """Like ``np.savez`` but byte-identical for identical inputs (fixed zip timestamps, sorted keys)."""
    mode = zipfile.ZIP_DEFLATED if compress else zipfile.ZIP_STORED
    with zipfile.ZipFile(path, "w", mode) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asanyarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_EPOCH)
            info.compress_type = mode
            zf.writestr(info, buf.getvalue())


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def package_version() -> str:
    try:
        return metadata.version("demandgrid")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def write_manifest(
    path: str | Path,
    stage: str,
    inputs: dict[str, str | Path],
    outputs: dict[str, str | Path],
    seed: int,
    config: dict,
) -> dict:
    """JSON manifest: stage, seed, version, config and sha256 of every input and output file."""
    man = {
        "stage": stage,
        "seed": seed,
        "version": package_version(),
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "config": config,
        "inputs": {k: {"path": str(p), "sha256": sha256_file(p)} for k, p in sorted(inputs.items())},
        "outputs": {k: {"path": str(p), "sha256": sha256_file(p)} for k, p in sorted(outputs.items())},
    }
    Path(path).write_text(json.dumps(man, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return man


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON serialisable: {type(x).__name__}")
