"""Single-file checkpoint container: one ``.npz`` holding JSON metadata
plus named float64 weight arrays.

Layout: key ``__meta__`` is the UTF-8 JSON metadata as a uint8 array;
every weight is stored under its name prefixed with ``w::``. Metadata
always carries ``format_version``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DataError, MissingFile

__all__ = ["FORMAT_VERSION", "save_container", "load_container"]

FORMAT_VERSION = 1

_META_KEY = "__meta__"
_WEIGHT_PREFIX = "w::"


def save_container(path: str | Path, meta: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(meta)
    meta.setdefault("format_version", FORMAT_VERSION)
    payload = {_META_KEY: np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)}
    for name, arr in arrays.items():
        if name.startswith(_WEIGHT_PREFIX):
            raise DataError(f"array name {name!r} already carries the weight prefix")
        payload[_WEIGHT_PREFIX + name] = np.asarray(arr, dtype=np.float64)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def load_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"checkpoint not found: {path}")
    try:
        with np.load(path) as data:
            if _META_KEY not in data:
                raise DataError(f"{path} is not a weight container (no metadata entry)")
            meta = json.loads(bytes(data[_META_KEY].tobytes()).decode("utf-8"))
            arrays = {
                k[len(_WEIGHT_PREFIX):]: np.array(data[k], dtype=np.float64)
                for k in data.files if k.startswith(_WEIGHT_PREFIX)
            }
    except (OSError, ValueError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from None
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported container format_version {version!r}")
    return meta, arrays
