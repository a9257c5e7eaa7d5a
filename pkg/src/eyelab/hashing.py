"""Content digests for configs, manifests, and weight sets.

Digests are SHA-256 over canonical byte encodings, so equality of digest
means equality of content. They key feature caches, prove encoder
freezing, and pin the shared-decoder contract.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any, Mapping

import numpy as np

__all__ = ["sha256_hex", "canonical_json", "digest_json", "digest_arrays"]


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def canonical_json(obj: Any) -> str:
    """Deterministic JSON text: sorted keys, minimal separators."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def digest_json(obj: Any) -> str:
    return sha256_hex(canonical_json(obj).encode("utf-8"))


def digest_arrays(arrays: Mapping[str, np.ndarray], extra: Any = None) -> str:
    """Digest a named-array set (weights); sensitive to names, shapes, dtypes, bytes."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode("ascii"))
        h.update(str(arr.dtype).encode("ascii"))
        h.update(arr.tobytes())
    if extra is not None:
        h.update(canonical_json(extra).encode("utf-8"))
    return h.hexdigest()
