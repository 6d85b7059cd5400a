"""Named-array container: one .npz holding arrays plus a JSON manifest.

Every persistent artifact (model checkpoints, BN reference sets, attack
models, latents) uses this format so files stay inspectable with plain
numpy. The manifest travels inside the archive under a reserved key.
"""

import hashlib
import json
import os
from typing import Any, Dict, Mapping, Tuple

import numpy as np

MANIFEST_KEY = "__manifest__"


def canonical_json(obj: Any) -> str:
    """Deterministic JSON encoding (sorted keys, no whitespace drift)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def array_fingerprint(arrays: Mapping[str, np.ndarray]) -> str:
    """sha256 over names, dtypes, shapes and raw bytes, order-independent."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save_named_arrays(path: str, arrays: Mapping[str, np.ndarray], manifest: Mapping[str, Any]) -> str:
    """Write arrays + manifest to ``path`` and return the array fingerprint.

    The fingerprint is also recorded in the manifest under
    ``array_fingerprint`` so a loaded file can be integrity-checked.
    """
    if MANIFEST_KEY in arrays:
        raise ValueError(f"array name {MANIFEST_KEY!r} is reserved")
    manifest = dict(manifest)
    fingerprint = array_fingerprint(arrays)
    manifest["array_fingerprint"] = fingerprint
    payload = {name: np.ascontiguousarray(arr) for name, arr in arrays.items()}
    payload[MANIFEST_KEY] = np.frombuffer(canonical_json(manifest).encode(), dtype=np.uint8)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, **payload)
    return fingerprint


def load_named_arrays(path: str) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """Load a container, returning (arrays, manifest)."""
    with np.load(path) as data:
        arrays = {name: data[name] for name in data.files if name != MANIFEST_KEY}
        if MANIFEST_KEY not in data.files:
            raise ValueError(f"{path}: not a named-array container (missing manifest)")
        manifest = json.loads(bytes(data[MANIFEST_KEY].tobytes()).decode())
    expected = manifest.get("array_fingerprint")
    if expected is not None and array_fingerprint(arrays) != expected:
        raise ValueError(f"{path}: array fingerprint mismatch, file is corrupt")
    return arrays, manifest


def write_json(path: str, obj: Mapping[str, Any]) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path: str) -> Dict[str, Any]:
    with open(path) as f:
        return json.load(f)
