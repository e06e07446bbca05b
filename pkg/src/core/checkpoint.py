"""
Gradus QR v1.0 - Checkpoint Container
Plain-text header + JSON index + raw little-endian float64 arrays
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple

import numpy as np

from src.core.exceptions import IntegrityError

logger = logging.getLogger(__name__)

MAGIC = "GRADUS-CKPT"
FORMAT_VERSION = 1
ARRAY_DTYPE = "<f8"


def fingerprint_arrays(arrays: Mapping[str, np.ndarray]) -> str:
    """sha256 over names, shapes and float64 bytes in name order"""
    digest = hashlib.sha256()
    for name in sorted(arrays):
        values = np.ascontiguousarray(arrays[name], dtype=ARRAY_DTYPE)
        digest.update(name.encode("utf-8"))
        digest.update(json.dumps(list(values.shape)).encode("utf-8"))
        digest.update(values.tobytes())
    return digest.hexdigest()


def write_container(path, kind: str, arrays: Mapping[str, np.ndarray], meta: Dict[str, Any] = None) -> str:
    """
    Write a checkpoint file

    Args:
        path: Destination file
        kind: Container kind tag (``base``, ``adapters``, ``classifier``)
        arrays: Named parameter arrays
        meta: JSON-serializable header fields

    Returns:
        Fingerprint of the stored arrays
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    index = []
    offset = 0
    blobs = []
    for name in sorted(arrays):
        blob = np.ascontiguousarray(arrays[name], dtype=ARRAY_DTYPE).tobytes()
        index.append({"name": name, "shape": list(np.shape(arrays[name])), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)

    fingerprint = fingerprint_arrays(arrays)
    header = {
        "kind": kind,
        "format_version": FORMAT_VERSION,
        "fingerprint": fingerprint,
        "meta": meta or {},
        "arrays": index,
    }
    with open(path, 'wb') as f:
        f.write(f"{MAGIC} {FORMAT_VERSION} {kind}\n".encode("utf-8"))
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for blob in blobs:
            f.write(blob)
    logger.debug(f"Wrote {kind} checkpoint {path} ({len(index)} arrays)")
    return fingerprint


def read_container(path, expected_kind: str = None) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Read a checkpoint and verify its stored fingerprint"""
    path = Path(path)
    with open(path, 'rb') as f:
        first = f.readline().decode("utf-8").split()
        if len(first) != 3 or first[0] != MAGIC:
            raise IntegrityError(f"{path} is not a checkpoint file", path=str(path))
        if int(first[1]) != FORMAT_VERSION:
            raise IntegrityError(f"unsupported checkpoint version {first[1]}", path=str(path))
        header = json.loads(f.readline().decode("utf-8"))
        payload = f.read()

    if expected_kind is not None and header["kind"] != expected_kind:
        raise IntegrityError(f"expected a '{expected_kind}' checkpoint, got '{header['kind']}'", path=str(path))

    arrays: Dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        chunk = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise IntegrityError(f"array '{entry['name']}' is truncated", path=str(path))
        arrays[entry["name"]] = np.frombuffer(chunk, dtype=ARRAY_DTYPE).reshape(entry["shape"]).copy()

    if fingerprint_arrays(arrays) != header["fingerprint"]:
        raise IntegrityError(f"fingerprint mismatch in {path}", path=str(path))
    return header, arrays
