"""Binary tensor files (``.tnsr``) and on-disk weight stores.

Layout: the 4 magic bytes ``TNSR``, a little-endian u32 ``ndim``, ``ndim``
little-endian u32 extents, then the float32 payload in row-major order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TNSR"


def encode_tensor(array: np.ndarray) -> bytes:
    arr = np.asarray(array, dtype="<f4", order="C")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_tensor(data: bytes) -> np.ndarray:
    if len(data) < 8 or data[:4] != MAGIC:
        raise ValueError("not a TNSR tensor (bad magic)")
    (ndim,) = struct.unpack_from("<I", data, 4)
    offset = 8 + 4 * ndim
    if len(data) < offset:
        raise ValueError("truncated TNSR header")
    dims = struct.unpack_from(f"<{ndim}I", data, 8)
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    if len(data) != offset + 4 * count:
        raise ValueError(f"TNSR payload has {len(data) - offset} bytes, expected {4 * count}")
    arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
    return arr.reshape(dims).astype(np.float32)


def write_tensor(path: str | Path, array: np.ndarray) -> str:
    """Write ``array`` and return the sha256 of the bytes written."""
    blob = encode_tensor(array)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def read_tensor(path: str | Path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


MANIFEST = "manifest.json"


def save_weight_dir(directory: str | Path, weights: dict[str, np.ndarray],
                    biases: dict[str, np.ndarray]) -> list[Path]:
    """Write ``{node}.w.tnsr`` / ``{node}.b.tnsr`` files plus a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    entries = []
    for node_id in sorted(weights):
        entry = {"node": node_id, "weight": f"{node_id}.w.tnsr",
                 "shape": list(weights[node_id].shape)}
        write_tensor(directory / entry["weight"], weights[node_id])
        written.append(directory / entry["weight"])
        if node_id in biases:
            entry["bias"] = f"{node_id}.b.tnsr"
            write_tensor(directory / entry["bias"], biases[node_id])
            written.append(directory / entry["bias"])
        entries.append(entry)
    (directory / MANIFEST).write_text(json.dumps({"format": "TNSR", "tensors": entries}, indent=2))
    written.append(directory / MANIFEST)
    return written


def load_weight_dir(directory: str | Path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST).read_text())
    weights, biases = {}, {}
    for entry in manifest["tensors"]:
        weights[entry["node"]] = read_tensor(directory / entry["weight"])
        if "bias" in entry:
            biases[entry["node"]] = read_tensor(directory / entry["bias"])
    return weights, biases
