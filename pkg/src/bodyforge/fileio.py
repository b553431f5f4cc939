"""On-disk formats: raw little-endian float32 arrays, JSON manifests,
checkpoints as named weight arrays + JSON metadata, and stable checksums.

Everything here is byte-deterministic: manifests are written with sorted
keys, arrays in fixed dtype/order, and checkpoints carry no timestamps.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

_MAGIC = b"BFW1"


def write_raw(path: str | Path, arr: np.ndarray, dtype: str = "<f4") -> None:
    Path(path).write_bytes(np.ascontiguousarray(arr).astype(dtype).tobytes())


def read_raw(path: str | Path, shape, dtype: str = "<f4") -> np.ndarray:
    data = np.frombuffer(Path(path).read_bytes(), dtype=dtype)
    return data.reshape(shape).copy()


def write_manifest(path: str | Path, data: dict) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    """Single-file container: JSON header (name -> dtype/shape/offset) + payload.

    Used for checkpoints; unlike ``np.savez`` the bytes carry no mtimes, so
    two identical runs produce identical files.
    """
    header = {}
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        dtype = arr.dtype.newbyteorder("<").str
        raw = arr.astype(dtype).tobytes()
        header[name] = {"dtype": dtype, "shape": list(arr.shape), "offset": len(payload), "nbytes": len(raw)}
        payload += raw
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(len(head).to_bytes(8, "little"))
        f.write(head)
        f.write(bytes(payload))


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path} is not a weight-array file")
    hlen = int.from_bytes(blob[4:12], "little")
    header = json.loads(blob[12:12 + hlen].decode())
    base = 12 + hlen
    out = {}
    for name, meta in header.items():
        start = base + meta["offset"]
        arr = np.frombuffer(blob[start:start + meta["nbytes"]], dtype=meta["dtype"])
        out[name] = arr.reshape(meta["shape"]).copy()
    return out


def state_dict_to_arrays(state_dict) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in state_dict.items()}


def load_state_dict_from(path: str | Path, module) -> None:
    import torch

    arrays = load_arrays(path)
    sd = {k: torch.from_numpy(v) for k, v in arrays.items()}
    module.load_state_dict(sd)


def save_checkpoint(path: str | Path, module, meta: dict) -> None:
    """Weights to ``<path>`` and metadata (step, config hash, seed, weight
    checksum, ...) to ``<path>.json``."""
    save_arrays(path, state_dict_to_arrays(module.state_dict()))
    write_manifest(str(path) + ".json", {**meta, "checksum": module_checksum(module)})


def module_checksum(module) -> str:
    """Stable digest of a torch module's weights (frozen-contract checks)."""
    h = hashlib.blake2b(digest_size=16)
    sd = module.state_dict()
    for name in sorted(sd):
        h.update(name.encode())
        h.update(np.ascontiguousarray(sd[name].detach().cpu().numpy()).tobytes())
    return h.hexdigest()


def file_checksum(path: str | Path) -> str:
    h = hashlib.blake2b(digest_size=16)
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def append_csv_row(path: str | Path, row: list, header: list[str] | None = None) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a") as f:
        if new and header is not None:
            f.write(",".join(header) + "\n")
        f.write(",".join(str(v) for v in row) + "\n")


def sample_seed(root_seed: int, index: int, tag: str = "") -> int:
    """Deterministic, collision-resistant child seed."""
    h = hashlib.blake2b(f"{root_seed}:{tag}:{index}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") & 0x7FFFFFFF
