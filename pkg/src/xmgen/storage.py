"""Binary tensor containers and JSON sidecars.

Two on-disk formats:

* tensor file (``.xmt``): magic, version, dtype code, rank, shape,
  little-endian float32 payload. One array per file.
* checkpoint container (``.xmc``): magic, version, a UTF-8 JSON metadata
  blob, then a sequence of named float32 tensor records. Used for every
  parameter store (denoiser, feature encoder, classifier).

Both formats round-trip bit-exactly and detect truncation or header
corruption instead of crashing.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"XMGT"
CONTAINER_MAGIC = b"XMGC"
FORMAT_VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4")}


class StorageError(Exception):
    """Raised for corrupt, truncated, or malformed artifact files."""


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise StorageError(msg)


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    _require(len(buf) == n, f"truncated file while reading {what} "
             f"(wanted {n} bytes, got {len(buf)})")
    return buf


def _write_tensor_record(f, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    f.write(struct.pack("<II", 0, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(arr.tobytes())


def _read_tensor_record(f) -> np.ndarray:
    code, rank = struct.unpack("<II", _read_exact(f, 8, "tensor header"))
    _require(code in _DTYPE_CODES, f"unknown dtype code {code}")
    _require(rank <= 8, f"implausible tensor rank {rank}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank, "tensor shape"))
    count = int(np.prod(shape)) if rank else 1
    _require(count < 2**33, f"implausible element count {count}")
    payload = _read_exact(f, 4 * count, "tensor payload")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def save_tensor(path: str | Path, array: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        _write_tensor_record(f, array)


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        _require(magic == TENSOR_MAGIC, f"bad magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        _require(version == FORMAT_VERSION, f"unsupported version {version}")
        arr = _read_tensor_record(f)
        _require(f.read(1) == b"", "trailing bytes after tensor payload")
        return arr


def save_container(path: str | Path, meta: dict,
                   tensors: dict[str, np.ndarray]) -> None:
    """Write a metadata JSON plus named float32 tensors."""
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CONTAINER_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            name_b = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            _write_tensor_record(f, arr)


def load_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        _require(magic == CONTAINER_MAGIC, f"bad magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        _require(version == FORMAT_VERSION, f"unsupported version {version}")
        (meta_len,) = struct.unpack("<Q", _read_exact(f, 8, "meta length"))
        _require(meta_len < 2**30, f"implausible metadata length {meta_len}")
        try:
            meta = json.loads(_read_exact(f, meta_len, "metadata").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise StorageError(f"corrupt metadata block: {exc}") from exc
        (n_tensors,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "tensor name").decode("utf-8")
            tensors[name] = _read_tensor_record(f)
        _require(f.read(1) == b"", "trailing bytes after final tensor")
        return meta, tensors


def save_json(path: str | Path, obj: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def load_json(path: str | Path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
