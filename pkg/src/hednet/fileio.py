"""File formats: SPT1 sparse tensors, HEDW weight bundles, point clouds,
JSON configs, and the output digest.

All binary formats are little-endian. Format violations raise
FormatError; the CLI maps those to exit code 3.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .core import COORD_DTYPE, SparseTensor
from .errors import ConfigError, FormatError
from .network import NetworkConfig, config_from_dict, config_to_dict

SPT_MAGIC = b"SPT1"
WEIGHTS_MAGIC = b"HEDW"


def write_sparse_tensor(path, t: SparseTensor) -> None:
    with open(path, "wb") as f:
        f.write(SPT_MAGIC)
        f.write(struct.pack("<IBI", 1, t.ndim, t.batch_size))
        f.write(np.asarray(t.spatial_shape, dtype="<u4").tobytes())
        f.write(struct.pack("<IQ", t.channels, t.num_active))
        f.write(t.coords.astype("<i4").tobytes())
        f.write(t.features.astype("<f4").tobytes())


def read_sparse_tensor(path) -> SparseTensor:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != SPT_MAGIC:
        raise FormatError(f"{path}: bad magic, not a sparse tensor file")
    try:
        version, d, batch = struct.unpack_from("<IBI", data, 4)
        if version != 1:
            raise FormatError(f"{path}: unsupported version {version}")
        off = 4 + 9
        shape = tuple(int(v) for v in
                      np.frombuffer(data, "<u4", count=d, offset=off))
        off += 4 * d
        channels, n = struct.unpack_from("<IQ", data, off)
        off += 12
        coords = np.frombuffer(data, "<i4", count=n * (1 + d),
                               offset=off).reshape(n, 1 + d)
        off += 4 * n * (1 + d)
        feats = np.frombuffer(data, "<f4", count=n * channels,
                              offset=off).reshape(n, channels)
    except (struct.error, ValueError) as e:
        raise FormatError(f"{path}: truncated sparse tensor file: {e}") from e
    return SparseTensor(coords.astype(COORD_DTYPE), feats.astype(np.float32),
                        shape, batch)


def write_weights(path, weights: dict[str, np.ndarray]) -> None:
    """Record order follows the dict order, which callers keep canonical."""
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<II", 1, len(weights)))
        for name, arr in weights.items():
            arr = np.asarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            f.write(np.asarray(arr.shape, dtype="<u4").tobytes())
            f.write(arr.tobytes())


def read_weights(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: bad magic, not a weights file")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != 1:
            raise FormatError(f"{path}: unsupported version {version}")
        off = 12
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<B", data, off)
            off += 1
            dims = tuple(int(v) for v in
                         np.frombuffer(data, "<u4", count=rank, offset=off))
            off += 4 * rank
            n = int(np.prod(dims)) if dims else 1
            arr = np.frombuffer(data, "<f4", count=n, offset=off)
            off += 4 * n
            out[name] = arr.reshape(dims).astype(np.float32)
        if off != len(data):
            raise FormatError(f"{path}: trailing bytes after last record")
    except (struct.error, ValueError) as e:
        raise FormatError(f"{path}: malformed weights file: {e}") from e
    return out


def read_points_csv(path) -> np.ndarray:
    """CSV with header ``x,y,z[,f1,...]``; returns a (P, 3+E) array."""
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        return np.empty((0, 4))
    header = [h.strip() for h in lines[0].split(",")]
    if header[:3] != ["x", "y", "z"]:
        raise FormatError(f"{path}: header must start with x,y,z")
    width = len(header)
    rows = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != width:
            raise FormatError(
                f"{path}: line {ln}: expected {width} fields, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as e:
            raise FormatError(f"{path}: line {ln}: {e}") from e
    if not rows:
        return np.empty((0, width))
    return np.asarray(rows, dtype=np.float64)


def read_points_bin(path) -> np.ndarray:
    """Raw binary of consecutive little-endian f32 (x, y, z, intensity)."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) % 16 != 0:
        raise FormatError(
            f"{path}: size {len(data)} is not a multiple of 16 bytes")
    return np.frombuffer(data, "<f4").reshape(-1, 4).astype(np.float64)


def read_points(path) -> np.ndarray:
    if str(path).endswith(".bin"):
        return read_points_bin(path)
    return read_points_csv(path)


def load_config(path) -> NetworkConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON: {e}") from e
    try:
        return config_from_dict(data)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from e


def save_config(path, cfg: NetworkConfig) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config_to_dict(cfg), f, indent=2)
        f.write("\n")


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a over a byte stream."""
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def tensor_digest(arr: np.ndarray) -> str:
    """FNV-1a over the canonical little-endian byte stream of an array."""
    canonical = np.ascontiguousarray(arr).astype(
        "<f8" if arr.dtype == np.float64 else "<f4", copy=False)
    return f"{fnv1a64(canonical.tobytes()):016x}"
