"""File formats: binary containers, CSV maps, PGM heatmaps, JSON sidecars.

Binary container layout (little-endian)::

    magic      4 bytes   b"FGV1" (network) or b"FGT1" (trajectory)
    count      uint32
    dims       (count + 1) x uint32   for FGV1; count x uint32 for FGT1
    payload    float64 row-major
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .core import ContractError


def _dims_for(magic: bytes, count: int) -> int:
    return count + 1 if magic == b"FGV1" else count


def write_container(path, magic: bytes, ints, floats) -> None:
    ints = [int(i) for i in ints]
    header = magic + struct.pack(f"<{len(ints)}I", *ints)
    Path(path).write_bytes(header + np.asarray(floats, dtype="<f8").tobytes())


def read_container(path, magic: bytes) -> tuple[list[int], np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != magic:
        raise ContractError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    if len(raw) < 8:
        raise ContractError(f"{path}: truncated header")
    (count,) = struct.unpack_from("<I", raw, 4)
    n_dims = _dims_for(magic, count)
    end = 8 + 4 * n_dims
    if len(raw) < end or (len(raw) - end) % 8:
        raise ContractError(f"{path}: truncated container")
    dims = list(struct.unpack_from(f"<{n_dims}I", raw, 8))
    return [count, *dims], np.frombuffer(raw[end:], dtype="<f8").astype(np.float64)


def format_float(v: float) -> str:
    return format(float(v), ".17g")


def write_map_csv(path, grid: np.ndarray) -> None:
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    rows, cols = grid.shape
    lines = [f"# shape: {rows} {cols}"]
    lines += [",".join(format_float(v) for v in row) for row in grid]
    Path(path).write_text("\n".join(lines) + "\n")


def read_map_csv(path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# shape:"):
        raise ContractError(f"{path}: missing '# shape: R C' header")
    rows, cols = (int(v) for v in lines[0].split(":", 1)[1].split())
    data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:] if ln.strip()])
    if data.shape != (rows, cols):
        raise ContractError(f"{path}: header says {rows}x{cols}, body is {data.shape}")
    return data


def write_table_csv(path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(v if isinstance(v, str) else (str(v) if isinstance(v, (int, np.integer)) else format_float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def write_pgm(path, grid: np.ndarray) -> tuple[float, float]:
    """8-bit binary PGM, linearly scaled from the map min (0) to max (255)."""
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    lo, hi = float(grid.min()), float(grid.max())
    if hi > lo:
        pix = np.rint((grid - lo) / (hi - lo) * 255.0)
    else:
        pix = np.zeros_like(grid)
    rows, cols = grid.shape
    Path(path).write_bytes(f"P5\n{cols} {rows}\n255\n".encode() + pix.astype(np.uint8).tobytes())
    return lo, hi


def write_json(path, obj: Any) -> None:
    Path(path).write_text(json.dumps(to_jsonable(obj), indent=2, sort_keys=True) + "\n")


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    return obj
