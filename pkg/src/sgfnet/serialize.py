"""TNSR v1 tensor files and manifest-indexed tensor bundles.

A TNSR file is one ASCII header line ``TNSR 1 <f32|f64> <ndim> <d0> ...``
followed by the little-endian values in row-major order. A bundle is a
directory holding one ``.tnsr`` file per entry plus ``manifest.txt``,
whose lines are either ``tensor <name> <file>`` or ``meta <key> <value>``.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

_CODES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class FormatError(ValueError):
    pass


def write_tensor(f: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    code = "f64" if arr.dtype == np.float64 else "f32"
    header = " ".join(["TNSR", "1", code, str(arr.ndim)] + [str(d) for d in arr.shape])
    f.write(header.encode("ascii") + b"\n")
    f.write(np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes())


def read_tensor(f: BinaryIO) -> np.ndarray:
    parts = f.readline().decode("ascii", errors="replace").split()
    if len(parts) < 4 or parts[0] != "TNSR" or parts[1] != "1" or parts[2] not in _CODES:
        raise FormatError(f"not a TNSR v1 header: {' '.join(parts)!r}")
    try:
        ndim = int(parts[3])
        shape = tuple(int(d) for d in parts[4:])
    except ValueError as exc:
        raise FormatError(f"bad TNSR dimensions: {' '.join(parts)!r}") from exc
    if any(d < 0 for d in shape):
        raise FormatError(f"negative dimension in {shape}")
    if len(shape) != ndim:
        raise FormatError(f"header declares {ndim} dims but lists {len(shape)}")
    dt = _CODES[parts[2]]
    count = int(np.prod(shape, dtype=np.int64))
    raw = f.read(count * dt.itemsize)
    if len(raw) != count * dt.itemsize:
        raise FormatError("truncated TNSR payload")
    return np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)


def save_bundle(directory, tensors: Mapping[str, np.ndarray], meta: Mapping[str, object] = ()) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for key, value in dict(meta).items():
        lines.append(f"meta {key} {value}")
    for name, arr in tensors.items():
        if any(ch.isspace() for ch in name) or os.sep in name:
            raise ValueError(f"invalid tensor name {name!r}")
        fname = f"{name}.tnsr"
        save_tensor(d / fname, arr)
        lines.append(f"tensor {name} {fname}")
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_bundle(directory) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    d = Path(directory)
    manifest = d / "manifest.txt"
    if not manifest.is_file():
        raise FileNotFoundError(f"no manifest in {d}")
    tensors, meta = {}, {}
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        kind, key, value = line.split(" ", 2)
        if kind == "tensor":
            tensors[key] = load_tensor(d / value)
        elif kind == "meta":
            meta[key] = value
        else:
            raise FormatError(f"bad manifest line: {line!r}")
    return tensors, meta
