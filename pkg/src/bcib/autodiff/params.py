"""Named parameter collections and their flat binary checkpoint format.

Layout (all little-endian)::

    b"BCIB" | version u32 | count u32 |
    count x ( path_len u16 | path utf-8 | rows u32 | cols u32 | rows*cols f64 )
    [optional trailer bytes, e.g. a UTF-8 JSON config]
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .tensor import TensorNode

MAGIC = b"BCIB"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint bytes."""


class ParamSet(Mapping[str, TensorNode]):
    """Path -> trainable node, iterated in lexicographic path order."""

    def __init__(self, items: Mapping[str, TensorNode] | None = None):
        self._nodes: dict[str, TensorNode] = {}
        for path, node in (items or {}).items():
            self[path] = node

    def __setitem__(self, path: str, node: TensorNode) -> None:
        if path in self._nodes:
            raise KeyError(f"duplicate parameter path {path!r}")
        if not node.requires_grad:
            raise ValueError(f"parameter {path!r} must have requires_grad=True")
        self._nodes[path] = node

    def __getitem__(self, path: str) -> TensorNode:
        return self._nodes[path]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._nodes))

    def __len__(self) -> int:
        return len(self._nodes)

    def add(self, path: str, value: np.ndarray) -> TensorNode:
        node = TensorNode(np.array(value, dtype=np.float64), requires_grad=True, op="param")
        self[path] = node
        return node

    def subset(self, predicate) -> ParamSet:
        return ParamSet({p: n for p, n in self.items() if predicate(p)})

    def zero_grad(self) -> None:
        for node in self.values():
            node.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {p: n.value.copy() for p, n in self.items()}

    def load_snapshot(self, values: Mapping[str, np.ndarray]) -> None:
        missing = set(self._nodes) ^ set(values)
        if missing:
            raise CheckpointError(f"parameter paths differ: {sorted(missing)}")
        for path, node in self.items():
            v = np.asarray(values[path], dtype=np.float64)
            if v.shape != node.shape:
                raise CheckpointError(f"{path}: shape {v.shape} does not match {node.shape}")
            node.value = v.copy()
            node.zero_grad()

    def num_values(self) -> int:
        return int(np.sum([n.value.size for n in self.values()]))


def params_to_bytes(values: Mapping[str, np.ndarray], trailer: bytes = b"") -> bytes:
    paths = sorted(values)
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(paths))]
    for path in paths:
        arr = np.asarray(values[path], dtype="<f8")
        if arr.ndim != 2:
            raise CheckpointError(f"{path}: expected a 2-D grid, got shape {arr.shape}")
        raw = path.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<II", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    chunks.append(trailer)
    return b"".join(chunks)


def params_from_bytes(data: bytes) -> tuple[dict[str, np.ndarray], bytes]:
    """Inverse of :func:`params_to_bytes`; returns (values, trailer)."""
    if data[:4] != MAGIC:
        raise CheckpointError("bad magic: not a BCIB parameter file")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        offset = 12
        values: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, offset)
            offset += 2
            path = data[offset : offset + n].decode("utf-8")
            offset += n
            rows, cols = struct.unpack_from("<II", data, offset)
            offset += 8
            nbytes = 8 * rows * cols
            if offset + nbytes > len(data):
                raise CheckpointError(f"{path}: truncated parameter data")
            values[path] = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=offset).reshape(rows, cols).astype(np.float64)
            offset += nbytes
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    return values, data[offset:]


def save_params(path: str | Path, params: ParamSet | Mapping[str, np.ndarray], trailer: bytes = b"") -> None:
    values = params.snapshot() if isinstance(params, ParamSet) else params
    Path(path).write_bytes(params_to_bytes(values, trailer))


def load_params(path: str | Path) -> tuple[dict[str, np.ndarray], bytes]:
    return params_from_bytes(Path(path).read_bytes())
