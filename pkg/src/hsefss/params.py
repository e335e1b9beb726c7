"""Named parameter sets and the ``HSEB`` binary snapshot container.

Layout (all little-endian)::

    b"HSEB"  u32 version
    repeated until EOF:
        u32 name_length, name (utf-8)
        u32 rank, rank x u32 extents
        prod(extents) x f32 values

Configuration that is not a tensor (backbone strides, variant, frozen flags)
travels in a JSON sidecar next to the snapshot (``<file>.json``).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import FormatError
from .numerics import Tensor

MAGIC = b"HSEB"
VERSION = 1


@dataclass
class ParamSet:
    tensors: dict[str, Tensor] = field(default_factory=dict)
    frozen: set[str] = field(default_factory=set)
    meta: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def trainable(self) -> list[str]:
        return [n for n in self.tensors if n not in self.frozen]

    def with_tensors(self, updates: dict[str, Tensor]) -> "ParamSet":
        tensors = dict(self.tensors)
        tensors.update(updates)
        return ParamSet(tensors, set(self.frozen), self.meta)

    def astype(self, dtype) -> "ParamSet":
        return ParamSet({n: Tensor(t.data, dtype=dtype) for n, t in self.tensors.items()}, set(self.frozen), self.meta)

    def watched(self, names=None) -> "ParamSet":
        """Copy where ``names`` (default: all trainable) require gradients."""
        names = set(self.trainable() if names is None else names)
        tensors = {
            n: Tensor(t.data, requires_grad=n in names, dtype=t.dtype, name=n) for n, t in self.tensors.items()
        }
        return ParamSet(tensors, set(self.frozen), self.meta)

    def merged(self, other: "ParamSet") -> "ParamSet":
        tensors = dict(self.tensors)
        tensors.update(other.tensors)
        return ParamSet(tensors, self.frozen | other.frozen, {**self.meta, **other.meta})

    def equal(self, other: "ParamSet", names=None) -> bool:
        names = list(self.tensors) if names is None else list(names)
        return all(
            n in other.tensors and np.array_equal(self.tensors[n].data, other.tensors[n].data) for n in names
        )


def write_snapshot(path, params: ParamSet) -> None:
    path = Path(path)
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", VERSION)
    for name, t in params.tensors.items():
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", t.data.ndim)
        buf += struct.pack(f"<{t.data.ndim}I", *t.shape)
        buf += np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    path.write_bytes(bytes(buf))
    sidecar = {"frozen": sorted(params.frozen), "meta": params.meta}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def read_snapshot(path) -> ParamSet:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read parameter file {path}: {exc}") from exc
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 8
    tensors: dict[str, Tensor] = {}
    try:
        while off < len(blob):
            (n,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            if off + 4 * count > len(blob):
                raise FormatError(f"{path}: tensor {name!r} truncated")
            data = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape)
            off += 4 * count
            tensors[name] = Tensor(data.astype(np.float32))
    except struct.error as exc:
        raise FormatError(f"{path}: truncated snapshot ({exc})") from exc

    frozen: set[str] = set()
    meta: dict = {}
    side = Path(str(path) + ".json")
    if side.exists():
        try:
            info = json.loads(side.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{side}: {exc}") from exc
        frozen = set(info.get("frozen", []))
        meta = info.get("meta", {})
    return ParamSet(tensors, frozen, meta)
