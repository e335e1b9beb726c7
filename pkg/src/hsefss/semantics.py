"""Class-description embeddings and the projectors into visual channel space."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError
from .numerics import Tensor, add, matmul, relu, reshape

PROJECTOR_KINDS = ("linear", "mlp2", "mlp3")


@dataclass(frozen=True)
class ClassEmbedding:
    name: str
    vector: Tensor

    @property
    def dim(self) -> int:
        return self.vector.shape[0]


def load_embeddings(path) -> list[ClassEmbedding]:
    """Read a JSON-lines file of ``{"name", "dim", "vector"}`` records."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise FormatError(f"cannot read embeddings {path}: {exc}") from exc
    out: list[ClassEmbedding] = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            name, vec = rec["name"], rec["vector"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"{path}:{lineno}: bad record ({exc})") from exc
        vec = np.asarray(vec, dtype=np.float64)
        if vec.ndim != 1 or "dim" in rec and rec["dim"] != vec.size:
            raise FormatError(f"{path}:{lineno}: declared dim {rec.get('dim')} != vector length {vec.size}")
        if not np.all(np.isfinite(vec)):
            raise FormatError(f"{path}:{lineno}: non-finite vector for {name!r}")
        if name in seen:
            raise FormatError(f"{path}:{lineno}: duplicate class name {name!r}")
        seen[name] = lineno
        out.append(ClassEmbedding(name, Tensor(vec, dtype=np.float32)))
    dims = sorted({e.dim for e in out})
    if len(dims) > 1:
        raise FormatError(f"{path}: mixed embedding dimensions {dims}")
    return out


def save_embeddings(path, embeddings) -> None:
    with open(path, "w") as fh:
        for e in embeddings:
            vec = [float(v) for v in e.vector.data]
            fh.write(json.dumps({"name": e.name, "dim": len(vec), "vector": vec}) + "\n")


def synth_embedding(name: str, ct: int, seed: int) -> ClassEmbedding:
    """Deterministic unit-norm stand-in for a language-model embedding of ``name``."""
    if not name:
        raise ValueError("class name must be non-empty")
    if ct < 2:
        raise ValueError(f"embedding dimension must be >= 2, got {ct}")
    digest = hashlib.sha256(f"{int(seed)}\x00{name}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    vec = rng.standard_normal(ct)
    vec /= math.sqrt(float(vec @ vec))
    return ClassEmbedding(name, Tensor(vec, dtype=np.float64))


def descriptor_embedding(name: str, descriptor, ct: int, seed: int) -> ClassEmbedding:
    """Unit-norm embedding of an attribute vector through a fixed random linear map.

    Classes with similar attributes get similar embeddings, which is the
    property an exported language-model embedding brings to the pipeline.
    """
    descriptor = np.asarray(descriptor, dtype=np.float64)
    mix = np.random.default_rng([int(seed), 0xDE5C]).standard_normal((ct, descriptor.size))
    vec = mix @ descriptor
    norm = math.sqrt(float(vec @ vec))
    if norm == 0:
        raise ValueError(f"descriptor for {name!r} maps to the zero vector")
    return ClassEmbedding(name, Tensor(vec / norm, dtype=np.float64))


def embedding_table(embeddings) -> dict[str, Tensor]:
    return {e.name: e.vector for e in embeddings}


# --------------------------------------------------------------------------
# projectors


def projector_shapes(kind: str, ct: int, c: int) -> list[tuple[int, int]]:
    """(in, out) of each affine layer."""
    if kind not in PROJECTOR_KINDS:
        raise ValueError(f"unknown projector kind {kind!r}")
    depth = {"linear": 1, "mlp2": 2, "mlp3": 3}[kind]
    return [(ct, c)] + [(c, c)] * (depth - 1)


def init_projector(prefix: str, kind: str, ct: int, c: int, rng: np.random.Generator) -> dict[str, Tensor]:
    tensors = {}
    for i, (fan_in, fan_out) in enumerate(projector_shapes(kind, ct, c)):
        bound = 1.0 / math.sqrt(fan_in)
        tensors[f"{prefix}.{i}.w"] = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        tensors[f"{prefix}.{i}.b"] = Tensor(np.zeros(fan_out))
    return tensors


def project(tensors, prefix: str, t: Tensor) -> Tensor:
    """Map a ``C_t`` embedding to ``C`` channels; ReLU between affine layers."""
    x = reshape(t, (1, t.shape[0]))
    i = 0
    while f"{prefix}.{i}.w" in tensors:
        w = tensors[f"{prefix}.{i}.w"]
        if x.shape[1] != w.shape[0]:
            raise DimensionError(f"projector {prefix} layer {i} expects dim {w.shape[0]}, got {x.shape[1]}")
        if i:
            x = relu(x)
        x = add(matmul(x, w), tensors[f"{prefix}.{i}.b"])
        i += 1
    if i == 0:
        raise KeyError(f"no projector parameters under {prefix!r}")
    return reshape(x, (x.shape[1],))
