"""Binary checkpoints: config JSON plus a sorted table of float64 tensors.

Layout (all integers little-endian)::

    b"DHL1"  u32 version  u64 config_len  config (UTF-8 JSON)
    u32 tensor_count
    per tensor, names in sorted order:
        u32 name_len  name (UTF-8)  u32 rank  u64 dims[rank]  f64 values[prod(dims)]

The JSON is written with sorted keys and no extra whitespace, so saving the
same state twice yields identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from dhl.data import AdjacencyMatrix, GoalVocabulary
from dhl.errors import (
    CorruptCheckpointError,
    MagicMismatchError,
    NonFiniteTensorError,
    ShapeTableError,
    VersionMismatchError,
)
from dhl.model import ModelConfig, param_shapes

MAGIC = b"DHL1"
VERSION = 1
ADAM_PREFIXES = ("optim.m.", "optim.v.")


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.config["model"])

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def params(self) -> dict[str, np.ndarray]:
        names = param_shapes(self.model_config())
        return {k: self.tensors[k] for k in names}

    def weightnet(self) -> dict[str, np.ndarray]:
        return self.group("weightnet.")

    def adjacency(self) -> dict[str, AdjacencyMatrix]:
        eps = self.config["model"].get("epsilon")
        out = {}
        for low, high in (("entity", "type"), ("attribute", "entity")):
            name = f"adjacency.{low}"
            if name in self.tensors:
                out[low] = AdjacencyMatrix(high, low, self.tensors[name], eps)
        return out

    def vocabs(self) -> dict[str, GoalVocabulary]:
        return {level: GoalVocabulary.from_names(level, names)
                for level, names in self.config.get("vocabs", {}).items()}


def expected_shapes(config: Mapping) -> dict[str, tuple[int, ...]] | None:
    """Shape table implied by the config, or None when it carries no model."""
    if "model" not in config:
        return None
    shapes = dict(param_shapes(ModelConfig.from_dict(config["model"])))
    hidden = config.get("weightnet_hidden")
    if hidden:
        shapes.update({"weightnet.w1": (1, hidden), "weightnet.b1": (1, hidden),
                       "weightnet.w2": (hidden, 1), "weightnet.b2": (1, 1)})
    if config.get("adjacency"):
        mc = ModelConfig.from_dict(config["model"])
        shapes["adjacency.entity"] = (mc.n_types, mc.n_entities)
        if mc.n_attributes:
            shapes["adjacency.attribute"] = (mc.n_entities, mc.n_attributes)
    if config.get("optimizer"):
        for name, shape in param_shapes(ModelConfig.from_dict(config["model"])).items():
            for prefix in ADAM_PREFIXES:
                shapes[prefix + name] = shape
    return shapes


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False,
                      allow_nan=False).encode("utf-8")


def to_bytes(ckpt: Checkpoint) -> bytes:
    config = canonical_json(ckpt.config)
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(config)), config,
             struct.pack("<I", len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name], dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteTensorError(name)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<II", len(raw), arr.ndim))
        parts.append(raw)
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.astype("<f8").tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.blob):
            raise CorruptCheckpointError(
                f"truncated checkpoint while reading {what} at byte {self.pos}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def from_bytes(blob: bytes, validate: bool = True) -> Checkpoint:
    r = _Reader(blob)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise MagicMismatchError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, config_len = r.unpack("<IQ", "header")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this build reads {VERSION}")
    try:
        config = json.loads(r.take(config_len, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"config blob is not valid JSON: {exc}") from exc
    if not isinstance(config, dict):
        raise CorruptCheckpointError("config blob must be a JSON object")
    (count,) = r.unpack("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        name_len, rank = r.unpack("<II", f"tensor {i} header")
        try:
            name = r.take(name_len, f"tensor {i} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptCheckpointError(f"tensor {i} name is not UTF-8") from exc
        dims = r.unpack(f"<{rank}Q", f"dims of {name!r}")
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw = r.take(8 * size, f"values of {name!r}")
        if name in tensors:
            raise CorruptCheckpointError(f"duplicate tensor {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
    if r.pos != len(blob):
        raise CorruptCheckpointError(f"{len(blob) - r.pos} trailing bytes after tensor table")
    ckpt = Checkpoint(config, tensors)
    if validate:
        check_shape_table(ckpt)
    return ckpt


def check_shape_table(ckpt: Checkpoint) -> None:
    try:
        shapes = expected_shapes(ckpt.config)
    except (TypeError, ValueError, KeyError, AttributeError) as exc:
        raise CorruptCheckpointError(f"config does not describe a valid model: {exc}") from exc
    if shapes is None:
        return
    for name, shape in shapes.items():
        if name not in ckpt.tensors:
            raise ShapeTableError(name, "missing from checkpoint")
        if tuple(ckpt.tensors[name].shape) != tuple(shape):
            raise ShapeTableError(
                name, f"shape {tuple(ckpt.tensors[name].shape)} but config implies {tuple(shape)}")
    extra = sorted(set(ckpt.tensors) - set(shapes))
    if extra:
        raise ShapeTableError(extra[0], "not implied by the config")


def save(ckpt: Checkpoint, path) -> None:
    """Write atomically: a temp file in the same directory, then rename."""
    blob = to_bytes(ckpt)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path, validate: bool = True) -> Checkpoint:
    return from_bytes(Path(path).read_bytes(), validate)


def training_checkpoint(
    model_config: ModelConfig,
    params: Mapping[str, np.ndarray],
    weightnet: Mapping[str, np.ndarray] | None = None,
    vocabs: Mapping[str, GoalVocabulary] | None = None,
    adjacency: Mapping[str, AdjacencyMatrix] | None = None,
    train_config: Mapping | None = None,
    adam=None,
    extra: Mapping | None = None,
) -> Checkpoint:
    """Bundle a model with whatever else inference or resuming needs.

    The adjacency matrices are stored because they come from the training
    split, which is not available at evaluation time.
    """
    config: dict = {"model": model_config.to_dict()}
    tensors = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    if weightnet:
        config["weightnet_hidden"] = int(weightnet["weightnet.w1"].shape[1])
        tensors.update(weightnet)
    if vocabs:
        config["vocabs"] = {lv: list(v.names) for lv, v in vocabs.items()}
    if adjacency:
        config["adjacency"] = True
        for low, matrix in adjacency.items():
            tensors[f"adjacency.{low}"] = np.asarray(matrix.values, dtype=np.float64)
    if train_config is not None:
        config["train"] = dict(train_config)
    if adam is not None:
        config["optimizer"] = {"step": adam.step, "beta1": adam.beta1, "beta2": adam.beta2,
                               "eps": adam.eps}
        for name in params:
            tensors["optim.m." + name] = adam.m[name]
            tensors["optim.v." + name] = adam.v[name]
    if extra:
        config.update(extra)
    return Checkpoint(config, tensors)
