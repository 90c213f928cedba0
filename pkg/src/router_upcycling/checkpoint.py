"""Named-tensor checkpoints and their on-disk format.

A checkpoint directory holds ``manifest.json`` (format version, configs and an
ordered tensor index of name/shape/byte offset) and ``weights.bin``, the
little-endian float64 tensors concatenated in index order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .config import ModelConfig, MoEConfig

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "weights.bin"
_LE_F64 = np.dtype("<f8")


class CheckpointError(Exception):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class FormatVersionError(CheckpointError):
    pass


class TruncatedBlobError(CheckpointError):
    pass


class FrozenCheckpointError(CheckpointError):
    pass


def dense_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, v = cfg.d_model, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "embed.tok": (v, d),
        "embed.pos": (cfg.seq_len, d),
    }
    for i in range(cfg.n_layers):
        p = f"layer.{i}"
        shapes[f"{p}.attn_norm.w"] = (d,)
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.attn.{w}"] = (d, d)
        shapes[f"{p}.ffn_norm.w"] = (d,)
        shapes[f"{p}.ffn.w1"] = (cfg.ffn_hidden, d)
        shapes[f"{p}.ffn.w2"] = (d, cfg.ffn_hidden)
    shapes["final_norm.w"] = (d,)
    shapes["lm_head.w"] = (v, d)
    return shapes


def router_shapes(cfg: ModelConfig, moe: MoEConfig, layer: int) -> dict[str, tuple[int, ...]]:
    d, n, p = cfg.d_model, moe.n_experts, f"layer.{layer}"
    if moe.router_mode == "mixture":
        shapes = {f"{p}.router.{j}.w": (moe.router_dim, d) for j in range(moe.n_routers)}
        for e in range(n):
            for c in range(moe.keys_per_expert):
                shapes[f"{p}.expert.{e}.key.{c}"] = (moe.router_dim,)
        return shapes
    if moe.router_mode == "mlp":
        return {f"{p}.router.w1": (d, d), f"{p}.router.w2": (n, d)}
    return {f"{p}.router.w": (n, d)}


def moe_shapes(cfg: ModelConfig, moe: MoEConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for name, shape in dense_shapes(cfg).items():
        if ".ffn.w" not in name:
            shapes[name] = shape
            continue
        prefix, _, leaf = name.rpartition(".ffn.")
        layer = int(prefix.split(".")[1])
        if leaf == "w1":
            for e in range(moe.n_experts):
                shapes[f"{prefix}.expert.{e}.w1"] = shape
        else:
            for e in range(moe.n_experts):
                shapes[f"{prefix}.expert.{e}.w2"] = shape
            shapes.update(router_shapes(cfg, moe, layer))
    return shapes


@dataclass
class DenseCheckpoint:
    config: ModelConfig
    tensors: Mapping[str, np.ndarray]
    frozen: bool = False

    kind = "dense"

    def __post_init__(self):
        self._validate()
        tensors = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in self.tensors.items()}
        if self.frozen:
            for arr in tensors.values():
                arr.setflags(write=False)
            self.tensors = MappingProxyType(tensors)
        else:
            self.tensors = tensors

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        return dense_shapes(self.config)

    def _validate(self) -> None:
        expected = self.expected_shapes()
        missing = [k for k in expected if k not in self.tensors]
        if missing:
            raise ShapeMismatchError(f"missing tensors: {missing[:5]}")
        extra = [k for k in self.tensors if k not in expected]
        if extra:
            raise ShapeMismatchError(f"unexpected tensors: {extra[:5]}")
        for name, shape in expected.items():
            got = tuple(np.shape(self.tensors[name]))
            if got != shape:
                raise ShapeMismatchError(f"{name}: expected shape {shape}, got {got}")

    def set(self, name: str, value: np.ndarray) -> None:
        if self.frozen:
            raise FrozenCheckpointError(f"checkpoint is frozen; cannot modify {name}")
        expected = self.expected_shapes()[name]
        value = np.array(value, dtype=np.float64)
        if value.shape != expected:
            raise ShapeMismatchError(f"{name}: expected shape {expected}, got {value.shape}")
        self.tensors[name] = value

    def freeze(self) -> "DenseCheckpoint":
        return self._copy(frozen=True)

    def unfrozen(self) -> "DenseCheckpoint":
        return self._copy(frozen=False)

    def _copy(self, frozen: bool):
        return type(self)(self.config, {k: v.copy() for k, v in self.tensors.items()}, frozen)

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))


@dataclass
class MoECheckpoint(DenseCheckpoint):
    moe: MoEConfig = field(default_factory=MoEConfig)

    kind = "moe"

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        return moe_shapes(self.config, self.moe)

    def _copy(self, frozen: bool):
        return MoECheckpoint(self.config, {k: v.copy() for k, v in self.tensors.items()}, frozen, self.moe)


def write_tensor_dir(path, tensors: Mapping[str, np.ndarray], meta: dict) -> Path:
    """Write ``tensors`` (in mapping order) plus ``meta`` as manifest + blob."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = []
    offset = 0
    with open(path / BLOB, "wb") as f:
        for name, value in tensors.items():
            arr = np.ascontiguousarray(value, dtype=_LE_F64)
            f.write(arr.tobytes(order="C"))
            index.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
    manifest = {"format_version": FORMAT_VERSION, **meta, "tensors": index, "total_bytes": offset}
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError as e:
        raise CheckpointError(f"no {MANIFEST} in {path}") from e
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt manifest in {path}: {e}") from e
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"unknown checkpoint format version {version!r} (supported: {FORMAT_VERSION})")
    return manifest


def read_tensor_dir(path, expected: Mapping[str, tuple[int, ...]] | None = None, manifest: dict | None = None) -> dict[str, np.ndarray]:
    """Read the blob described by the manifest, checking shapes against ``expected``."""
    path = Path(path)
    manifest = manifest or read_manifest(path)
    try:
        blob = (path / BLOB).read_bytes()
    except FileNotFoundError as e:
        raise TruncatedBlobError(f"no {BLOB} in {path}") from e
    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for entry in manifest["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if expected is not None:
            if name not in expected:
                raise ShapeMismatchError(f"unexpected tensor {name!r} in manifest")
            if shape != expected[name]:
                raise ShapeMismatchError(f"{name}: manifest shape {shape} does not match architecture {expected[name]}")
        if entry["offset"] != offset:
            raise ShapeMismatchError(f"{name}: offset {entry['offset']} inconsistent with index (expected {offset})")
        nbytes = int(np.prod(shape)) * 8
        if offset + nbytes > len(blob):
            raise TruncatedBlobError(f"{name}: blob ends at {len(blob)} bytes, need {offset + nbytes}")
        arr = np.frombuffer(blob, dtype=_LE_F64, count=nbytes // 8, offset=offset)
        tensors[name] = arr.reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(blob):
        raise ShapeMismatchError(f"blob has {len(blob) - offset} trailing bytes")
    if expected is not None:
        missing = [k for k in expected if k not in tensors]
        if missing:
            raise ShapeMismatchError(f"manifest lacks tensors: {missing[:5]}")
    return tensors


def save(ckpt: DenseCheckpoint, path) -> Path:
    meta = {"kind": ckpt.kind, "frozen": ckpt.frozen, "config": ckpt.config.to_dict()}
    if isinstance(ckpt, MoECheckpoint):
        meta["moe_config"] = ckpt.moe.to_dict()
    ordered = {name: ckpt.tensors[name] for name in ckpt.expected_shapes()}
    return write_tensor_dir(path, ordered, meta)


def load(path) -> DenseCheckpoint:
    manifest = read_manifest(path)
    cfg = ModelConfig.from_dict(manifest["config"])
    kind = manifest.get("kind", "dense")
    frozen = bool(manifest.get("frozen", False))
    if kind == "moe":
        moe = MoEConfig.from_dict(manifest["moe_config"])
        tensors = read_tensor_dir(path, moe_shapes(cfg, moe), manifest)
        return MoECheckpoint(cfg, tensors, frozen, moe)
    if kind == "dense":
        tensors = read_tensor_dir(path, dense_shapes(cfg), manifest)
        return DenseCheckpoint(cfg, tensors, frozen)
    raise CheckpointError(f"unknown checkpoint kind {kind!r}")
