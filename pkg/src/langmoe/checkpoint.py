"""Bit-exact binary checkpoint serialization.

Wire format: magic ``FPM1``; uint32 little-endian version (=1); uint64
little-endian metadata length; UTF-8 JSON metadata holding the model
config, the ordered parameter manifest (name/shape/dtype), the
checkpoint kind, free-text provenance and the frozen-parameter list;
then the raw float32 little-endian arrays concatenated in manifest
order with no padding.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagicError,
    CheckpointError,
    ContractError,
    KindMismatchError,
    ShapeMismatchError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from .model import ModelConfig, param_manifest

MAGIC = b"FPM1"
VERSION = 1
_DTYPE = "<f4"


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]  # ordered, float32
    kind: str  # "dense" | "moe"
    provenance: str = ""
    frozen: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("dense", "moe"):
            raise ContractError(f"checkpoint kind must be 'dense' or 'moe', got {self.kind!r}")
        if self.kind != self.config.ffn_kind:
            raise KindMismatchError(
                f"checkpoint kind {self.kind!r} does not match config ffn_kind {self.config.ffn_kind!r}"
            )
        expected = param_manifest(self.config)
        names = [n for n, _ in expected]
        if list(self.params.keys()) != names:
            raise ShapeMismatchError(
                "checkpoint parameter names do not match the config manifest"
            )
        for name, shape in expected:
            if self.params[name].shape != shape:
                raise ShapeMismatchError(
                    f"parameter {name} has shape {self.params[name].shape}, expected {shape}"
                )
        for name in self.frozen:
            if name not in self.params:
                raise ContractError(f"frozen parameter {name!r} not in checkpoint")
        self.params = {
            name: np.ascontiguousarray(arr, dtype=np.float32) for name, arr in self.params.items()
        }

    def param_count(self) -> int:
        return sum(arr.size for arr in self.params.values())


def write_bytes_atomic(path: str, payload: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def write_text_atomic(path: str, payload: str) -> None:
    write_bytes_atomic(path, payload.encode("utf-8"))


def serialize_checkpoint(ckpt: Checkpoint) -> bytes:
    manifest = [
        {"name": name, "shape": list(arr.shape), "dtype": "float32"}
        for name, arr in ckpt.params.items()
    ]
    metadata = {
        "config": ckpt.config.to_dict(),
        "manifest": manifest,
        "kind": ckpt.kind,
        "provenance": ckpt.provenance,
        "frozen": list(ckpt.frozen),
    }
    meta_bytes = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(meta_bytes)), meta_bytes]
    for arr in ckpt.params.values():
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPE).tobytes())
    return b"".join(parts)


def deserialize_checkpoint(payload: bytes) -> Checkpoint:
    if payload[:4] != MAGIC:
        raise BadMagicError(f"bad magic {payload[:4]!r}, expected {MAGIC!r}")
    if len(payload) < 16:
        raise TruncatedPayloadError("checkpoint header truncated")
    (version,) = struct.unpack_from("<I", payload, 4)
    if version != VERSION:
        raise VersionMismatchError(f"unsupported checkpoint version {version}, expected {VERSION}")
    (meta_len,) = struct.unpack_from("<Q", payload, 8)
    meta_end = 16 + meta_len
    if len(payload) < meta_end:
        raise TruncatedPayloadError("checkpoint metadata truncated")
    try:
        metadata = json.loads(payload[16:meta_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint metadata: {exc}") from exc

    config = ModelConfig.from_dict(metadata["config"])
    expected = dict(param_manifest(config))
    params: dict[str, np.ndarray] = {}
    offset = meta_end
    for entry in metadata["manifest"]:
        name = entry["name"]
        shape = tuple(entry["shape"])
        if entry.get("dtype") != "float32":
            raise CheckpointError(f"unsupported dtype {entry.get('dtype')!r} for {name}")
        if name not in expected:
            raise ShapeMismatchError(f"parameter {name!r} not implied by the stored config")
        if shape != expected[name]:
            raise ShapeMismatchError(
                f"parameter {name} has stored shape {shape}, config implies {expected[name]}"
            )
        n_bytes = int(np.prod(shape)) * 4
        chunk = payload[offset : offset + n_bytes]
        if len(chunk) < n_bytes:
            raise TruncatedPayloadError(
                f"payload truncated while reading {name}: wanted {n_bytes} bytes, got {len(chunk)}"
            )
        params[name] = np.frombuffer(chunk, dtype=_DTYPE).reshape(shape).copy()
        offset += n_bytes
    if len(params) != len(expected):
        missing = sorted(set(expected) - set(params))
        raise ShapeMismatchError(f"checkpoint is missing parameters: {missing}")
    if offset != len(payload):
        raise TruncatedPayloadError(
            f"checkpoint has {len(payload) - offset} unexpected trailing bytes"
        )
    return Checkpoint(
        config=config,
        params=params,
        kind=metadata["kind"],
        provenance=metadata.get("provenance", ""),
        frozen=tuple(metadata.get("frozen", ())),
    )


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    write_bytes_atomic(path, serialize_checkpoint(ckpt))


def load_checkpoint(path: str, expect_kind: str | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        payload = fh.read()
    ckpt = deserialize_checkpoint(payload)
    if expect_kind is not None and ckpt.kind != expect_kind:
        raise KindMismatchError(
            f"checkpoint kind is {ckpt.kind!r}, expected {expect_kind!r}"
        )
    return ckpt
