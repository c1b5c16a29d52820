"""Binary checkpoint format for model parameters and optimizer state.

Layout, all little-endian: magic ``AMCK``, u32 format version, then two
tensor sections (parameters, then optimizer state). Each section is a u32
tensor count followed by entries of: u32 name length, UTF-8 name, u32 rank,
u32 dims, float32 payload. Model topology is carried as ``meta.*`` scalar
tensors inside the parameter section so a checkpoint is self-describing.
Round-trips are bit-exact for float32 models (the only kind any flow saves).
"""

from __future__ import annotations

import struct

import numpy as np

from .data import atomic_write_bytes
from .model import ModelBundle, ModelConfig

MAGIC = b"AMCK"
VERSION = 1

_META_FIELDS = ("image_size", "image_channels", "num_classes", "feature_size",
                "feature_channels", "base_channels", "decoder_enabled")


def _encode_tensor(name: str, array: np.ndarray) -> bytes:
    data = np.ascontiguousarray(array, dtype="<f4")
    raw = name.encode("utf-8")
    head = struct.pack("<I", len(raw)) + raw
    head += struct.pack("<I", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape)
    return head + data.tobytes()


class _Reader:
    def __init__(self, blob: bytes, offset: int):
        self.blob = blob
        self.off = offset

    def u32(self) -> int:
        (value,) = struct.unpack_from("<I", self.blob, self.off)
        self.off += 4
        return value

    def tensor(self) -> tuple[str, np.ndarray]:
        name_len = self.u32()
        name = self.blob[self.off:self.off + name_len].decode("utf-8")
        self.off += name_len
        rank = self.u32()
        dims = tuple(self.u32() for _ in range(rank))
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(self.blob, dtype="<f4", count=count, offset=self.off)
        self.off += count * 4
        return name, data.reshape(dims).astype(np.float32)


def save_checkpoint(path: str, model: ModelBundle, state: dict[str, np.ndarray]):
    params = model.parameters()
    meta = [(f"meta.{f}", np.array([float(getattr(model.config, f))], dtype=np.float32))
            for f in _META_FIELDS]
    entries = meta + [(name, p.data) for name, p in params.items()]
    blob = MAGIC + struct.pack("<I", VERSION)
    blob += struct.pack("<I", len(entries))
    for name, arr in entries:
        blob += _encode_tensor(name, arr)
    blob += struct.pack("<I", len(state))
    for name, arr in state.items():
        blob += _encode_tensor(name, arr)
    atomic_write_bytes(path, blob)


def load_checkpoint(path: str) -> tuple[ModelBundle, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    reader = _Reader(blob, 8)
    n_params = reader.u32()
    tensors = dict(reader.tensor() for _ in range(n_params))
    n_state = reader.u32()
    state = dict(reader.tensor() for _ in range(n_state))
    if reader.off != len(blob):
        raise ValueError(f"{path}: {len(blob) - reader.off} trailing bytes")

    meta = {}
    for field in _META_FIELDS:
        key = f"meta.{field}"
        if key not in tensors:
            raise ValueError(f"{path}: missing topology entry {key}")
        meta[field] = tensors.pop(key)
    config = ModelConfig(
        image_size=int(meta["image_size"][0]),
        image_channels=int(meta["image_channels"][0]),
        num_classes=int(meta["num_classes"][0]),
        feature_size=int(meta["feature_size"][0]),
        feature_channels=int(meta["feature_channels"][0]),
        base_channels=int(meta["base_channels"][0]),
        decoder_enabled=bool(meta["decoder_enabled"][0]),
        dtype="float32",
    )
    model = ModelBundle(config, seed=0)
    params = model.parameters()
    if set(params) != set(tensors):
        missing = set(params) ^ set(tensors)
        raise ValueError(f"{path}: parameter names disagree with topology: {sorted(missing)}")
    for name, p in params.items():
        if tensors[name].shape != p.data.shape:
            raise ValueError(f"{path}: shape mismatch for {name}")
        p.data = tensors[name]
    return model, state
