"""Int8 per-tensor quantization and the binary checkpoint format.

Layout (little-endian)::

    b"EPCK" | u16 version | u64 config hash | u32 tensor count
    per tensor: u16 name length, UTF-8 name, u8 group tag, u8 rank,
                u32 dims[rank], f32 scale, int8 payload
    u32 CRC32 of every preceding byte

Weights stay float in memory; every save quantizes and every load
dequantizes.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    CheckpointError,
    ConfigMismatch,
    CorruptFile,
    NonFinite,
    TruncatedFile,
    VersionMismatch,
)
from .model import Group, ModelConfig, ParamSet, param_layout

MAGIC = b"EPCK"
FORMAT_VERSION = 1
QMAX = 127
_GROUP_TAGS = {Group.CONV: 0, Group.BLSTM: 1, Group.FC: 2}
_TAG_GROUPS = {v: k for k, v in _GROUP_TAGS.items()}
# Scale mantissas are kept to 17 bits so q * scale is exact in float32
# (7-bit q times 17-bit scale), making requantization bit-stable.
_SCALE_BITS = 17


@dataclass
class QuantTensor:
    name: str
    shape: tuple
    scale: float
    values: np.ndarray
    group: Group = Group.FC


@dataclass
class Checkpoint:
    config_hash: int
    tensors: list
    format_version: int = FORMAT_VERSION
    has_optimizer_state: bool = False


def _round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _scale_for(max_abs: float) -> float:
    if max_abs == 0.0:
        return 1.0
    mant, exp = np.frexp(max_abs / QMAX)
    mant = np.ceil(mant * 2.0**_SCALE_BITS) / 2.0**_SCALE_BITS
    return float(np.ldexp(mant, exp))


def quantize_tensor(t, name: str = "", group: Group = Group.FC) -> QuantTensor:
    """Symmetric int8 quantization: ``q = round(t / scale)``, ``scale ~ max|t| / 127``.

    Ties round away from zero and ``q`` is clamped to ``[-127, 127]``. An
    all-zero tensor gets scale 1.
    """
    t = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise NonFinite(f"tensor {name!r} has non-finite entries")
    max_abs = float(np.max(np.abs(t))) if t.size else 0.0
    scale = _scale_for(max_abs)
    q = np.clip(_round_half_away(t / scale), -QMAX, QMAX).astype(np.int8)
    return QuantTensor(name, tuple(t.shape), scale, q, Group(group))


def dequantize_tensor(qt: QuantTensor) -> np.ndarray:
    return qt.values.astype(np.float64) * qt.scale


def to_checkpoint(params: ParamSet) -> Checkpoint:
    tensors = [quantize_tensor(t, n, params.groups[n]) for n, t in params.tensors.items()]
    return Checkpoint(params.config.digest(), tensors)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    if not ckpt.tensors:
        raise CheckpointError("refusing to write a checkpoint with no tensors")
    out = bytearray(MAGIC)
    out += struct.pack("<HQI", ckpt.format_version, ckpt.config_hash, len(ckpt.tensors))
    for qt in ckpt.tensors:
        name = qt.name.encode("utf-8")
        out += struct.pack("<H", len(name)) + name
        out += struct.pack("<BB", _GROUP_TAGS[qt.group], len(qt.shape))
        out += struct.pack(f"<{len(qt.shape)}I", *qt.shape)
        out += struct.pack("<f", qt.scale)
        out += np.ascontiguousarray(qt.values, dtype=np.int8).tobytes()
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFile(f"checkpoint ends at byte {len(self.data)}, needed {self.pos + n}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes, expected_hash: int | None = None) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise BadMagic("not an EPCK checkpoint")
    (version,) = r.unpack("<H")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    config_hash, count = r.unpack("<QI")
    if expected_hash is not None and config_hash != expected_hash:
        raise ConfigMismatch(f"checkpoint config hash {config_hash:#018x} != expected {expected_hash:#018x}")
    tensors = []
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        tag, rank = r.unpack("<BB")
        shape = r.unpack(f"<{rank}I")
        (scale,) = r.unpack("<f")
        n = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(r.take(n), dtype=np.int8).reshape(shape).copy()
        if tag not in _TAG_GROUPS:
            raise CorruptFile(f"tensor {name!r} has unknown group tag {tag}")
        tensors.append(QuantTensor(name, tuple(shape), float(scale), values, _TAG_GROUPS[tag]))
    body_end = r.pos
    (crc,) = r.unpack("<I")
    if r.pos != len(data):
        raise CorruptFile(f"{len(data) - r.pos} trailing bytes after checksum")
    if zlib.crc32(data[:body_end]) != crc:
        raise CorruptFile("checksum mismatch")
    return Checkpoint(config_hash, tensors, version)


def save_checkpoint(params: ParamSet, path) -> None:
    """Quantize ``params`` and write them atomically to ``path``."""
    if len(params) == 0:
        raise CheckpointError("refusing to write a checkpoint with no tensors")
    data = encode_checkpoint(to_checkpoint(params))
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        Path(tmp).unlink(missing_ok=True)
        raise OSError(exc.errno, f"could not write checkpoint {path}: {exc.strerror}") from exc


def load_checkpoint(path, expected_config: ModelConfig, dtype=np.float32) -> ParamSet:
    """Read, verify and dequantize a checkpoint into a fresh ParamSet."""
    path = Path(path)
    ckpt = decode_checkpoint(path.read_bytes(), expected_config.digest())
    layout = param_layout(expected_config)
    got = [(qt.name, qt.shape, qt.group) for qt in ckpt.tensors]
    if got != [(n, tuple(s), g) for n, s, g in layout]:
        raise ConfigMismatch(f"{path}: tensor layout does not match the expected model configuration")
    tensors = {qt.name: dequantize_tensor(qt).astype(dtype) for qt in ckpt.tensors}
    groups = {qt.name: qt.group for qt in ckpt.tensors}
    return ParamSet(expected_config, tensors, groups)
