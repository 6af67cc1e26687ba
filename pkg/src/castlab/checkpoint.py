"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic        8 bytes   b"CASTCKPT"
    version      u32       FORMAT_VERSION
    spec digest  32 bytes  sha256 of the canonical model-spec JSON
    n_sections   u32
    section * n_sections:
        name_len u16, name (utf-8)
        kind     u8        0 = float64 array, 1 = packed bit array, 2 = utf-8 JSON
        ndim     u8, shape u64 * ndim
        length   u64, payload

Float arrays are ``<f8`` in C order.  Bit arrays are 0/1 masks packed with
``numpy.packbits(..., bitorder="little")``.  Section names are ``spec``,
``meta``, ``rng``, ``w/<param>``, ``mask/<layer>``, ``scale/<layer>``,
``m1/<param>``, ``m2/<param>`` (moments; step counters live in ``meta``).
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import ModelSpec
from .optim import MomentState

__all__ = ["Checkpoint", "CheckpointFormatError", "save_checkpoint", "load_checkpoint",
           "file_digest", "MAGIC", "FORMAT_VERSION"]

MAGIC = b"CASTCKPT"
FORMAT_VERSION = 1
_FLOAT, _BITS, _JSON = 0, 1, 2


class CheckpointFormatError(ValueError):
    """Unreadable checkpoint: wrong magic, unknown version, corrupt payload."""


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    masks: dict[str, np.ndarray] | None = None
    scaling: dict[str, np.ndarray] | None = None
    moments: dict[str, MomentState] = field(default_factory=dict)
    step: int = 0
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)

    @property
    def exported(self) -> bool:
        return bool(self.meta.get("exported", False))


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def spec_digest(spec: ModelSpec) -> bytes:
    return hashlib.sha256(_canonical(spec.to_dict())).digest()


def _section(buf: io.BytesIO, name: str, kind: int, shape: tuple[int, ...], payload: bytes) -> None:
    nb = name.encode()
    buf.write(struct.pack("<H", len(nb)))
    buf.write(nb)
    buf.write(struct.pack("<BB", kind, len(shape)))
    for n in shape:
        buf.write(struct.pack("<Q", n))
    buf.write(struct.pack("<Q", len(payload)))
    buf.write(payload)


def _float(buf, name, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    _section(buf, name, _FLOAT, arr.shape, arr.tobytes())


def _json(buf, name, obj):
    _section(buf, name, _JSON, (), _canonical(obj))


def to_bytes(ck: Checkpoint) -> bytes:
    body = io.BytesIO()
    count = 0

    def add(fn, *args):
        nonlocal count
        fn(body, *args)
        count += 1

    meta = dict(ck.meta)
    meta["step"] = ck.step
    meta["moment_steps"] = {k: s.t for k, s in ck.moments.items()}
    add(_json, "spec", ck.spec.to_dict())
    add(_json, "meta", meta)
    add(_json, "rng", ck.rng_state)
    for k, v in ck.params.items():
        add(_float, "w/" + k, v)
    for k, m in (ck.masks or {}).items():
        m = np.asarray(m)
        if not ((m == 0) | (m == 1)).all():
            raise ValueError(f"mask {k!r} is not binary")
        packed = np.packbits(m.astype(np.uint8).reshape(-1), bitorder="little")
        add(_section, "mask/" + k, _BITS, m.shape, packed.tobytes())
    for k, a in (ck.scaling or {}).items():
        add(_float, "scale/" + k, a)
    for k, s in ck.moments.items():
        add(_float, "m1/" + k, s.m)
        add(_float, "m2/" + k, s.v)
    head = MAGIC + struct.pack("<I", FORMAT_VERSION) + spec_digest(ck.spec) + struct.pack("<I", count)
    return head + body.getvalue()


def save_checkpoint(ck: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(ck))
    return path


def _read(fmt: str, raw: memoryview, pos: int):
    size = struct.calcsize(fmt)
    if pos + size > len(raw):
        raise CheckpointFormatError("truncated checkpoint")
    return struct.unpack_from(fmt, raw, pos), pos + size


def from_bytes(data: bytes) -> Checkpoint:
    raw = memoryview(data)
    if bytes(raw[:8]) != MAGIC:
        raise CheckpointFormatError("bad magic: not a checkpoint file")
    (version,), pos = _read("<I", raw, 8)
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    digest = bytes(raw[pos:pos + 32])
    pos += 32
    (count,), pos = _read("<I", raw, pos)
    sections = {}
    for _ in range(count):
        (nlen,), pos = _read("<H", raw, pos)
        name = bytes(raw[pos:pos + nlen]).decode()
        pos += nlen
        (kind, ndim), pos = _read("<BB", raw, pos)
        shape = []
        for _ in range(ndim):
            (n,), pos = _read("<Q", raw, pos)
            shape.append(n)
        (length,), pos = _read("<Q", raw, pos)
        if pos + length > len(raw):
            raise CheckpointFormatError(f"truncated section {name!r}")
        payload = bytes(raw[pos:pos + length])
        pos += length
        try:
            if kind == _FLOAT:
                val = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
            elif kind == _BITS:
                size = int(np.prod(shape)) if shape else 1
                bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), count=size, bitorder="little")
                val = bits.astype(np.float64).reshape(shape)
            elif kind == _JSON:
                val = json.loads(payload.decode())
            else:
                raise CheckpointFormatError(f"unknown section kind {kind}")
        except (ValueError, UnicodeDecodeError) as exc:
            raise CheckpointFormatError(f"corrupt section {name!r}: {exc}") from exc
        sections[name] = val
    if pos != len(raw):
        raise CheckpointFormatError("trailing bytes after last section")
    try:
        spec = ModelSpec.from_dict(sections["spec"])
        meta = dict(sections["meta"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"missing or invalid spec/meta: {exc}") from exc
    if spec_digest(spec) != digest:
        raise CheckpointFormatError("spec digest mismatch")

    def group(prefix):
        return {k[len(prefix):]: v for k, v in sections.items() if k.startswith(prefix)}

    m1, m2 = group("m1/"), group("m2/")
    steps = meta.pop("moment_steps", {})
    moments = {k: MomentState(m1[k], m2[k], int(steps.get(k, 0))) for k in m1}
    step = int(meta.pop("step", 0))
    masks = group("mask/") or None
    scaling = group("scale/") or None
    return Checkpoint(spec, group("w/"), masks, scaling, moments, step, sections.get("rng"), meta)


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
