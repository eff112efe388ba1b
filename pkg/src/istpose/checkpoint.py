"""Binary checkpoints: named float32 tensors, run config and optimizer state.

Layout (little endian)::

    "ISTC" | version u32 | arch hash (64 ascii hex) | meta length u32 | meta JSON
    entry count u32 | entries... | CRC32 u32 over everything before it

Each entry is ``name length u16 | name | ndim u8 | dims u32[ndim] | f32 payload``.
Adam moments are stored as entries prefixed with ``adam.m:`` and ``adam.v:``.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .model import ISTNet
from .prior_baseline import PriorNet
from .synthdata import ChecksumMismatch, FormatVersionMismatch, IoFailure
from .tensor_core import Adam

MAGIC = b"ISTC"
VERSION = 1
_HEAD = struct.Struct("<4sI64sI")
_M, _V = "adam.m:", "adam.v:"


class ConfigHashMismatch(ValueError):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    state: dict  # name -> float32 array
    epoch: int = 0  # number of completed epochs
    optimizer: Adam | None = None
    extra: dict | None = None

    @property
    def arch_hash(self) -> str:
        return self.config.arch_hash


def _entry(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    raw = name.encode()
    return (struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
            + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes())


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    meta = {"config": ckpt.config.to_dict(), "epoch": int(ckpt.epoch), "extra": ckpt.extra or {}}
    entries = [(k, v) for k, v in ckpt.state.items()]
    opt = ckpt.optimizer
    if opt is not None:
        meta["optimizer"] = {"learning_rate": opt.learning_rate, "beta1": opt.beta1,
                             "beta2": opt.beta2, "eps": opt.eps,
                             "decay_interval": opt.decay_interval,
                             "decay_gamma": opt.decay_gamma, "step_count": opt.step_count}
        entries += [(_M + k, v) for k, v in opt.m.items()]
        entries += [(_V + k, v) for k, v in opt.v.items()]
    meta_raw = json.dumps(meta, sort_keys=True).encode()
    body = bytearray(_HEAD.pack(MAGIC, VERSION, ckpt.arch_hash.encode(), len(meta_raw)))
    body += meta_raw
    body += struct.pack("<I", len(entries))
    for name, arr in entries:
        body += _entry(name, arr)
    return bytes(body) + struct.pack("<I", zlib.crc32(body))


def parse_checkpoint(blob: bytes) -> Checkpoint:
    if blob[:4] != MAGIC:
        raise FormatVersionMismatch("not an ISTC checkpoint")
    if len(blob) < _HEAD.size + 8:
        raise ChecksumMismatch("checkpoint truncated inside the header")
    _, version, arch, meta_len = _HEAD.unpack_from(blob)
    if version != VERSION:
        raise FormatVersionMismatch(f"checkpoint version {version}, expected {VERSION}")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise ChecksumMismatch("checkpoint CRC32 mismatch")
    off = _HEAD.size
    meta = json.loads(blob[off:off + meta_len])
    off += meta_len
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", blob, off)
        name = blob[off + 2:off + 2 + n].decode()
        off += 2 + n
        (ndim,) = struct.unpack_from("<B", blob, off)
        shape = struct.unpack_from(f"<{ndim}I", blob, off + 1)
        off += 1 + 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(blob, "<f4", size, off).reshape(shape).copy()
        off += 4 * size
    if off != len(blob) - 4:
        raise ChecksumMismatch("trailing bytes after the last entry")
    cfg = RunConfig.from_dict(meta["config"])
    if cfg.arch_hash != arch.decode():
        raise ConfigHashMismatch("stored hash does not match the stored config")
    state = {k: v for k, v in tensors.items() if not k.startswith((_M, _V))}
    opt = None
    if "optimizer" in meta:
        opt = Adam(**meta["optimizer"])
        opt.m = {k[len(_M):]: v for k, v in tensors.items() if k.startswith(_M)}
        opt.v = {k[len(_V):]: v for k, v in tensors.items() if k.startswith(_V)}
    return Checkpoint(cfg, state, meta["epoch"], opt, meta.get("extra") or None)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(checkpoint_bytes(ckpt))
        tmp.replace(path)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load_checkpoint(path, expect: RunConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with ``expect`` the parameter layouts must agree."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    ckpt = parse_checkpoint(blob)
    if expect is not None and expect.arch_hash != ckpt.arch_hash:
        raise ConfigHashMismatch(f"checkpoint {ckpt.arch_hash[:12]} != config {expect.arch_hash[:12]}")
    return ckpt


def checkpoint_from_model(model, epoch: int = 0, opt: Adam | None = None,
                          extra: dict | None = None) -> Checkpoint:
    return Checkpoint(model.cfg, model.params.state(), epoch, opt, extra)


def model_from_checkpoint(ckpt: Checkpoint):
    """Rebuild the network described by the stored config and load its weights."""
    cls = PriorNet if ckpt.config.variant == "prior-case" else ISTNet
    model = cls(ckpt.config)
    model.params.load_state(ckpt.state)
    return model
