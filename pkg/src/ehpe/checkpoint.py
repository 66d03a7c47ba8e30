"""Binary checkpoint format shared by both stages.

Layout (all little-endian)::

    magic      7 bytes  b"EHPECP1"
    version    u16
    stage      2 bytes  b"TW" | b"PG"
    meta_len   u32, then meta_len bytes of UTF-8 JSON (sorted keys)
    n_params   u32
    n_params records:
        name_len u16, name bytes (UTF-8)
        rank     u8, then rank x u32 dims
        data     prod(dims) x f8
        frozen   u8 (0 or 1)

The JSON block carries the model config; PG checkpoints add the SHA-256 of
the TW checkpoint they were trained on. Bytes are a pure function of the
inputs, so identical training runs produce identical files.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"EHPECP1"
VERSION = 1
STAGES = ("TW", "PG")
_HEAD = struct.Struct("<7sH2sI")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    stage: str
    metadata: dict
    params: dict[str, np.ndarray]
    frozen: dict[str, bool] = field(default_factory=dict)
    sha256: str | None = None   # set on load; not serialised

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        """Parameters under ``prefix`` with the prefix stripped."""
        n = len(prefix)
        return {k[n:]: v for k, v in self.params.items() if k.startswith(prefix)}


def to_bytes(ckpt: Checkpoint) -> bytes:
    if ckpt.stage not in STAGES:
        raise CheckpointError(f"unknown stage tag {ckpt.stage!r}")
    meta = json.dumps(ckpt.metadata, sort_keys=True, separators=(",", ":")).encode()
    out = [_HEAD.pack(MAGIC, VERSION, ckpt.stage.encode(), len(meta)), meta,
           struct.pack("<I", len(ckpt.params))]
    for name, arr in ckpt.params.items():
        arr = np.array(arr, dtype="<f8", order="C")  # keeps 0-d shape
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes())
        out.append(struct.pack("<B", int(bool(ckpt.frozen.get(name, False)))))
    return b"".join(out)


def from_bytes(buf: bytes) -> Checkpoint:
    try:
        magic, version, stage, mlen = _HEAD.unpack_from(buf, 0)
    except struct.error as e:
        raise CheckpointError("truncated checkpoint header") from e
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    stage = stage.decode(errors="replace")
    if stage not in STAGES:
        raise CheckpointError(f"unknown stage tag {stage!r}")
    pos = _HEAD.size
    try:
        metadata = json.loads(buf[pos:pos + mlen].decode())
        pos += mlen
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        params, frozen = {}, {}
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + ln].decode()
            pos += ln
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64)) * 8
            if pos + size + 1 > len(buf):
                raise CheckpointError(f"truncated record {name!r}")
            params[name] = np.frombuffer(buf, dtype="<f8", count=size // 8, offset=pos).reshape(dims).copy()
            pos += size
            frozen[name] = bool(buf[pos])
            pos += 1
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint: {e}") from e
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last record")
    return Checkpoint(stage, metadata, params, frozen)


def sha256_bytes(buf: bytes) -> str:
    return hashlib.sha256(buf).hexdigest()


def file_sha256(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def save(ckpt: Checkpoint, path) -> str:
    """Write and return the content hash."""
    buf = to_bytes(ckpt)
    try:
        Path(path).write_bytes(buf)
    except OSError as e:
        raise OSError(f"cannot write checkpoint {path}: {e.strerror}") from e
    return sha256_bytes(buf)


def load(path, expect_stage: str | None = None) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise OSError(f"cannot read checkpoint {path}: {e.strerror}") from e
    ckpt = from_bytes(buf)
    ckpt.sha256 = sha256_bytes(buf)
    if expect_stage is not None and ckpt.stage != expect_stage:
        raise CheckpointError(f"{path}: expected a {expect_stage} checkpoint, found stage {ckpt.stage}")
    return ckpt
