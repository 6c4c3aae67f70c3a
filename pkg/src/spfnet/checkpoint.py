"""Binary checkpoint format (little-endian).

::

    magic      8 bytes   b"SPFCKPT\\0"
    version    u32       FORMAT_VERSION
    config     u32 length + UTF-8 key=value text (model keys, then meta.* keys)
    tensors    u32 count, then per tensor:
                 u16 name length + UTF-8 name, u8 rank, rank x u32 dims,
                 float32 data, row-major
    optimizer  u8 flag; when 1: u32 step, then a tensor table of
                 "m/<param>" and "v/<param>" moments
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from .autodiff import Tensor
from .config import ConfigError, config_from_kv, config_to_kv, format_kv, parse_kv
from .model import Checkpoint, init_params
from .nadam import NadamState

MAGIC = b"SPFCKPT\0"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    code = "checkpoint"


class BadMagicError(CheckpointError):
    code = "bad-magic"


class VersionMismatchError(CheckpointError):
    code = "version-mismatch"


class TruncatedError(CheckpointError):
    code = "truncated"


class CorruptCheckpointError(CheckpointError):
    code = "corrupt"


def _write_tensors(out: BinaryIO, tensors: Mapping[str, np.ndarray]) -> None:
    out.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(arr.tobytes(order="C"))


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    blob = format_kv({**config_to_kv(ckpt.config), **ckpt.metadata}).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    _write_tensors(buf, {k: v.data for k, v in ckpt.params.items()})
    if ckpt.opt_state is None:
        buf.write(struct.pack("<B", 0))
    else:
        st = ckpt.opt_state
        buf.write(struct.pack("<B", 1))
        buf.write(struct.pack("<I", st.t))
        moments = {f"m/{k}": v for k, v in st.m.items()}
        moments.update({f"v/{k}": v for k, v in st.v.items()})
        _write_tensors(buf, moments)
    return buf.getvalue()


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"checkpoint truncated while reading {what} "
                                 f"(need {n} bytes at offset {self.pos}, file has {len(self.data)})")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def tensors(self, section: str) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I", f"{section} count")
        out = {}
        for i in range(count):
            (name_len,) = self.unpack("<H", f"{section} entry {i} name length")
            try:
                name = self.take(name_len, f"{section} entry {i} name").decode("utf-8")
            except UnicodeDecodeError as exc:
                raise CorruptCheckpointError(f"{section} entry {i}: name is not UTF-8") from exc
            (rank,) = self.unpack("<B", f"tensor {name!r} rank")
            dims = self.unpack(f"<{rank}I", f"tensor {name!r} dims")
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            raw = self.take(4 * n, f"tensor {name!r} data")
            out[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
        return out


def decode_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise BadMagicError("bad magic: not an SPF checkpoint")
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    (blob_len,) = r.unpack("<I", "config length")
    try:
        pairs = parse_kv(r.take(blob_len, "config blob").decode("utf-8"))
        config = config_from_kv(pairs).validate()
    except (UnicodeDecodeError, ConfigError) as exc:
        raise CorruptCheckpointError(f"bad config blob: {exc}") from exc
    metadata = {k: v for k, v in pairs.items() if k.startswith("meta.")}
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in r.tensors("tensor table").items()}
    (flag,) = r.unpack("<B", "optimizer flag")
    opt = None
    if flag == 1:
        (step,) = r.unpack("<I", "optimizer step")
        moments = r.tensors("optimizer table")
        opt = NadamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps, t=step)
        for name, arr in moments.items():
            kind, _, pname = name.partition("/")
            (opt.m if kind == "m" else opt.v)[pname] = arr.astype(np.float64)
    elif flag != 0:
        raise CorruptCheckpointError(f"optimizer flag must be 0 or 1, got {flag}")
    if r.pos != len(data):
        raise CorruptCheckpointError(f"{len(data) - r.pos} trailing bytes after checkpoint")
    expected = {k: v.shape for k, v in init_params(config).items()}
    found = {k: v.shape for k, v in params.items()}
    if expected != found:
        missing = sorted(set(expected) - set(found))
        extra = sorted(set(found) - set(expected))
        wrong = sorted(k for k in set(expected) & set(found) if expected[k] != found[k])
        raise CorruptCheckpointError(f"tensor table does not match config: missing={missing[:3]} "
                                     f"unexpected={extra[:3]} wrong_shape={wrong[:3]}")
    return Checkpoint(config, params, opt, metadata)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
