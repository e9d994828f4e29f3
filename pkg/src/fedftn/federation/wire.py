"""Binary message and checkpoint format.

Layout (little endian)::

    "FFTN" | version u16 | kind u8 | site_id u32 | global_epoch u32 | entry_count u32
    entry*: name_len u16 | name (UTF-8) | rank u8 | dims u32 * rank | f32 payload

Entries are written in lexicographic name order, which the decoder enforces.
Checkpoints use the same layout with kind 0xFF.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

import numpy as np

from ..autodiff import Tensor
from ..errors import DecodeError, ShapeError
from ..params import ParamTree

MAGIC = b"FFTN"
VERSION = 1
MAX_RANK = 8

_HEADER = struct.Struct("<4sHBIII")
_U16 = struct.Struct("<H")
_U8 = struct.Struct("<B")


class MessageKind(enum.IntEnum):
    REGISTER = 0
    DEPLOY = 1
    UPLOAD = 2
    ACK = 3
    FINISH = 4
    CHECKPOINT = 0xFF


@dataclass
class Message:
    kind: MessageKind
    site_id: int = 0
    global_epoch: int = 0
    payload: ParamTree = field(default_factory=ParamTree)
    version: int = VERSION

    def names(self) -> list:
        return list(self.payload)


def _encode_entry(name: str, data: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    if not raw or len(raw) > 0xFFFF or not name.isprintable():
        raise ShapeError(f"parameter name {name!r} cannot be encoded")
    if data.ndim > MAX_RANK or any(s == 0 for s in data.shape):
        raise ShapeError(f"{name!r}: shape {data.shape} cannot be encoded")
    parts = [_U16.pack(len(raw)), raw, _U8.pack(data.ndim)]
    parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
    parts.append(np.ascontiguousarray(data, dtype="<f4").tobytes())
    return b"".join(parts)


def encode_message(msg: Message) -> bytes:
    names = list(msg.payload)
    head = _HEADER.pack(MAGIC, msg.version, int(msg.kind), msg.site_id, msg.global_epoch, len(names))
    return head + b"".join(_encode_entry(n, msg.payload[n].data) for n in names)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = memoryview(blob)
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        if self.pos + n > len(self.blob):
            raise DecodeError(f"truncated {what}: need {n} bytes, {len(self.blob) - self.pos} left",
                              self.pos)
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, st: struct.Struct, what: str) -> tuple:
        return st.unpack(self.take(st.size, what))


def decode_message(blob: bytes) -> Message:
    r = _Reader(blob)
    magic, version, kind, site_id, epoch, count = r.unpack(_HEADER, "header")
    if magic != MAGIC:
        raise DecodeError(f"bad magic {bytes(magic)!r}", 0)
    if version != VERSION:
        raise DecodeError(f"unsupported version {version}", 4)
    try:
        kind = MessageKind(kind)
    except ValueError:
        raise DecodeError(f"unknown message kind {kind}", 6) from None

    tree = ParamTree()
    previous = None
    for _ in range(count):
        start = r.pos
        (name_len,) = r.unpack(_U16, "name length")
        if name_len == 0:
            raise DecodeError("empty parameter name", start)
        try:
            name = str(r.take(name_len, "name"), "utf-8")
        except UnicodeDecodeError:
            raise DecodeError("parameter name is not valid UTF-8", start + 2) from None
        if not name.isprintable():
            raise DecodeError(f"parameter name {name!r} has control characters", start + 2)
        if previous is not None and name <= previous:
            raise DecodeError(f"entry {name!r} is duplicated or out of order", start)
        rank_at = r.pos
        (rank,) = r.unpack(_U8, "rank")
        if rank > MAX_RANK:
            raise DecodeError(f"rank {rank} exceeds {MAX_RANK}", rank_at)
        dims_at = r.pos
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, "dims"))
        if any(s == 0 for s in dims):
            raise DecodeError(f"zero-sized dimension in {dims}", dims_at)
        numel = int(np.prod(dims, dtype=np.int64))
        if numel * 4 > len(r.blob) - r.pos:
            raise DecodeError(f"truncated payload for {name!r}", r.pos)
        data = np.frombuffer(r.take(4 * numel, "payload"), dtype="<f4").astype(np.float32)
        tree[name] = Tensor(data.reshape(dims))
        previous = name
    if r.pos != len(r.blob):
        raise DecodeError(f"{len(r.blob) - r.pos} trailing bytes", r.pos)
    return Message(kind, site_id, epoch, tree, version)


def serialize_tree(tree: ParamTree, kind: MessageKind = MessageKind.CHECKPOINT,
                   site_id: int = 0, global_epoch: int = 0) -> bytes:
    return encode_message(Message(kind, site_id, global_epoch, tree))


def deserialize_tree(blob: bytes) -> ParamTree:
    return decode_message(blob).payload


def save_checkpoint(path, tree: ParamTree, site_id: int = 0, global_epoch: int = 0) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_tree(tree, MessageKind.CHECKPOINT, site_id, global_epoch))


def load_checkpoint(path) -> Message:
    with open(path, "rb") as fh:
        msg = decode_message(fh.read())
    if msg.kind is not MessageKind.CHECKPOINT:
        raise DecodeError(f"expected a checkpoint, found a {msg.kind.name} message", 6)
    return msg
