"""Line protocol shared by robots and the model server.

    STATE <ver> <id> <tick> <x> <y>
    GET MODEL [<ver>]
    MODEL <ver> <len> <crc>   followed by <len> raw bytes

Integers are unsigned decimal ASCII without leading zeros (except ``0``).
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import BinaryIO, Optional, Union

from ..errors import DmssdError

PROTOCOL_VERSION = 1
MAX_LINE = 256


class ProtocolError(DmssdError, ValueError):
    pass


class ChecksumError(ProtocolError):
    pass


@dataclass(frozen=True)
class StateMessage:
    robot_id: int
    tick: int
    x: int
    y: int
    version: int = PROTOCOL_VERSION

    @property
    def cell(self) -> tuple[int, int]:
        return (self.x, self.y)


@dataclass(frozen=True)
class GetModel:
    version: Optional[int] = None


@dataclass(frozen=True)
class ModelAnnouncement:
    version: int
    payload: bytes
    checksum: Optional[int] = None

    def __post_init__(self):
        if self.checksum is None:
            object.__setattr__(self, "checksum", zlib.crc32(self.payload))

    @property
    def length(self) -> int:
        return len(self.payload)

    @property
    def valid(self) -> bool:
        return zlib.crc32(self.payload) == self.checksum


Message = Union[StateMessage, GetModel, ModelAnnouncement]


def _int(tok: bytes) -> int:
    if not tok.isdigit() or (len(tok) > 1 and tok[:1] == b"0"):
        raise ProtocolError(f"bad integer field {tok!r}")
    return int(tok)


def _check(v: int) -> int:
    if not isinstance(v, int) or isinstance(v, bool) or v < 0:
        raise ProtocolError(f"fields must be non-negative integers, got {v!r}")
    return v


def encode(msg: Message) -> bytes:
    if isinstance(msg, StateMessage):
        fields = (msg.version, msg.robot_id, msg.tick, msg.x, msg.y)
        return b"STATE " + b" ".join(str(_check(f)).encode() for f in fields) + b"\n"
    if isinstance(msg, GetModel):
        if msg.version is None:
            return b"GET MODEL\n"
        return b"GET MODEL %d\n" % _check(msg.version)
    if isinstance(msg, ModelAnnouncement):
        head = b"MODEL %d %d %d\n" % (_check(msg.version), len(msg.payload), _check(msg.checksum))
        return head + msg.payload
    raise ProtocolError(f"cannot encode {type(msg).__name__}")


def _parse_header(line: bytes):
    if not line.endswith(b"\n"):
        raise ProtocolError("message must end with a newline")
    parts = line[:-1].split(b" ")
    verb = parts[0]
    if verb == b"STATE":
        if len(parts) != 6:
            raise ProtocolError("STATE takes 5 fields")
        ver, rid, tick, x, y = (_int(p) for p in parts[1:])
        if ver != PROTOCOL_VERSION:
            raise ProtocolError(f"unsupported protocol version {ver}")
        return StateMessage(rid, tick, x, y, ver)
    if verb == b"GET":
        if len(parts) not in (2, 3) or parts[1] != b"MODEL":
            raise ProtocolError("expected GET MODEL [<ver>]")
        return GetModel(_int(parts[2]) if len(parts) == 3 else None)
    if verb == b"MODEL":
        if len(parts) != 4:
            raise ProtocolError("MODEL takes 3 fields")
        return tuple(_int(p) for p in parts[1:])
    raise ProtocolError(f"unknown verb {verb[:16]!r}")


def decode(data: bytes, verify: bool = True) -> Message:
    """Decode exactly one complete message."""
    nl = data.find(b"\n")
    if nl < 0 or nl >= MAX_LINE:
        raise ProtocolError("missing or overlong header line")
    head = _parse_header(data[:nl + 1])
    rest = data[nl + 1:]
    if isinstance(head, tuple):
        ver, length, crc = head
        if len(rest) != length:
            raise ProtocolError(f"MODEL payload is {len(rest)} bytes, header says {length}")
        return _announcement(ver, rest, crc, verify)
    if rest:
        raise ProtocolError("trailing bytes after message")
    return head


def _announcement(ver: int, payload: bytes, crc: int, verify: bool) -> ModelAnnouncement:
    ann = ModelAnnouncement(ver, payload, crc)
    if verify and not ann.valid:
        raise ChecksumError(f"model v{ver} checksum mismatch")
    return ann


def read_message(stream: BinaryIO, verify: bool = True) -> Message:
    """Read one message from a buffered byte stream (e.g. ``socket.makefile('rb')``)."""
    line = stream.readline(MAX_LINE)
    if not line:
        raise EOFError("connection closed")
    head = _parse_header(line)
    if not isinstance(head, tuple):
        return head
    ver, length, crc = head
    payload = stream.read(length)
    if len(payload) != length:
        raise ProtocolError("connection closed mid-payload")
    return _announcement(ver, payload, crc, verify)
