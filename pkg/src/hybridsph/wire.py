"""Binary codecs for every value that crosses the host/device boundary.

All multi-byte values are little-endian and packed with no padding: a record
of two 4-byte fields occupies exactly 8 bytes on the wire. Both sides agree
on the layout ahead of time, so no type tags or field descriptors are
emitted inside a value.

A codec is any object with three methods:

    serialize(value, writer) -> int   # bytes emitted
    deserialize(reader) -> value
    size(value) -> int                # exact byte count serialize will emit

``deserialize(serialize(v))`` must reproduce ``v`` bitwise (including NaN
payloads and signed zeros), and ``size(v)`` must equal the emitted count for
every value.
"""

from __future__ import annotations

import struct
from typing import Any, Protocol

_U8 = struct.Struct("<B")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_I32 = struct.Struct("<i")
_I64 = struct.Struct("<q")
_F64 = struct.Struct("<d")


class CapacityError(Exception):
    """Write would exceed a fixed-capacity region."""


class TruncatedInputError(Exception):
    """Read past the end of the source region."""


class ByteWriter:
    """Append-only cursor over a byte region.

    With ``capacity=None`` the destination grows as needed; otherwise any
    write that would push the cursor past ``capacity`` raises
    :class:`CapacityError` without emitting anything (no silent truncation,
    no partial writes).

    A writer must not be used from two concurrent contexts.
    """

    __slots__ = ("data", "capacity")

    def __init__(self, data: bytearray | None = None, capacity: int | None = None):
        self.data = bytearray() if data is None else data
        self.capacity = capacity

    @property
    def position(self) -> int:
        return len(self.data)

    def _check(self, nbytes: int) -> None:
        if self.capacity is not None and len(self.data) + nbytes > self.capacity:
            raise CapacityError(
                f"write of {nbytes} bytes at offset {len(self.data)} exceeds "
                f"capacity {self.capacity}"
            )

    def write_bytes(self, b: bytes | bytearray | memoryview) -> int:
        self._check(len(b))
        self.data += b
        return len(b)

    def write_u8(self, v: int) -> int:
        return self.write_bytes(_U8.pack(v))

    def write_u32(self, v: int) -> int:
        return self.write_bytes(_U32.pack(v))

    def write_u64(self, v: int) -> int:
        return self.write_bytes(_U64.pack(v))

    def write_i32(self, v: int) -> int:
        return self.write_bytes(_I32.pack(v))

    def write_i64(self, v: int) -> int:
        return self.write_bytes(_I64.pack(v))

    def write_f64(self, v: float) -> int:
        return self.write_bytes(_F64.pack(v))

    def write_str(self, s: str) -> int:
        raw = s.encode("utf-8")
        return self.write_u32(len(raw)) + self.write_bytes(raw)


class ByteReader:
    """Forward-only cursor over a byte region.

    Every read consumes exactly the byte count the matching serialize
    produced; reading past the end raises :class:`TruncatedInputError`.

    A reader must not be used from two concurrent contexts.
    """

    __slots__ = ("data", "pos")

    def __init__(self, data: bytes | bytearray | memoryview, pos: int = 0):
        self.data = data
        self.pos = pos

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos

    def _take(self, nbytes: int) -> int:
        start = self.pos
        if start + nbytes > len(self.data):
            raise TruncatedInputError(
                f"need {nbytes} bytes at offset {start}, only "
                f"{len(self.data) - start} remain"
            )
        self.pos = start + nbytes
        return start

    def read_bytes(self, nbytes: int) -> bytes:
        start = self._take(nbytes)
        return bytes(self.data[start : start + nbytes])

    def read_u8(self) -> int:
        return _U8.unpack_from(self.data, self._take(1))[0]

    def read_u32(self) -> int:
        return _U32.unpack_from(self.data, self._take(4))[0]

    def read_u64(self) -> int:
        return _U64.unpack_from(self.data, self._take(8))[0]

    def read_i32(self) -> int:
        return _I32.unpack_from(self.data, self._take(4))[0]

    def read_i64(self) -> int:
        return _I64.unpack_from(self.data, self._take(8))[0]

    def read_f64(self) -> float:
        return _F64.unpack_from(self.data, self._take(8))[0]

    def read_str(self) -> str:
        n = self.read_u32()
        return self.read_bytes(n).decode("utf-8")


class Codec(Protocol):
    def serialize(self, value: Any, writer: ByteWriter) -> int: ...

    def deserialize(self, reader: ByteReader) -> Any: ...

    def size(self, value: Any) -> int: ...


class StructCodec:
    """Codec for a flat value backed by a single ``struct`` format."""

    __slots__ = ("_struct",)

    def __init__(self, fmt: str):
        self._struct = struct.Struct(fmt)

    def serialize(self, value: Any, writer: ByteWriter) -> int:
        return writer.write_bytes(self._struct.pack(value))

    def deserialize(self, reader: ByteReader) -> Any:
        return self._struct.unpack(reader.read_bytes(self._struct.size))[0]

    def size(self, value: Any) -> int:
        return self._struct.size


I32_CODEC = StructCodec("<i")
I64_CODEC = StructCodec("<q")
F64_CODEC = StructCodec("<d")


# ---------------------------------------------------------------------------
# Functor registry
#
# A functor is the serializable action shipped to devices. Every functor
# class registers a codec under a stable wire name; the device looks the
# codec up by that name to rebuild its own copy of the functor (and whatever
# shared state it carries). Both processes must import the registering
# module, which is why the device worker imports hybridsph.functors at
# startup.
# ---------------------------------------------------------------------------

_FUNCTOR_CODECS: dict[str, Codec] = {}


def register_functor(name: str, codec: Codec) -> None:
    existing = _FUNCTOR_CODECS.get(name)
    if existing is not None and existing is not codec:
        raise ValueError(f"functor name already registered: {name!r}")
    _FUNCTOR_CODECS[name] = codec


def functor_codec(name: str) -> Codec:
    try:
        return _FUNCTOR_CODECS[name]
    except KeyError:
        raise KeyError(
            f"no functor codec registered under {name!r}; the module defining "
            "it must be imported on both host and device"
        ) from None


def encode_functor(functor: Any) -> bytes:
    """Serialize a registered functor to its wire bytes (name not included)."""
    codec = functor_codec(functor.wire_name)
    w = ByteWriter()
    codec.serialize(functor, w)
    return bytes(w.data)


def decode_functor(name: str, payload: bytes | memoryview) -> Any:
    return functor_codec(name).deserialize(ByteReader(payload))
