"""Canonical binary encoding primitives.

Fixed field order, big-endian integers, length-prefixed byte strings.  This
encoding is the hashing preimage and the wire/disk format, so there is exactly
one valid byte representation for every value.
"""

from __future__ import annotations

import struct


class DecodeError(ValueError):
    pass


class Writer:
    __slots__ = ("_parts",)

    def __init__(self):
        self._parts: list[bytes] = []

    def u8(self, v: int):
        self._parts.append(struct.pack(">B", v))

    def u16(self, v: int):
        self._parts.append(struct.pack(">H", v))

    def u32(self, v: int):
        self._parts.append(struct.pack(">I", v))

    def u64(self, v: int):
        self._parts.append(struct.pack(">Q", v))

    def raw(self, b: bytes):
        self._parts.append(b)

    def blob16(self, b: bytes):
        """u16 length prefix + bytes (for keys, signatures, metadata)."""
        if len(b) > 0xFFFF:
            raise ValueError("blob16 too long")
        self._parts.append(struct.pack(">H", len(b)))
        self._parts.append(b)

    def blob32(self, b: bytes):
        if len(b) > 0xFFFFFFFF:
            raise ValueError("blob32 too long")
        self._parts.append(struct.pack(">I", len(b)))
        self._parts.append(b)

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    __slots__ = ("data", "pos")

    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DecodeError(f"truncated: need {n} bytes at offset {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self._take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self._take(8))[0]

    def raw(self, n: int) -> bytes:
        return self._take(n)

    def blob16(self) -> bytes:
        return self._take(self.u16())

    def blob32(self) -> bytes:
        return self._take(self.u32())

    def done(self) -> bool:
        return self.pos == len(self.data)

    def expect_done(self):
        if not self.done():
            raise DecodeError(f"{len(self.data) - self.pos} trailing bytes")
