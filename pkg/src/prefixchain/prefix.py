"""IP prefix algebra: parsing, containment, splitting, merging and stake units.

Prefixes are the coins of the ledger.  A prefix is canonical (all bits below
the mask are zero), belongs to one family, and is worth 2**(U - len) stake
units where U is 32 for v4 and 64 for v6.  v6 prefixes are capped at /64 so
every stake sum stays exact in integer arithmetic.
"""

from __future__ import annotations

import ipaddress
from dataclasses import dataclass
from enum import IntEnum
from functools import reduce


class PrefixError(ValueError):
    pass


class MalformedText(PrefixError):
    pass


class HostBitsSet(PrefixError):
    pass


class LenOutOfRange(PrefixError):
    pass


class NotHeld(PrefixError):
    pass


class PartialOverlap(PrefixError):
    pass


class OverlapExisting(PrefixError):
    pass


class Family(IntEnum):
    V4 = 4
    V6 = 6

    @property
    def width(self) -> int:
        """Address width in bits."""
        return 32 if self is Family.V4 else 128

    @property
    def maxlen(self) -> int:
        """Longest prefix length this ledger allows for the family."""
        return 32 if self is Family.V4 else 64

    @property
    def unit_exponent(self) -> int:
        """Stake unit: one /32 for v4, one /64 for v6."""
        return 32 if self is Family.V4 else 64


@dataclass(frozen=True)
class Prefix:
    """A canonical CIDR block: network address `bits` and mask length `len`."""

    family: Family
    bits: int
    len: int

    def __post_init__(self):
        if not 0 <= self.len <= self.family.maxlen:
            raise LenOutOfRange(f"/{self.len} out of range for {self.family.name}")
        if self.bits & ~self._mask():
            raise HostBitsSet(f"host bits set below /{self.len}")
        if not 0 <= self.bits < (1 << self.family.width):
            raise MalformedText("address out of range")

    def _mask(self) -> int:
        w = self.family.width
        return ((1 << self.len) - 1) << (w - self.len) if self.len else 0

    @property
    def sort_key(self) -> tuple:
        return (int(self.family), self.bits, self.len)

    @property
    def stake_units(self) -> int:
        return 1 << (self.family.unit_exponent - self.len)

    @property
    def range(self) -> tuple[int, int]:
        """Half-open address interval [start, end)."""
        return self.bits, self.bits + (1 << (self.family.width - self.len))

    def contains(self, inner: "Prefix") -> bool:
        if self.family is not inner.family or self.len > inner.len:
            return False
        shift = self.family.width - self.len
        return (inner.bits >> shift) == (self.bits >> shift) if self.len else True

    def overlaps(self, other: "Prefix") -> bool:
        return self.contains(other) or other.contains(self)

    def child(self, high_bit: int) -> "Prefix":
        """One of the two halves of this prefix (high_bit selects which)."""
        if self.len >= self.family.maxlen:
            raise LenOutOfRange("cannot split beyond family maxlen")
        nl = self.len + 1
        bits = self.bits | (high_bit << (self.family.width - nl))
        return Prefix(self.family, bits, nl)

    def sibling(self) -> "Prefix":
        if self.len == 0:
            raise PrefixError("/0 has no sibling")
        return Prefix(self.family, self.bits ^ (1 << (self.family.width - self.len)), self.len)

    def parent(self) -> "Prefix":
        if self.len == 0:
            raise PrefixError("/0 has no parent")
        nl = self.len - 1
        w = self.family.width
        mask = ((1 << nl) - 1) << (w - nl) if nl else 0
        return Prefix(self.family, self.bits & mask, nl)

    def truncate(self, length: int) -> "Prefix":
        """The enclosing prefix of the given (shorter) length."""
        w = self.family.width
        mask = ((1 << length) - 1) << (w - length) if length else 0
        return Prefix(self.family, self.bits & mask, length)

    def __str__(self) -> str:
        if self.family is Family.V4:
            addr = ipaddress.IPv4Address(self.bits)
        else:
            addr = ipaddress.IPv6Address(self.bits)
        return f"{addr}/{self.len}"

    def encode(self) -> bytes:
        """Canonical wire form: family byte, len byte, ceil(len/8) address bytes."""
        nbytes = (self.len + 7) // 8
        addr = self.bits.to_bytes(self.family.width // 8, "big")[:nbytes]
        return bytes([int(self.family), self.len]) + addr

    @classmethod
    def decode(cls, data: bytes, offset: int = 0) -> tuple["Prefix", int]:
        if len(data) < offset + 2:
            raise MalformedText("truncated prefix encoding")
        try:
            family = Family(data[offset])
        except ValueError:
            raise MalformedText(f"bad family byte {data[offset]}") from None
        plen = data[offset + 1]
        nbytes = (plen + 7) // 8
        body = data[offset + 2 : offset + 2 + nbytes]
        if len(body) != nbytes:
            raise MalformedText("truncated prefix address bytes")
        bits = int.from_bytes(body + b"\x00" * (family.width // 8 - nbytes), "big")
        return cls(family, bits, plen), offset + 2 + nbytes


def parse_prefix(text: str) -> Prefix:
    """Parse "<address>/<len>" in dotted-quad or colon-hex notation.

    Rejects non-canonical input (host bits set below the mask).
    """
    if not isinstance(text, str) or text.count("/") != 1:
        raise MalformedText(f"expected <address>/<len>: {text!r}")
    addr_part, _, len_part = text.partition("/")
    try:
        addr = ipaddress.ip_address(addr_part)
    except ValueError:
        raise MalformedText(f"bad address: {addr_part!r}") from None
    try:
        plen = int(len_part)
    except ValueError:
        raise MalformedText(f"bad prefix length: {len_part!r}") from None
    family = Family.V4 if addr.version == 4 else Family.V6
    if not 0 <= plen <= family.maxlen:
        raise LenOutOfRange(f"/{plen} out of range for {family.name}")
    return Prefix(family, int(addr), plen)


@dataclass(frozen=True)
class StakeAmount:
    """Address-space weight in family units (/32 for v4, /64 for v6)."""

    units: int
    family: Family

    def __add__(self, other: "StakeAmount") -> "StakeAmount":
        if self.family is not other.family:
            raise ValueError("cannot add stake across families")
        return StakeAmount(self.units + other.units, self.family)

    def __int__(self) -> int:
        return self.units


def complement_within(container: Prefix, removed: Prefix) -> list[Prefix]:
    """Minimal sibling prefixes covering container minus removed.

    removed must be contained in container; result plus removed tiles container.
    """
    if not container.contains(removed):
        raise NotHeld(f"{removed} not contained in {container}")
    pieces = []
    cur = removed
    while cur.len > container.len:
        pieces.append(cur.sibling())
        cur = cur.parent()
    pieces.sort(key=lambda p: p.sort_key)
    return pieces


class PrefixSet:
    """Canonical ordered set of pairwise-disjoint prefixes.

    Members are kept sorted by (family, bits, len) and adjacent siblings are
    always merged, so equal coverage implies equal representation.
    """

    __slots__ = ("_members", "_index")

    def __init__(self, members: "list[Prefix] | tuple[Prefix, ...]" = ()):
        self._members: list[Prefix] = []
        self._index: set[tuple] = set()
        for p in members:
            self._add(p)

    def _add(self, added: Prefix) -> None:
        for m in self._members:
            if m.overlaps(added):
                raise OverlapExisting(f"{added} overlaps existing {m}")
        self._members.append(added)
        self._index.add(added.sort_key)
        self._merge(added)
        self._members.sort(key=lambda p: p.sort_key)

    def _merge(self, seed: Prefix) -> None:
        cur = seed
        while cur.len > 0:
            sib = cur.sibling()
            if sib.sort_key not in self._index:
                break
            for part in (cur, sib):
                self._members.remove(part)
                self._index.discard(part.sort_key)
            cur = cur.parent()
            self._members.append(cur)
            self._index.add(cur.sort_key)

    def insert(self, added: Prefix) -> "PrefixSet":
        """New set covering self plus added; errors if added overlaps a member."""
        out = self.copy()
        out._add(added)
        return out

    def subtract(self, removed: Prefix) -> "PrefixSet":
        """New set covering self minus removed.

        removed must fall inside exactly one member; the complement within that
        member is expressed as the minimal sibling list.
        """
        container = None
        for m in self._members:
            if m.contains(removed):
                container = m
                break
            if removed.contains(m):
                raise PartialOverlap(f"{removed} straddles member {m}")
        if container is None:
            raise NotHeld(f"{removed} not held")
        out = self.copy()
        out._members.remove(container)
        out._index.discard(container.sort_key)
        for piece in complement_within(container, removed):
            out._members.append(piece)
            out._index.add(piece.sort_key)
        out._members.sort(key=lambda p: p.sort_key)
        return out

    def copy(self) -> "PrefixSet":
        out = PrefixSet.__new__(PrefixSet)
        out._members = list(self._members)
        out._index = set(self._index)
        return out

    def containing_member(self, p: Prefix) -> Prefix | None:
        """The member that contains p, if any."""
        for length in range(p.len, -1, -1):
            key = (int(p.family), p.truncate(length).bits, length)
            if key in self._index:
                return p.truncate(length)
        return None

    def stake(self, family: Family) -> StakeAmount:
        units = sum(p.stake_units for p in self._members if p.family is family)
        return StakeAmount(units, family)

    @property
    def members(self) -> tuple[Prefix, ...]:
        return tuple(self._members)

    def __contains__(self, p: Prefix) -> bool:
        return p.sort_key in self._index

    def __len__(self) -> int:
        return len(self._members)

    def __iter__(self):
        return iter(self._members)

    def __eq__(self, other) -> bool:
        return isinstance(other, PrefixSet) and self._members == other._members

    def __repr__(self) -> str:
        return "{" + ", ".join(str(p) for p in self._members) + "}"


def stake_of_set(holding: PrefixSet, family: Family) -> StakeAmount:
    return holding.stake(family)
