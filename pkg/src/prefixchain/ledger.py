"""Account-based ledger state machine.

ChainState maps accounts to their prefix holdings; transactions move prefixes
between accounts under the coin rules: space is never created or destroyed,
every address has exactly one owner, delegated holdings can never be further
allocated, and per-account nonces make replays impossible.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field, replace
from enum import IntEnum

from .codec import DecodeError, Reader, Writer
from .keys import ACCOUNT_ID_LEN, account_id, sha256, verify
from .prefix import Family, Prefix, StakeAmount, complement_within

MAX_METADATA_KEY = 64
MAX_METADATA_VALUE = 256
ORIGIN_AS_KEY = "origin_as"


class LedgerError(Exception):
    pass


class BadSignature(LedgerError):
    pass


class BadNonce(LedgerError):
    def __init__(self, expected: int, got: int):
        super().__init__(f"expected nonce {expected}, got {got}")
        self.expected = expected
        self.got = got


class NotHolder(LedgerError):
    pass


class NotAllocatable(LedgerError):
    pass


class TooFine(LedgerError):
    pass


class NotArbiter(LedgerError):
    pass


class OverlappingGenesis(LedgerError):
    pass


class UniverseGap(LedgerError):
    pass


class NotFound(LedgerError):
    pass


class SpansHoldings(LedgerError):
    """Query prefix straddles space that has been subdivided across holders."""


class MalformedTransaction(LedgerError):
    pass


class TxKind(IntEnum):
    ALLOCATE = 1
    DELEGATE = 2
    METADATA = 3
    REVOKE = 4


@dataclass(frozen=True)
class Transaction:
    """A signed state transition.

    arrival_time is mempool bookkeeping only and never serialized; the
    signature covers the canonical encoding with the signature field empty.
    """

    kind: TxKind
    sender: bytes
    sender_pubkey: bytes
    nonce: int
    prefix: Prefix
    recipient: bytes | None = None
    metadata: dict[str, bytes] = field(default_factory=dict)
    signature: bytes = b""
    arrival_time: float | None = field(default=None, compare=False, repr=False)

    @property
    def family(self) -> Family:
        return self.prefix.family

    def _encode(self, with_signature: bool) -> bytes:
        w = Writer()
        w.u8(int(self.kind))
        w.raw(self.sender)
        w.blob16(self.sender_pubkey)
        w.u64(self.nonce)
        w.raw(self.prefix.encode())
        if self.recipient is None:
            w.u8(0)
        else:
            w.u8(1)
            w.raw(self.recipient)
        w.u16(len(self.metadata))
        for key, value in self.metadata.items():
            w.blob16(key.encode())
            w.blob16(value)
        w.blob16(self.signature if with_signature else b"")
        return w.getvalue()

    def encode(self) -> bytes:
        return self._encode(with_signature=True)

    def preimage(self) -> bytes:
        return self._encode(with_signature=False)

    @property
    def txid(self) -> bytes:
        return sha256(self.encode())

    def check_shape(self) -> None:
        """Structural validity independent of any state."""
        if len(self.sender) != ACCOUNT_ID_LEN:
            raise MalformedTransaction("sender must be 32 bytes")
        if account_id(self.sender_pubkey) != self.sender:
            raise MalformedTransaction("sender id does not match pubkey")
        if self.kind is TxKind.METADATA:
            if self.recipient is not None:
                raise MalformedTransaction("metadata tx carries no recipient")
            if not self.metadata:
                raise MalformedTransaction("metadata tx with no entries")
        else:
            if self.recipient is None or len(self.recipient) != ACCOUNT_ID_LEN:
                raise MalformedTransaction("transfer tx needs a 32-byte recipient")
            if self.metadata:
                raise MalformedTransaction("only metadata txs carry metadata")
        for key, value in self.metadata.items():
            raw = key.encode()
            if not raw or len(raw) > MAX_METADATA_KEY:
                raise MalformedTransaction(f"bad metadata key {key!r}")
            if len(value) > MAX_METADATA_VALUE:
                raise MalformedTransaction(f"metadata value over {MAX_METADATA_VALUE} B")
            if key == ORIGIN_AS_KEY and len(value) != 4:
                raise MalformedTransaction("origin_as must be a 4-byte AS number")

    def verify_signature(self) -> bool:
        return verify(self.sender_pubkey, self.signature, self.preimage())

    @classmethod
    def decode(cls, data: bytes) -> "Transaction":
        r = Reader(data)
        tx = cls._read(r)
        r.expect_done()
        return tx

    @classmethod
    def _read(cls, r: Reader) -> "Transaction":
        try:
            kind = TxKind(r.u8())
        except ValueError as e:
            raise DecodeError(str(e)) from None
        sender = r.raw(ACCOUNT_ID_LEN)
        pubkey = r.blob16()
        nonce = r.u64()
        prefix, r.pos = Prefix.decode(r.data, r.pos)
        recipient = r.raw(ACCOUNT_ID_LEN) if r.u8() else None
        metadata = {}
        for _ in range(r.u16()):
            key = r.blob16().decode()
            if key in metadata:
                raise DecodeError(f"duplicate metadata key {key!r}")
            metadata[key] = r.blob16()
        signature = r.blob16()
        return cls(kind, sender, pubkey, nonce, prefix, recipient, metadata, signature)


def sign_transaction(kind, keypair, nonce, prefix, recipient=None, metadata=None) -> Transaction:
    tx = Transaction(
        kind=kind,
        sender=keypair.account,
        sender_pubkey=keypair.public_bytes,
        nonce=nonce,
        prefix=prefix,
        recipient=recipient,
        metadata=dict(metadata or {}),
    )
    return replace(tx, signature=keypair.sign(tx.preimage()))


def encode_origin_as(asn: int) -> bytes:
    if not 0 <= asn < (1 << 32):
        raise ValueError("AS number must fit 32 bits")
    return asn.to_bytes(4, "big")


def decode_origin_as(value: bytes) -> int:
    return int.from_bytes(value, "big")


@dataclass(frozen=True)
class Holding:
    """One owned prefix with its allocation right and attached metadata."""

    prefix: Prefix
    allocatable: bool
    metadata: dict[str, bytes] = field(default_factory=dict)

    def with_metadata(self, updates: dict[str, bytes]) -> "Holding":
        merged = dict(self.metadata)
        merged.update(updates)
        return Holding(self.prefix, self.allocatable, merged)

    def same_attrs(self, other: "Holding") -> bool:
        return self.allocatable == other.allocatable and self.metadata == other.metadata


class AccountState:
    """Holdings and nonce of one account.

    Treated as immutable once installed in a ChainState: mutation happens on a
    clone, so states can share account objects structurally.
    """

    __slots__ = ("id", "nonce", "holdings", "_keys", "stake_units")

    def __init__(self, account: bytes):
        self.id = account
        self.nonce = 0
        self.holdings: list[Holding] = []  # sorted by prefix.sort_key
        self._keys: list[tuple] = []
        self.stake_units = {Family.V4: 0, Family.V6: 0}

    def clone(self) -> "AccountState":
        out = AccountState(self.id)
        out.nonce = self.nonce
        out.holdings = list(self.holdings)
        out._keys = list(self._keys)
        out.stake_units = dict(self.stake_units)
        return out

    def find_exact(self, prefix: Prefix) -> Holding | None:
        i = bisect.bisect_left(self._keys, prefix.sort_key)
        if i < len(self._keys) and self._keys[i] == prefix.sort_key:
            return self.holdings[i]
        return None

    def add_holding(self, holding: Holding) -> None:
        i = bisect.bisect_left(self._keys, holding.prefix.sort_key)
        self.holdings.insert(i, holding)
        self._keys.insert(i, holding.prefix.sort_key)
        self.stake_units[holding.prefix.family] += holding.prefix.stake_units

    def remove_holding(self, prefix: Prefix) -> Holding:
        i = bisect.bisect_left(self._keys, prefix.sort_key)
        if i >= len(self._keys) or self._keys[i] != prefix.sort_key:
            raise NotHolder(f"{prefix} not held by {self.id.hex()[:8]}")
        self._keys.pop(i)
        holding = self.holdings.pop(i)
        self.stake_units[prefix.family] -= prefix.stake_units
        return holding

    def stake(self, family: Family) -> int:
        return self.stake_units[family]


class LedgerConfig:
    """Granularity floors and revocation switch."""

    __slots__ = ("min_len_v4", "min_len_v6", "arbiter_enabled")

    def __init__(self, min_len_v4: int = 24, min_len_v6: int = 48, arbiter_enabled: bool = True):
        if not 0 <= min_len_v4 <= 32 or not 0 <= min_len_v6 <= 64:
            raise ValueError("granularity floor out of range")
        self.min_len_v4 = min_len_v4
        self.min_len_v6 = min_len_v6
        self.arbiter_enabled = arbiter_enabled

    def min_len(self, family: Family) -> int:
        return self.min_len_v4 if family is Family.V4 else self.min_len_v6

    def encode(self) -> bytes:
        w = Writer()
        w.u8(self.min_len_v4)
        w.u8(self.min_len_v6)
        w.u8(1 if self.arbiter_enabled else 0)
        return w.getvalue()

    @classmethod
    def read(cls, r: Reader) -> "LedgerConfig":
        return cls(r.u8(), r.u8(), bool(r.u8()))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, LedgerConfig)
            and self.min_len_v4 == other.min_len_v4
            and self.min_len_v6 == other.min_len_v6
            and self.arbiter_enabled == other.arbiter_enabled
        )


class ChainState:
    """Materialized account map plus ownership index.

    Persistent-ish: apply() returns a new state that structurally shares all
    untouched accounts with its parent.  A single writer owns each state;
    readers may hold older snapshots freely.
    """

    def __init__(self, arbiter: bytes, config: LedgerConfig, universe: tuple[Prefix, ...]):
        self.accounts: dict[bytes, AccountState] = {}
        self.owner_index: dict[tuple, bytes] = {}  # prefix sort_key -> account id
        self.total_units = {Family.V4: 0, Family.V6: 0}
        self.arbiter = arbiter
        self.config = config
        self.universe = universe
        self._touched: set[bytes] | None = None

    # -- construction --------------------------------------------------------

    def _shallow_copy(self) -> "ChainState":
        out = ChainState.__new__(ChainState)
        out.accounts = dict(self.accounts)
        out.owner_index = dict(self.owner_index)
        out.total_units = dict(self.total_units)
        out.arbiter = self.arbiter
        out.config = self.config
        out.universe = self.universe
        out._touched = set()
        return out

    def _own(self, account: bytes) -> AccountState:
        acc = self.accounts.get(account)
        if acc is None:
            acc = AccountState(account)
            self.accounts[account] = acc
            self._touched.add(account)
        elif account not in self._touched:
            acc = acc.clone()
            self.accounts[account] = acc
            self._touched.add(account)
        return acc

    # -- queries ---------------------------------------------------------------

    def covering_holding(self, prefix: Prefix) -> tuple[bytes, Holding]:
        """The unique (owner, holding) whose prefix contains the query."""
        for length in range(prefix.len, -1, -1):
            key = (int(prefix.family), prefix.truncate(length).bits, length)
            owner = self.owner_index.get(key)
            if owner is not None:
                holding = self.accounts[owner].find_exact(prefix.truncate(length))
                return owner, holding
        if any(u.contains(prefix) for u in self.universe):
            raise SpansHoldings(f"{prefix} spans subdivided holdings")
        raise NotFound(f"{prefix} outside the genesis universe")

    def lookup_owner(self, prefix: Prefix) -> tuple[bytes, Holding]:
        return self.covering_holding(prefix)

    def verify_origin(self, prefix: Prefix, claimed_as: int) -> str:
        """Route-origin check: 'Valid', 'Invalid' or 'Unknown'."""
        try:
            _, holding = self.covering_holding(prefix)
        except (NotFound, SpansHoldings):
            return "Unknown"
        value = holding.metadata.get(ORIGIN_AS_KEY)
        if value is None:
            return "Unknown"
        return "Valid" if decode_origin_as(value) == claimed_as else "Invalid"

    def stake_of(self, account: bytes, family: Family) -> StakeAmount:
        acc = self.accounts.get(account)
        return StakeAmount(acc.stake(family) if acc else 0, family)

    def total_eligible_stake(self, family: Family, excluded: frozenset | set = frozenset()) -> StakeAmount:
        units = self.total_units[family]
        for account in excluded:
            acc = self.accounts.get(account)
            if acc:
                units -= acc.stake(family)
        return StakeAmount(units, family)

    def account_nonce(self, account: bytes) -> int:
        acc = self.accounts.get(account)
        return acc.nonce if acc else 0

    # -- transitions -----------------------------------------------------------

    def apply(self, tx: Transaction, check_signature: bool = True) -> "ChainState":
        """Apply one transaction, returning the successor state."""
        out = self._shallow_copy()
        out._apply_one(tx, check_signature)
        return out

    def apply_all(self, txs, check_signatures: bool = True) -> "ChainState":
        out = self._shallow_copy()
        for tx in txs:
            out._apply_one(tx, check_signatures)
        return out

    def _apply_one(self, tx: Transaction, check_signature: bool) -> None:
        tx.check_shape()
        if check_signature and not tx.verify_signature():
            raise BadSignature("signature does not verify")
        expected = self.account_nonce(tx.sender)
        if tx.nonce != expected:
            raise BadNonce(expected, tx.nonce)

        if tx.kind is TxKind.METADATA:
            self._apply_metadata(tx)
        else:
            floor = self.config.min_len(tx.family)
            if tx.prefix.len > floor:
                raise TooFine(f"{tx.prefix} finer than /{floor} floor")
            if tx.kind is TxKind.REVOKE:
                self._apply_revoke(tx)
            else:
                self._apply_transfer(tx)
        self._own(tx.sender).nonce += 1

    def _apply_metadata(self, tx: Transaction) -> None:
        acc = self.accounts.get(tx.sender)
        holding = acc.find_exact(tx.prefix) if acc else None
        if holding is None:
            raise NotHolder(f"{tx.sender.hex()[:8]} does not hold {tx.prefix} exactly")
        sender = self._own(tx.sender)
        sender.remove_holding(tx.prefix)
        sender.add_holding(holding.with_metadata(tx.metadata))

    def _apply_transfer(self, tx: Transaction) -> None:
        owner, holding = self._find_spendable(tx)
        if holding.allocatable:
            pass
        elif tx.kind is TxKind.DELEGATE and holding.prefix == tx.prefix:
            pass  # whole-holding re-delegation / rekey keeps the flag off
        else:
            raise NotAllocatable(f"{holding.prefix} was delegated and cannot be split or allocated")
        allocatable = tx.kind is TxKind.ALLOCATE
        self._move(owner, holding, tx.prefix, tx.recipient, allocatable)

    def _apply_revoke(self, tx: Transaction) -> None:
        if not self.config.arbiter_enabled:
            raise NotArbiter("revocation is disabled on this chain")
        if tx.sender != self.arbiter:
            raise NotArbiter("revoke requires the arbiter key")
        try:
            owner, holding = self.covering_holding(tx.prefix)
        except (NotFound, SpansHoldings) as e:
            raise NotHolder(str(e)) from None
        self._move(owner, holding, tx.prefix, tx.recipient, allocatable=True)

    def _find_spendable(self, tx: Transaction) -> tuple[bytes, Holding]:
        try:
            owner, holding = self.covering_holding(tx.prefix)
        except (NotFound, SpansHoldings) as e:
            raise NotHolder(str(e)) from None
        if owner != tx.sender:
            raise NotHolder(f"{tx.prefix} is held by another account")
        return owner, holding

    def _move(self, owner: bytes, holding: Holding, moved: Prefix, recipient: bytes, allocatable: bool) -> None:
        src = self._own(owner)
        src.remove_holding(holding.prefix)
        del self.owner_index[holding.prefix.sort_key]
        self.total_units[holding.prefix.family] -= holding.prefix.stake_units
        # retained fragments keep the source holding's flag and metadata
        for piece in complement_within(holding.prefix, moved):
            self._install(owner, Holding(piece, holding.allocatable, dict(holding.metadata)))
        self._install(recipient, Holding(moved, allocatable, {}))

    def _install(self, account: bytes, holding: Holding) -> None:
        """Insert a holding, merging sibling holdings with identical attributes."""
        acc = self._own(account)
        cur = holding
        while cur.prefix.len > 0:
            sib_key = cur.prefix.sibling().sort_key
            if self.owner_index.get(sib_key) != account:
                break
            sib = acc.find_exact(cur.prefix.sibling())
            if not cur.same_attrs(sib):
                break
            acc.remove_holding(sib.prefix)
            del self.owner_index[sib_key]
            self.total_units[sib.prefix.family] -= sib.prefix.stake_units
            cur = Holding(cur.prefix.parent(), cur.allocatable, cur.metadata)
        acc.add_holding(cur)
        self.owner_index[cur.prefix.sort_key] = account
        self.total_units[cur.prefix.family] += cur.prefix.stake_units

    # -- serialization -----------------------------------------------------------

    def encode(self) -> bytes:
        """Canonical snapshot; equal states encode to identical bytes."""
        w = Writer()
        w.raw(self.config.encode())
        w.raw(self.arbiter)
        w.u32(len(self.universe))
        for p in self.universe:
            w.raw(p.encode())
        live = [a for a in sorted(self.accounts) if self.accounts[a].nonce or self.accounts[a].holdings]
        w.u32(len(live))
        for aid in live:
            acc = self.accounts[aid]
            w.raw(aid)
            w.u64(acc.nonce)
            w.u32(len(acc.holdings))
            for h in acc.holdings:
                w.raw(h.prefix.encode())
                w.u8(1 if h.allocatable else 0)
                w.u16(len(h.metadata))
                for key, value in h.metadata.items():
                    w.blob16(key.encode())
                    w.blob16(value)
        return w.getvalue()

    def state_hash(self) -> bytes:
        return sha256(self.encode())


def genesis_state(
    allocs,
    arbiter: bytes,
    config: LedgerConfig | None = None,
    universe: "tuple[Prefix, ...] | list[Prefix] | None" = None,
) -> ChainState:
    """Build the initial state from (account, prefix, allocatable) triples.

    The declared universe must be tiled exactly by the allocations; with
    universe=None it is inferred as their exact union.
    """
    config = config or LedgerConfig()
    entries = list(allocs)
    cover: dict[Family, list[tuple[int, int]]] = {Family.V4: [], Family.V6: []}
    for _, prefix, _ in entries:
        cover[prefix.family].append(prefix.range)
    for family, ranges in cover.items():
        ranges.sort()
        for (s1, e1), (s2, e2) in zip(ranges, ranges[1:]):
            if s2 < e1:
                raise OverlappingGenesis(f"overlapping genesis allocations in {family.name}")

    if universe is None:
        merged = {}
        for family, ranges in cover.items():
            out = []
            for s, e in ranges:
                if out and s == out[-1][1]:
                    out[-1] = (out[-1][0], e)
                else:
                    out.append((s, e))
            merged[family] = out
        universe_list = []
        for family, ranges in merged.items():
            from .prefix import PrefixSet

            ps = PrefixSet()
            for _, prefix, _ in entries:
                if prefix.family is family:
                    ps = ps.insert(prefix)
            universe_list.extend(ps.members)
        universe = tuple(sorted(universe_list, key=lambda p: p.sort_key))
    else:
        universe = tuple(sorted(universe, key=lambda p: p.sort_key))
        for family in (Family.V4, Family.V6):
            want = sorted(p.range for p in universe if p.family is family)
            got = cover[family]
            merged_got: list[tuple[int, int]] = []
            for s, e in got:
                if merged_got and s == merged_got[-1][1]:
                    merged_got[-1] = (merged_got[-1][0], e)
                else:
                    merged_got.append((s, e))
            merged_want: list[tuple[int, int]] = []
            for s, e in want:
                if merged_want and s == merged_want[-1][1]:
                    merged_want[-1] = (merged_want[-1][0], e)
                else:
                    merged_want.append((s, e))
            if merged_got != merged_want:
                raise UniverseGap(f"{family.name} allocations do not tile the declared universe")

    state = ChainState(arbiter, config, universe)
    state._touched = set()
    for account, prefix, allocatable in entries:
        if len(account) != ACCOUNT_ID_LEN:
            raise MalformedTransaction("genesis account id must be 32 bytes")
        state._install(account, Holding(prefix, allocatable, {}))
    state._touched = None
    return state
