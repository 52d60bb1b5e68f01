import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prefixchain.keys import KeyPair
from prefixchain.ledger import (
    BadNonce,
    BadSignature,
    ChainState,
    Holding,
    LedgerConfig,
    NotAllocatable,
    NotArbiter,
    NotFound,
    NotHolder,
    OverlappingGenesis,
    SpansHoldings,
    TooFine,
    Transaction,
    TxKind,
    UniverseGap,
    decode_origin_as,
    encode_origin_as,
    genesis_state,
    sign_transaction,
)
from prefixchain.prefix import Family, Prefix, parse_prefix

import interval_oracle as oracle


IANA = KeyPair.from_seed(b"iana")
RIR_A = KeyPair.from_seed(b"rir-a")
ISP = KeyPair.from_seed(b"isp")
CUST = KeyPair.from_seed(b"customer")
R1 = KeyPair.from_seed(b"router-1")
R2 = KeyPair.from_seed(b"router-2")


def pfx(t):
    return parse_prefix(t)


def full_genesis(config=None, arbiter=None):
    allocs = [
        (IANA.account, pfx("0.0.0.0/0"), True),
        (IANA.account, pfx("::/0"), True),
    ]
    return genesis_state(allocs, arbiter or IANA.account, config)


def tx(kind, keypair, state, prefix, recipient=None, metadata=None, nonce=None):
    n = state.account_nonce(keypair.account) if nonce is None else nonce
    return sign_transaction(kind, keypair, n, pfx(prefix) if isinstance(prefix, str) else prefix,
                            recipient=recipient, metadata=metadata)


# --- genesis -----------------------------------------------------------------


def test_genesis_all_to_iana():
    state = full_genesis()
    owner, holding = state.lookup_owner(pfx("203.0.113.0/24"))
    assert owner == IANA.account
    assert holding.prefix == pfx("0.0.0.0/0")
    assert state.stake_of(IANA.account, Family.V4).units == 1 << 32
    assert state.stake_of(IANA.account, Family.V6).units == 1 << 64


def test_genesis_empty():
    state = genesis_state([], IANA.account, universe=[])
    assert state.accounts == {}


def test_genesis_double_assignment_rejected():
    allocs = [
        (IANA.account, pfx("10.0.0.0/8"), True),
        (RIR_A.account, pfx("10.0.0.0/8"), True),
    ]
    with pytest.raises(OverlappingGenesis):
        genesis_state(allocs, IANA.account)


def test_genesis_universe_gap():
    allocs = [(IANA.account, pfx("10.0.0.0/8"), True)]
    with pytest.raises(UniverseGap):
        genesis_state(allocs, IANA.account, universe=[pfx("0.0.0.0/0")])


# --- allocate / delegate -----------------------------------------------------


def test_allocate_splits_and_transfers():
    state = full_genesis()
    state = state.apply(tx(TxKind.ALLOCATE, IANA, state, "150.0.0.0/8", RIR_A.account))
    owner, holding = state.lookup_owner(pfx("150.0.0.0/8"))
    assert owner == RIR_A.account and holding.allocatable
    # complement stays with the sender
    owner, _ = state.lookup_owner(pfx("151.0.0.0/8"))
    assert owner == IANA.account
    assert state.stake_of(RIR_A.account, Family.V4).units == 1 << 24
    assert state.stake_of(IANA.account, Family.V4).units == (1 << 32) - (1 << 24)


def test_delegated_holding_cannot_allocate():
    state = full_genesis()
    state = state.apply(tx(TxKind.ALLOCATE, IANA, state, "150.0.0.0/8", ISP.account))
    state = state.apply(tx(TxKind.DELEGATE, ISP, state, "150.1.0.0/24", CUST.account))
    _, holding = state.lookup_owner(pfx("150.1.0.0/24"))
    assert not holding.allocatable
    with pytest.raises(NotAllocatable):
        state.apply(tx(TxKind.ALLOCATE, CUST, state, "150.1.0.0/24", R1.account))


def test_delegated_holding_cannot_be_split():
    state = full_genesis(LedgerConfig(min_len_v4=32))
    state = state.apply(tx(TxKind.ALLOCATE, IANA, state, "150.0.0.0/8", ISP.account))
    state = state.apply(tx(TxKind.DELEGATE, ISP, state, "150.1.0.0/24", CUST.account))
    with pytest.raises(NotAllocatable):
        state.apply(tx(TxKind.DELEGATE, CUST, state, "150.1.0.0/25", R1.account))


def test_delegated_holding_rekeys_whole_via_delegate():
    state = full_genesis()
    state = state.apply(tx(TxKind.ALLOCATE, IANA, state, "150.0.0.0/8", ISP.account))
    state = state.apply(tx(TxKind.DELEGATE, ISP, state, "150.1.0.0/24", CUST.account))
    state = state.apply(tx(TxKind.DELEGATE, CUST, state, "150.1.0.0/24", R1.account))
    owner, holding = state.lookup_owner(pfx("150.1.0.0/24"))
    assert owner == R1.account and not holding.allocatable


def test_rekey_to_self_consumes_nonce():
    state = full_genesis()
    state = state.apply(tx(TxKind.ALLOCATE, IANA, state, "150.0.0.0/8", IANA.account))
    assert state.account_nonce(IANA.account) == 1
    owner, _ = state.lookup_owner(pfx("150.0.0.0/8"))
    assert owner == IANA.account


def test_rekey_stale_nonce_rejected():
    state = full_genesis()
    stale = tx(TxKind.ALLOCATE, IANA, state, "150.0.0.0/8", RIR_A.account, nonce=0)
    state = state.apply(stale)
    with pytest.raises(BadNonce):
        state.apply(tx(TxKind.ALLOCATE, IANA, state, "151.0.0.0/8", RIR_A.account, nonce=0))


def test_granularity_floor():
    state = full_genesis()  # default /24 floor
    with pytest.raises(TooFine):
        state.apply(tx(TxKind.ALLOCATE, IANA, state, "150.1.2.0/28", RIR_A.account))


def test_bad_signature_rejected():
    state = full_genesis()
    good = tx(TxKind.ALLOCATE, IANA, state, "150.0.0.0/8", RIR_A.account)
    from dataclasses import replace

    bad = replace(good, signature=bytes(64))
    with pytest.raises(BadSignature):
        state.apply(bad)


def test_not_holder():
    state = full_genesis()
    with pytest.raises(NotHolder):
        state.apply(tx(TxKind.ALLOCATE, RIR_A, state, "150.0.0.0/8", ISP.account))


# --- metadata ----------------------------------------------------------------


def test_metadata_binds_origin_as():
    state = full_genesis()
    state = state.apply(tx(TxKind.ALLOCATE, IANA, state, "150.1.0.0/24", ISP.account))
    state = state.apply(
        tx(TxKind.METADATA, ISP, state, "150.1.0.0/24", metadata={"origin_as": encode_origin_as(65001)})
    )
    _, holding = state.lookup_owner(pfx("150.1.0.0/24"))
    assert decode_origin_as(holding.metadata["origin_as"]) == 65001


def test_metadata_requires_exact_holding():
    state = full_genesis()
    state = state.apply(tx(TxKind.ALLOCATE, IANA, state, "150.0.0.0/8", ISP.account))
    with pytest.raises(NotHolder):
        state.apply(
            tx(TxKind.METADATA, ISP, state, "150.1.0.0/24", metadata={"origin_as": encode_origin_as(65001)})
        )


def test_metadata_upsert_by_key():
    state = full_genesis()
    state = state.apply(tx(TxKind.ALLOCATE, IANA, state, "150.1.0.0/24", ISP.account))
    state = state.apply(tx(TxKind.METADATA, ISP, state, "150.1.0.0/24", metadata={"origin_as": encode_origin_as(1)}))
    state = state.apply(tx(TxKind.METADATA, ISP, state, "150.1.0.0/24",
                           metadata={"origin_as": encode_origin_as(2), "contact": b"noc"}))
    _, holding = state.lookup_owner(pfx("150.1.0.0/24"))
    assert decode_origin_as(holding.metadata["origin_as"]) == 2
    assert holding.metadata["contact"] == b"noc"


# --- revoke ------------------------------------------------------------------


def test_revoke_moves_space_without_consent():
    state = full_genesis()
    state = state.apply(tx(TxKind.ALLOCATE, IANA, state, "150.0.0.0/8", ISP.account))
    state = state.apply(tx(TxKind.REVOKE, IANA, state, "150.0.0.0/8", RIR_A.account))
    owner, holding = state.lookup_owner(pfx("150.0.0.0/8"))
    assert owner == RIR_A.account and holding.allocatable


def test_revoke_from_non_arbiter_rejected():
    state = full_genesis()
    state = state.apply(tx(TxKind.ALLOCATE, IANA, state, "150.0.0.0/8", ISP.account))
    with pytest.raises(NotArbiter):
        state.apply(tx(TxKind.REVOKE, RIR_A, state, "150.0.0.0/8", RIR_A.account))


def test_revoke_disabled():
    state = full_genesis(LedgerConfig(arbiter_enabled=False))
    state = state.apply(tx(TxKind.ALLOCATE, IANA, state, "150.0.0.0/8", ISP.account))
    with pytest.raises(NotArbiter):
        state.apply(tx(TxKind.REVOKE, IANA, state, "150.0.0.0/8", RIR_A.account))


# --- queries -----------------------------------------------------------------


def test_lookup_unallocated_space_is_iana():
    state = full_genesis()
    owner, _ = state.lookup_owner(pfx("8.8.8.0/24"))
    assert owner == IANA.account


def test_lookup_outside_universe():
    state = genesis_state([(IANA.account, pfx("10.0.0.0/8"), True)], IANA.account)
    with pytest.raises(NotFound):
        state.lookup_owner(pfx("11.0.0.0/8"))


def test_lookup_spanning_subdivided_space():
    state = full_genesis()
    state = state.apply(tx(TxKind.ALLOCATE, IANA, state, "150.0.0.0/9", RIR_A.account))
    with pytest.raises(SpansHoldings):
        state.lookup_owner(pfx("150.0.0.0/8"))


def test_lookup_depth3_chain_matches_replay_oracle():
    state = full_genesis()
    chain = [
        tx(TxKind.ALLOCATE, IANA, state, "150.0.0.0/8", RIR_A.account),
    ]
    state = state.apply(chain[0])
    chain.append(tx(TxKind.ALLOCATE, RIR_A, state, "150.1.0.0/16", ISP.account))
    state = state.apply(chain[1])
    chain.append(tx(TxKind.ALLOCATE, ISP, state, "150.1.2.0/24", CUST.account))
    state = state.apply(chain[2])

    # independent replay: ownership as integer intervals
    owners = {IANA.account: [(0, 1 << 32)]}
    for t in chain:
        start, end = t.prefix.range
        owners[t.sender] = oracle.subtract(owners[t.sender], start, end)
        owners.setdefault(t.recipient, [])
        owners[t.recipient] = oracle.union(owners[t.recipient], [(start, end)])

    for probe in ["150.1.2.0/24", "150.1.3.0/24", "150.2.0.0/16", "151.0.0.0/8"]:
        owner, _ = state.lookup_owner(pfx(probe))
        start, end = pfx(probe).range
        expected = [a for a, cover in owners.items() if oracle.covers(cover, start, end)]
        assert [owner] == expected


def test_verify_origin_workflow():
    state = full_genesis()
    state = state.apply(tx(TxKind.ALLOCATE, IANA, state, "150.0.0.0/8", R1.account))
    state = state.apply(tx(TxKind.METADATA, R1, state, "150.0.0.0/8",
                           metadata={"origin_as": encode_origin_as(64501)}))
    assert state.verify_origin(pfx("150.0.0.0/8"), 64501) == "Valid"
    assert state.verify_origin(pfx("150.0.0.0/8"), 64502) == "Invalid"
    assert state.verify_origin(pfx("8.0.0.0/8"), 64501) == "Unknown"
    # sub-prefix classified by the covering holding
    assert state.verify_origin(pfx("150.99.0.0/16"), 64501) == "Valid"
    assert state.verify_origin(pfx("150.99.0.0/16"), 64502) == "Invalid"


def test_total_eligible_stake_excludes_accounts():
    state = full_genesis()
    assert state.total_eligible_stake(Family.V6, {IANA.account}).units == 0
    state = state.apply(tx(TxKind.ALLOCATE, IANA, state, "2001:db8::/32", RIR_A.account))
    assert state.total_eligible_stake(Family.V6, {IANA.account}).units == 1 << 32


# --- invariants ---------------------------------------------------------------


def random_valid_tx(rng, state, keypairs):
    """Draw one applicable transaction, or None if the draw came up empty."""
    accounts = {kp.account: kp for kp in keypairs}
    kind = rng.choice([TxKind.ALLOCATE, TxKind.ALLOCATE, TxKind.DELEGATE, TxKind.METADATA, TxKind.REVOKE])
    if kind is TxKind.METADATA:
        candidates = [
            (aid, h) for aid in accounts for h in (state.accounts.get(aid).holdings if state.accounts.get(aid) else [])
        ]
        if not candidates:
            return None
        aid, holding = rng.choice(candidates)
        return tx(TxKind.METADATA, accounts[aid], state, holding.prefix,
                  metadata={"origin_as": encode_origin_as(rng.randrange(1 << 16))})
    if kind is TxKind.REVOKE:
        holders = [(aid, h) for aid, acc in state.accounts.items() if acc.holdings for h in acc.holdings]
        if not holders:
            return None
        _, holding = rng.choice(holders)
        recipient = rng.choice(keypairs).account
        return tx(TxKind.REVOKE, IANA, state, holding.prefix, recipient)
    # transfer of a random sub-block of an allocatable holding
    sources = [
        (aid, h)
        for aid, acc in state.accounts.items()
        if aid in accounts
        for h in acc.holdings
        if h.allocatable and h.prefix.family is Family.V4
    ]
    if not sources:
        return None
    aid, holding = rng.choice(sources)
    floor = state.config.min_len(Family.V4)
    plen = rng.randint(holding.prefix.len, min(floor, holding.prefix.len + 4))
    offset = rng.randrange(1 << (plen - holding.prefix.len)) if plen > holding.prefix.len else 0
    sub = Prefix(Family.V4, holding.prefix.bits | (offset << (32 - plen)), plen)
    recipient = rng.choice(keypairs).account
    return tx(kind, accounts[aid], state, sub, recipient)


def test_randomized_sequences_conserve_and_match_oracle():
    rng = random.Random(42)
    keypairs = [IANA, RIR_A, ISP, CUST, R1, R2]
    state = full_genesis()
    v4_total = state.total_units[Family.V4]
    v6_total = state.total_units[Family.V6]
    cover = {IANA.account: [(0, 1 << 32)]}
    delegated = set()

    applied = 0
    for _ in range(1500):
        t = random_valid_tx(rng, state, keypairs)
        if t is None:
            continue
        try:
            new_state = state.apply(t)
        except (NotAllocatable, NotHolder, TooFine, SpansHoldings):
            continue
        state = new_state
        applied += 1
        if t.kind in (TxKind.ALLOCATE, TxKind.DELEGATE, TxKind.REVOKE):
            start, end = t.prefix.range
            for aid in list(cover):
                cover[aid] = oracle.subtract(cover.get(aid, []), start, end)
            cover.setdefault(t.recipient, [])
            cover[t.recipient] = oracle.union(cover[t.recipient], [(start, end)])
            if t.kind is TxKind.DELEGATE:
                delegated.add(t.prefix.sort_key)
            else:
                delegated.discard(t.prefix.sort_key)

        assert state.total_units[Family.V4] == v4_total
        assert state.total_units[Family.V6] == v6_total

    assert applied > 300
    # no double ownership and exact per-account coverage
    for aid, acc in state.accounts.items():
        got = oracle.normalize(
            [oracle.prefix_interval(h.prefix.bits, h.prefix.len, 32) for h in acc.holdings if h.prefix.family is Family.V4]
        )
        assert got == oracle.normalize(cover.get(aid, []))
    # stake caches equal recomputation
    for aid, acc in state.accounts.items():
        assert acc.stake(Family.V4) == sum(
            h.prefix.stake_units for h in acc.holdings if h.prefix.family is Family.V4
        )
    # delegated holdings stayed non-allocatable
    for acc in state.accounts.values():
        for h in acc.holdings:
            if h.prefix.sort_key in delegated:
                assert not h.allocatable


def test_replay_determinism_byte_identical():
    def run():
        state = full_genesis()
        steps = [
            tx(TxKind.ALLOCATE, IANA, state, "150.0.0.0/8", RIR_A.account),
        ]
        state = state.apply(steps[0])
        steps.append(tx(TxKind.ALLOCATE, RIR_A, state, "150.1.0.0/16", ISP.account))
        state = state.apply(steps[1])
        steps.append(tx(TxKind.METADATA, ISP, state, "150.1.0.0/16",
                        metadata={"origin_as": encode_origin_as(7)}))
        state = state.apply(steps[2])
        return state.encode()

    assert run() == run()


def test_apply_does_not_mutate_parent_state():
    state = full_genesis()
    before = state.encode()
    state.apply(tx(TxKind.ALLOCATE, IANA, state, "150.0.0.0/8", RIR_A.account))
    assert state.encode() == before


# --- transaction codec ---------------------------------------------------------


def test_transaction_roundtrip():
    state = full_genesis()
    t = tx(TxKind.ALLOCATE, IANA, state, "150.0.0.0/8", RIR_A.account)
    assert Transaction.decode(t.encode()) == t
    m = tx(TxKind.METADATA, IANA, state, "0.0.0.0/0", metadata={"origin_as": encode_origin_as(9)})
    assert Transaction.decode(m.encode()) == m


@settings(deadline=None)
@given(st.integers(min_value=0, max_value=(1 << 16) - 1), st.integers(min_value=0, max_value=24))
def test_transaction_roundtrip_property(asn, plen):
    p = Prefix(Family.V4, (0b1001 << 28) & ~((1 << (32 - plen)) - 1) if plen else 0, plen)
    t = sign_transaction(TxKind.ALLOCATE, IANA, asn, p, recipient=RIR_A.account)
    decoded = Transaction.decode(t.encode())
    assert decoded == t
    assert decoded.verify_signature()
