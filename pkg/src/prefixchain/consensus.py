"""Proof-of-stake signer selection and block scheduling.

Every node derives the same signer for a height from the shared beacon value:
hash the beacon with height, attempt and family, reduce modulo the total
eligible stake, and walk accounts in id order accumulating family stake until
the target is passed.  A timeout ladder hands the slot to fallback signers
when the scheduled one stays silent.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .keys import sha256
from .ledger import ChainState
from .prefix import Family


class ConsensusError(Exception):
    pass


class GenesisHasNoFamily(ConsensusError):
    pass


class NoEligibleStake(ConsensusError):
    pass


class AttemptsExhausted(ConsensusError):
    pass


class BeaconUnavailable(ConsensusError):
    pass


@dataclass(frozen=True)
class BeaconValue:
    round: int
    value: bytes  # 32 random bytes shared by all honest nodes
    issued_at: int = 0


@dataclass
class ConsensusConfig:
    block_interval: int = 60
    signer_timeout: int = 900
    max_attempts: int = 16
    v4_excluded_accounts: frozenset = field(default_factory=frozenset)
    v6_excluded_accounts: frozenset = field(default_factory=frozenset)
    warmup_after_restart: int = 2100

    def __post_init__(self):
        if self.signer_timeout < self.block_interval:
            raise ValueError("signer_timeout must be >= block_interval")
        self.v4_excluded_accounts = frozenset(self.v4_excluded_accounts)
        self.v6_excluded_accounts = frozenset(self.v6_excluded_accounts)

    def excluded(self, family: Family) -> frozenset:
        return self.v4_excluded_accounts if family is Family.V4 else self.v6_excluded_accounts


def block_family(height: int) -> Family:
    """Even heights carry v4, odd heights carry v6; genesis has no family."""
    if height == 0:
        raise GenesisHasNoFamily("height 0 is family-exempt")
    return Family.V4 if height % 2 == 0 else Family.V6


def selection_digest(beacon_value: bytes, height: int, attempt: int, family: Family) -> int:
    digest = sha256(beacon_value + struct.pack(">QHB", height, attempt, int(family)))
    return int.from_bytes(digest, "big")


def select_signer(
    state: ChainState,
    beacon: BeaconValue,
    height: int,
    attempt: int,
    cfg: ConsensusConfig,
) -> bytes:
    """Deterministic stake-weighted choice of the block signer.

    Identical inputs yield the identical account on every node.  The modulo
    reduction carries a 2**-200-ish bias for realistic stake totals, accepted
    for determinism.
    """
    family = block_family(height)
    excluded = cfg.excluded(family)
    total = state.total_eligible_stake(family, excluded).units
    if total <= 0:
        raise NoEligibleStake(f"no eligible {family.name} stake at height {height}")
    target = selection_digest(beacon.value, height, attempt, family) % total
    cumulative = 0
    for account in sorted(state.accounts):
        if account in excluded:
            continue
        cumulative += state.accounts[account].stake(family)
        if cumulative > target:
            return account
    raise NoEligibleStake("stake walk exhausted")  # unreachable when caches are coherent


def attempt_for(timestamp: int, parent_timestamp: int, cfg: ConsensusConfig) -> int:
    """Which attempt window a timestamp falls into, relative to the parent block."""
    dt = timestamp - parent_timestamp
    if dt < cfg.block_interval:
        raise ConsensusError(f"block at +{dt}s, before one interval elapsed")
    attempt = dt // cfg.signer_timeout
    if attempt >= cfg.max_attempts:
        raise AttemptsExhausted(f"attempt {attempt} >= max {cfg.max_attempts}")
    return attempt


def signing_time(parent_timestamp: int, attempt: int, cfg: ConsensusConfig) -> int:
    """When the attempt-k signer is due to publish."""
    if attempt == 0:
        return parent_timestamp + cfg.block_interval
    return parent_timestamp + attempt * cfg.signer_timeout


def signer_schedule(
    state: ChainState,
    beacon: BeaconValue,
    height: int,
    now: int,
    parent_timestamp: int,
    cfg: ConsensusConfig,
) -> tuple[bytes, int]:
    """The signer currently authorized for this height and its window deadline."""
    dt = max(now - parent_timestamp, cfg.block_interval)
    attempt = dt // cfg.signer_timeout
    if attempt >= cfg.max_attempts:
        raise AttemptsExhausted(f"attempt {attempt} >= max {cfg.max_attempts}")
    deadline = parent_timestamp + (attempt + 1) * cfg.signer_timeout
    return select_signer(state, beacon, height, attempt, cfg), deadline


class DeterministicBeacon:
    """Seeded beacon: value(round) = H(seed || round). Simulation and test mode."""

    def __init__(self, seed: bytes, block_interval: int = 60, genesis_time: int = 0):
        if len(seed) != 32:
            seed = sha256(seed)
        self.seed = seed
        self.block_interval = block_interval
        self.genesis_time = genesis_time

    def next(self, round: int) -> BeaconValue:
        value = sha256(self.seed + struct.pack(">Q", round))
        return BeaconValue(round, value, self.genesis_time + round * self.block_interval)


class HttpBeacon:
    """Client for a public randomness beacon exposing one value per round.

    Fetches `url_template.format(pulse)` where pulse = base_pulse + round, and
    expects a JSON body carrying a hex value under `value_field`.  Values are
    cached by round; on any transport error the caller gets BeaconUnavailable
    and is expected to idle and retry — the node never invents randomness.
    """

    def __init__(self, url_template: str, base_pulse: int = 0,
                 value_field: str = "outputValue", timeout: float = 10.0, fetch=None):
        self.url_template = url_template
        self.base_pulse = base_pulse
        self.value_field = value_field
        self.timeout = timeout
        self._fetch = fetch or self._http_get
        self._cache: dict[int, BeaconValue] = {}

    def _http_get(self, url: str) -> bytes:
        import urllib.request

        with urllib.request.urlopen(url, timeout=self.timeout) as resp:
            return resp.read()

    def next(self, round: int) -> BeaconValue:
        cached = self._cache.get(round)
        if cached is not None:
            return cached
        import json

        url = self.url_template.format(self.base_pulse + round)
        try:
            body = json.loads(self._fetch(url))
            node = body.get("pulse", body)
            value = bytes.fromhex(node[self.value_field])[:32]
            if len(value) != 32:
                raise ValueError("beacon value shorter than 32 bytes")
        except Exception as e:
            raise BeaconUnavailable(f"round {round}: {e}") from e
        out = BeaconValue(round, value, int(node.get("timeStamp", 0)) if isinstance(node, dict) else 0)
        self._cache[round] = out
        return out
