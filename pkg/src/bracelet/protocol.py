"""Ephemeral tags, epoch arithmetic and the beacon wire format.

Every device holds a 32-byte secret seed. For each epoch (a fixed window,
15 minutes by default, counted from the Unix epoch) the device derives a
16-byte tag and a 6-byte address from the seed with SHA-256 under distinct
domain constants, so the two identifiers rotate together and neither can be
computed from the other.
"""
from __future__ import annotations

import hashlib
import math
import secrets
import struct
from dataclasses import dataclass

from .errors import (
    InvalidConfigurationError,
    MalformedFrameError,
    UnsupportedVersionError,
)

EPOCH_LENGTH_S = 900
BEACON_VERSION = 1
BEACON_SIZE = 24
DEFAULT_TX_POWER_DBM = -4
TAG_SIZE = 16
ADDRESS_SIZE = 6
SEED_SIZE = 32

TAG_DOMAIN = b"tag:v1"
ADDRESS_DOMAIN = b"addr:v1"

# version | address | tx_power (two's complement) | tag
_BEACON_STRUCT = struct.Struct(">B6sb16s")


def epoch_of(timestamp_s: float, epoch_length_s: float = EPOCH_LENGTH_S) -> int:
    """Index of the epoch containing ``timestamp_s`` (floor semantics)."""
    if not epoch_length_s > 0:
        raise InvalidConfigurationError(
            f"epoch length must be positive, got {epoch_length_s!r}")
    if timestamp_s < 0:
        raise InvalidConfigurationError(
            f"timestamp must be non-negative, got {timestamp_s!r}")
    return int(math.floor(timestamp_s / epoch_length_s))


def new_seed() -> bytes:
    return secrets.token_bytes(SEED_SIZE)


def _derive(domain: bytes, seed: bytes, epoch: int, size: int) -> bytes:
    if len(seed) != SEED_SIZE:
        raise InvalidConfigurationError(
            f"device seed must be {SEED_SIZE} bytes, got {len(seed)}")
    if epoch < 0:
        raise InvalidConfigurationError(f"negative epoch {epoch}")
    digest = hashlib.sha256(domain + seed + epoch.to_bytes(8, "big")).digest()
    return digest[:size]


def derive_tag(seed: bytes, epoch: int) -> bytes:
    return _derive(TAG_DOMAIN, seed, epoch, TAG_SIZE)


def derive_address(seed: bytes, epoch: int) -> bytes:
    return _derive(ADDRESS_DOMAIN, seed, epoch, ADDRESS_SIZE)


@dataclass(frozen=True)
class Beacon:
    tag: bytes
    address: bytes
    tx_power_dbm: int = DEFAULT_TX_POWER_DBM
    version: int = BEACON_VERSION

    def __post_init__(self):
        if len(self.tag) != TAG_SIZE:
            raise MalformedFrameError(f"tag must be {TAG_SIZE} bytes")
        if len(self.address) != ADDRESS_SIZE:
            raise MalformedFrameError(f"address must be {ADDRESS_SIZE} bytes")
        if not -128 <= self.tx_power_dbm <= 127:
            raise MalformedFrameError(
                f"tx power {self.tx_power_dbm} does not fit a signed byte")
        if not 0 <= self.version <= 255:
            raise MalformedFrameError(f"version {self.version} out of range")

    @classmethod
    def for_epoch(cls, seed: bytes, epoch: int,
                  tx_power_dbm: int = DEFAULT_TX_POWER_DBM) -> Beacon:
        return cls(tag=derive_tag(seed, epoch),
                   address=derive_address(seed, epoch),
                   tx_power_dbm=tx_power_dbm)


def encode_beacon(beacon: Beacon) -> bytes:
    return _BEACON_STRUCT.pack(beacon.version, beacon.address,
                               beacon.tx_power_dbm, beacon.tag)


def decode_beacon(frame: bytes) -> Beacon:
    if len(frame) != BEACON_SIZE:
        raise MalformedFrameError(
            f"beacon frame must be {BEACON_SIZE} bytes, got {len(frame)}")
    version, address, tx_power, tag = _BEACON_STRUCT.unpack(bytes(frame))
    if version != BEACON_VERSION:
        raise UnsupportedVersionError(f"unsupported beacon version {version}")
    return Beacon(tag=tag, address=address, tx_power_dbm=tx_power,
                  version=version)


def tag_to_hex(tag: bytes) -> str:
    return tag.hex()


def tag_from_hex(text: str) -> bytes:
    """Parse a 32-character lowercase hex tag."""
    if not isinstance(text, str) or len(text) != 2 * TAG_SIZE \
            or text != text.lower():
        raise ValueError(f"tag must be {2 * TAG_SIZE} lowercase hex chars: {text!r}")
    return bytes.fromhex(text)
