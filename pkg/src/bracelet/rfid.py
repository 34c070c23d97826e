"""Risk-level payload stored on the bracelet's RFID tag.

Layout (9 bytes)::

    0-1  magic "RB"
    2    version (1)
    3    risk level (0, 1, 2)
    4-7  issued epoch, big-endian
    8    CRC-8 (poly 0x07, init 0x00) over bytes 0-7
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

from .device import RiskLevel
from .errors import (
    ClockInconsistencyError,
    CorruptPayloadError,
    InvalidRiskError,
    MalformedPayloadError,
)

MAGIC = b"RB"
PAYLOAD_VERSION = 1
PAYLOAD_SIZE = 9
_BODY = struct.Struct(">2sBBI")


def crc8(data: bytes, poly: int = 0x07, init: int = 0x00) -> int:
    crc = init
    for byte in data:
        crc ^= byte
        for _ in range(8):
            if crc & 0x80:
                crc = ((crc << 1) ^ poly) & 0xFF
            else:
                crc = (crc << 1) & 0xFF
    return crc


def encode_risk(risk: RiskLevel, issued_epoch: int) -> bytes:
    risk = RiskLevel(risk)
    if not 0 <= issued_epoch < 2 ** 32:
        raise ValueError(f"issued epoch {issued_epoch} does not fit in 4 bytes")
    body = _BODY.pack(MAGIC, PAYLOAD_VERSION, int(risk), issued_epoch)
    return body + bytes([crc8(body)])


def decode_risk(payload: bytes) -> tuple[RiskLevel, int]:
    payload = bytes(payload)
    if len(payload) != PAYLOAD_SIZE:
        raise MalformedPayloadError(
            f"payload must be {PAYLOAD_SIZE} bytes, got {len(payload)}")
    magic, version, risk, epoch = _BODY.unpack(payload[:8])
    if magic != MAGIC:
        raise MalformedPayloadError(f"bad magic {magic!r}")
    if version != PAYLOAD_VERSION:
        raise MalformedPayloadError(f"unsupported payload version {version}")
    if crc8(payload[:8]) != payload[8]:
        raise CorruptPayloadError("CRC mismatch")
    if risk > max(RiskLevel):
        raise InvalidRiskError(f"risk byte {risk} is not a risk level")
    return RiskLevel(risk), epoch


@dataclass(frozen=True)
class AccessPolicy:
    max_admitted_risk: RiskLevel = RiskLevel.LOW_RISK
    max_age_epochs: int = 96


@dataclass(frozen=True)
class AccessDecision:
    granted: bool
    reason: Optional[str] = None  # "stale" or "risk" when denied


GRANT = AccessDecision(True)


def access_decision(decoded: tuple[RiskLevel, int], now_epoch: int,
                    policy: AccessPolicy = AccessPolicy()) -> AccessDecision:
    risk, issued_epoch = decoded
    if now_epoch < issued_epoch:
        raise ClockInconsistencyError(
            f"reader epoch {now_epoch} precedes issue epoch {issued_epoch}")
    if now_epoch - issued_epoch > policy.max_age_epochs:
        return AccessDecision(False, "stale")
    if risk <= policy.max_admitted_risk:
        return GRANT
    return AccessDecision(False, "risk")
