"""Bracelet runtime: contacts and tags tables, symptoms, and risk level.

The runtime is a plain state object. Every operation takes the current time
explicitly and returns its effects as values, so the same code drives the
simulator, tests, and any real event loop.
"""
from __future__ import annotations

import enum
import json
from collections import deque
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

from . import protocol
from .distance import PathLossModel, estimate_distance, is_violation
from .errors import (
    ConsentDeniedError,
    InvalidConfigurationError,
    NothingToUploadError,
    RejectedSampleError,
)

FEVER_THRESHOLD_C = 38.0
LOW_SPO2_THRESHOLD_PCT = 90.0
VIOLATION_DEBOUNCE_S = 60.0
DAY_S = 86400.0

# Used until a device is given a fitted model.
DEFAULT_MODEL = PathLossModel(n=2.0, pl0_db=40.0)


class RiskLevel(enum.IntEnum):
    NO_RISK = 0
    LOW_RISK = 1
    HIGH_RISK = 2

    @property
    def label(self) -> str:
        return ("NoRisk", "LowRisk", "HighRisk")[self.value]

    @classmethod
    def parse(cls, value) -> RiskLevel:
        """Accept an int, a member name, or a label like ``"LowRisk"``."""
        if isinstance(value, RiskLevel):
            return value
        if isinstance(value, int):
            return cls(value)
        text = str(value).strip()
        if text.isdigit():
            return cls(int(text))
        key = text.replace("-", "").replace("_", "").lower()
        for member in cls:
            if member.label.lower() == key:
                return member
        raise ValueError(f"unknown risk level {value!r}")


def classify_risk(symptoms_abnormal: bool, infected_contact: bool,
                  excessive_violations: bool) -> RiskLevel:
    if symptoms_abnormal or (infected_contact and excessive_violations):
        return RiskLevel.HIGH_RISK
    if infected_contact or excessive_violations:
        return RiskLevel.LOW_RISK
    return RiskLevel.NO_RISK


@dataclass
class DeviceConfig:
    epoch_length_s: float = protocol.EPOCH_LENGTH_S
    contact_gap_s: float = 10.0
    violation_threshold_m: float = 2.0
    excessive_violation_count: int = 10
    violation_window_s: float = DAY_S
    cough_rate_threshold: int = 10
    cough_window_s: float = 3600.0
    retention_s: float = 14 * DAY_S
    auto_upload_on_high_risk: bool = True
    consent_required: bool = True
    tx_power_dbm: int = protocol.DEFAULT_TX_POWER_DBM

    def __post_init__(self):
        for name in ("epoch_length_s", "contact_gap_s", "violation_threshold_m",
                     "violation_window_s", "cough_window_s", "retention_s"):
            if not getattr(self, name) > 0:
                raise InvalidConfigurationError(f"{name} must be positive")
        for name in ("excessive_violation_count", "cough_rate_threshold"):
            if getattr(self, name) < 1:
                raise InvalidConfigurationError(f"{name} must be at least 1")

    @classmethod
    def with_overrides(cls, overrides: Optional[dict] = None) -> DeviceConfig:
        overrides = dict(overrides or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(overrides) - known)
        if unknown:
            raise InvalidConfigurationError(
                f"unknown device config keys: {', '.join(unknown)}")
        return cls(**overrides)


@dataclass
class ContactRecord:
    tag: bytes
    first_heard_s: float
    last_heard_s: float
    exposure_s: float = 0.0
    min_distance_m: float = float("inf")


@dataclass(frozen=True)
class OwnTagRecord:
    tag: bytes
    epoch: int
    active_from_s: float
    active_until_s: float


@dataclass(frozen=True)
class SensorSample:
    timestamp_s: float
    temperature_c: float
    spo2_pct: float
    cough_event: bool = False

    def validate(self) -> None:
        if not 25.0 <= self.temperature_c <= 45.0:
            raise RejectedSampleError(
                f"temperature {self.temperature_c} C outside [25, 45]")
        if not 50.0 <= self.spo2_pct <= 100.0:
            raise RejectedSampleError(f"SpO2 {self.spo2_pct}% outside [50, 100]")


@dataclass(frozen=True)
class SymptomState:
    fever: bool = False
    low_spo2: bool = False
    excessive_cough: bool = False

    @property
    def abnormal(self) -> bool:
        return self.fever or self.low_spo2 or self.excessive_cough


@dataclass(frozen=True)
class UploadBundle:
    """Own tags ready to publish: ``(tag, active_from_s, active_until_s)``."""

    tags: tuple

    def to_request(self) -> dict:
        # Activity intervals stay on the device; the service only links tags.
        return {"tags": [protocol.tag_to_hex(t) for t, _, _ in self.tags]}


# Effects returned to whoever drives the device.

@dataclass(frozen=True)
class ViolationAlert:
    at_s: float
    tag: bytes
    distance_m: float
    counted: bool


@dataclass(frozen=True)
class ContactUpdated:
    record: ContactRecord


@dataclass(frozen=True)
class RiskChanged:
    at_s: float
    old: RiskLevel
    new: RiskLevel


@dataclass(frozen=True)
class UploadReady:
    at_s: float
    bundle: UploadBundle


@dataclass(frozen=True)
class UploadWithheld:
    at_s: float
    reason: str


@dataclass
class Device:
    seed: bytes = field(default_factory=protocol.new_seed)
    config: DeviceConfig = field(default_factory=DeviceConfig)
    model: PathLossModel = DEFAULT_MODEL
    start_s: float = 0.0
    consent_granted: bool = False

    contacts: dict = field(default_factory=dict)
    own_tags: list = field(default_factory=list)
    risk: RiskLevel = RiskLevel.NO_RISK
    infected_contact: bool = False
    uploaded: bool = False
    upload_withheld: bool = False
    temperature_c: Optional[float] = None
    spo2_pct: Optional[float] = None
    cough_times: deque = field(default_factory=deque)
    violation_times: deque = field(default_factory=deque)
    last_counted_violation: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.seed) != protocol.SEED_SIZE:
            raise InvalidConfigurationError("device seed must be 32 bytes")
        if not self.own_tags:
            epoch = protocol.epoch_of(self.start_s, self.config.epoch_length_s)
            self.own_tags.append(self._own_record(epoch, self.start_s))

    def _own_record(self, epoch: int, active_from: float) -> OwnTagRecord:
        length = self.config.epoch_length_s
        return OwnTagRecord(tag=protocol.derive_tag(self.seed, epoch), epoch=epoch,
                            active_from_s=active_from,
                            active_until_s=(epoch + 1) * length)

    # -- identity -----------------------------------------------------------

    @property
    def current_tag(self) -> OwnTagRecord:
        return self.own_tags[-1]

    def rotate_if_due(self, now_s: float):
        """Move to the epoch containing ``now_s``.

        Returns the new ``(tag, address)`` or None if the epoch is unchanged.
        Epochs the device slept through are backfilled so the tags table
        stays gap-free.
        """
        length = self.config.epoch_length_s
        target = protocol.epoch_of(now_s, length)
        current = self.current_tag.epoch
        if target <= current:
            return None
        for epoch in range(current + 1, target + 1):
            self.own_tags.append(self._own_record(epoch, epoch * length))
        return self.current_tag.tag, protocol.derive_address(self.seed, target)

    def beacon(self, now_s: float) -> protocol.Beacon:
        self.rotate_if_due(now_s)
        return protocol.Beacon.for_epoch(self.seed, self.current_tag.epoch,
                                         self.config.tx_power_dbm)

    # -- reception ----------------------------------------------------------

    def on_beacon(self, beacon: protocol.Beacon, rssi_dbm: float,
                  now_s: float) -> list:
        cfg = self.config
        effects = []
        distance = estimate_distance(self.model, beacon.tx_power_dbm, rssi_dbm)

        if is_violation(distance, cfg.violation_threshold_m):
            last = self.last_counted_violation.get(beacon.tag)
            counted = last is None or now_s - last >= VIOLATION_DEBOUNCE_S
            if counted:
                self.last_counted_violation[beacon.tag] = now_s
                self.violation_times.append(now_s)
            effects.append(ViolationAlert(now_s, beacon.tag, distance, counted))

        record = self.contacts.get(beacon.tag)
        if record is None:
            record = ContactRecord(tag=beacon.tag, first_heard_s=now_s,
                                   last_heard_s=now_s, min_distance_m=distance)
            self.contacts[beacon.tag] = record
        else:
            gap = now_s - record.last_heard_s
            if 0 <= gap <= cfg.contact_gap_s:
                record.exposure_s += gap
            record.last_heard_s = max(record.last_heard_s, now_s)
            record.min_distance_m = min(record.min_distance_m, distance)
        effects.append(ContactUpdated(replace(record)))
        return effects

    def excessive_violations(self, now_s: float) -> bool:
        horizon = now_s - self.config.violation_window_s
        while self.violation_times and self.violation_times[0] <= horizon:
            self.violation_times.popleft()
        return len(self.violation_times) >= self.config.excessive_violation_count

    # -- sensing ------------------------------------------------------------

    def on_sensor_sample(self, sample: SensorSample, now_s: float) -> SymptomState:
        sample.validate()
        self.temperature_c = sample.temperature_c
        self.spo2_pct = sample.spo2_pct
        if sample.cough_event:
            self.cough_times.append(now_s)
        return self.symptoms(now_s)

    def symptoms(self, now_s: float) -> SymptomState:
        horizon = now_s - self.config.cough_window_s
        while self.cough_times and self.cough_times[0] <= horizon:
            self.cough_times.popleft()
        return SymptomState(
            fever=self.temperature_c is not None
            and self.temperature_c > FEVER_THRESHOLD_C,
            low_spo2=self.spo2_pct is not None
            and self.spo2_pct < LOW_SPO2_THRESHOLD_PCT,
            excessive_cough=len(self.cough_times) >= self.config.cough_rate_threshold,
        )

    # -- risk ---------------------------------------------------------------

    def record_decision(self, positive: bool, now_s: float) -> list:
        """Feed an exposure-matching outcome; a positive result is sticky."""
        self.infected_contact = self.infected_contact or bool(positive)
        return self.assess_risk(now_s)

    def assess_risk(self, now_s: float) -> list:
        """Reclassify and emit any resulting effects.

        Automatic upload fires once, on HighRisk caused by abnormal symptoms.
        HighRisk reached through an infected contact plus violations does not
        upload: that wearer is a suspected case, not a symptomatic one.
        """
        abnormal = self.symptoms(now_s).abnormal
        level = classify_risk(abnormal, self.infected_contact,
                              self.excessive_violations(now_s))
        effects = []
        if level != self.risk:
            effects.append(RiskChanged(now_s, self.risk, level))
            self.risk = level
        if (abnormal and self.config.auto_upload_on_high_risk
                and not self.uploaded):
            try:
                bundle = self.prepare_upload(self.consent_granted, now_s)
            except ConsentDeniedError as exc:
                if not self.upload_withheld:
                    self.upload_withheld = True
                    effects.append(UploadWithheld(now_s, str(exc)))
            else:
                self.uploaded = True
                effects.append(UploadReady(now_s, bundle))
        return effects

    # -- upload and hygiene -------------------------------------------------

    def prepare_upload(self, consent_given: bool, now_s: float) -> UploadBundle:
        if self.config.consent_required and not consent_given:
            raise ConsentDeniedError("user has not consented to tag upload")
        if not self.own_tags:
            raise NothingToUploadError("tags table is empty")
        self.rotate_if_due(now_s)
        horizon = now_s - self.config.retention_s
        records = [r for r in self.own_tags if r.active_until_s > horizon]
        return UploadBundle(tags=tuple(
            (r.tag, r.active_from_s, r.active_until_s) for r in records))

    def prune(self, now_s: float) -> tuple[int, int]:
        horizon = now_s - self.config.retention_s
        stale = [t for t, r in self.contacts.items() if r.last_heard_s < horizon]
        for tag in stale:
            del self.contacts[tag]
            self.last_counted_violation.pop(tag, None)
        # The current record is always kept so the device can keep broadcasting.
        keep = [r for r in self.own_tags[:-1] if r.active_until_s >= horizon]
        removed_tags = len(self.own_tags) - 1 - len(keep)
        self.own_tags = keep + self.own_tags[-1:]
        return len(stale), removed_tags

    # -- snapshots ----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "seed": self.seed.hex(),
            "config": asdict(self.config),
            "model": {"n": self.model.n, "pl0_db": self.model.pl0_db,
                      "rmse_db": self.model.rmse_db},
            "start_s": self.start_s,
            "consent_granted": self.consent_granted,
            "contacts": [
                {"tag": r.tag.hex(), "first_heard_s": r.first_heard_s,
                 "last_heard_s": r.last_heard_s, "exposure_s": r.exposure_s,
                 "min_distance_m": r.min_distance_m}
                for r in self.contacts.values()
            ],
            "tags": [
                {"tag": r.tag.hex(), "epoch": r.epoch,
                 "active_from_s": r.active_from_s,
                 "active_until_s": r.active_until_s}
                for r in self.own_tags
            ],
            "counters": {
                "risk": int(self.risk),
                "infected_contact": self.infected_contact,
                "uploaded": self.uploaded,
                "upload_withheld": self.upload_withheld,
                "temperature_c": self.temperature_c,
                "spo2_pct": self.spo2_pct,
                "cough_times": list(self.cough_times),
                "violation_times": list(self.violation_times),
                "last_counted_violation": {
                    t.hex(): s for t, s in self.last_counted_violation.items()},
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> Device:
        counters = data["counters"]
        contacts = {}
        for item in data["contacts"]:
            tag = bytes.fromhex(item["tag"])
            contacts[tag] = ContactRecord(
                tag=tag, first_heard_s=item["first_heard_s"],
                last_heard_s=item["last_heard_s"], exposure_s=item["exposure_s"],
                min_distance_m=item["min_distance_m"])
        own = [OwnTagRecord(bytes.fromhex(i["tag"]), i["epoch"],
                            i["active_from_s"], i["active_until_s"])
               for i in data["tags"]]
        return cls(
            seed=bytes.fromhex(data["seed"]),
            config=DeviceConfig(**data["config"]),
            model=PathLossModel(**data["model"]),
            start_s=data["start_s"],
            consent_granted=data["consent_granted"],
            contacts=contacts,
            own_tags=own,
            risk=RiskLevel(counters["risk"]),
            infected_contact=counters["infected_contact"],
            uploaded=counters["uploaded"],
            upload_withheld=counters.get("upload_withheld", False),
            temperature_c=counters["temperature_c"],
            spo2_pct=counters["spo2_pct"],
            cough_times=deque(counters["cough_times"]),
            violation_times=deque(counters["violation_times"]),
            last_counted_violation={
                bytes.fromhex(t): s
                for t, s in counters["last_counted_violation"].items()},
        )

    @classmethod
    def from_json(cls, text: str) -> Device:
        return cls.from_dict(json.loads(text))
