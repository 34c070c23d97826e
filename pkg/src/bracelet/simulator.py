"""Deterministic discrete-event simulation of a bracelet fleet.

Agents move along piecewise-linear 2-D trajectories. Every beacon interval
each agent broadcasts; every other agent receives it through a log-distance
channel with Gaussian shadowing, or loses it below the reception floor.
Sensor samples are injected from the scenario, and an agent with
``infected_from_s`` develops a fever at that time, which drives it to
HighRisk and (with consent) auto-uploads its tags. Devices poll the
in-process cloud service on a fixed cadence, either downloading case groups
and matching locally or submitting their contacts for a server-side check.

Events at equal timestamps run in a fixed order: rotation, emission,
reception, sensor, matching, then by agent id. All randomness comes from
one seed split into per-use-site substreams, so a scenario always produces
the same report byte for byte.
"""
from __future__ import annotations

import csv
import heapq
import io
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np

from . import protocol
from .cloud import CloudService
from .device import (
    Device,
    DeviceConfig,
    RiskChanged,
    RiskLevel,
    SensorSample,
    UploadReady,
    UploadWithheld,
    ViolationAlert,
)
from .distance import CalibrationSample, PathLossModel, fit_path_loss
from .errors import BraceletError, RejectedSampleError, ScenarioValidationError
from .matching import (
    DEFAULT_EXPOSURE_THRESHOLD_S,
    CaseGroup,
    group_exposures,
    local_match,
)

POLL_INTERVAL_S = 300.0
MIN_CHANNEL_DISTANCE_M = 0.01
CALIBRATION_DISTANCES_M = (0.5, 1.0, 2.0, 3.0, 4.0, 6.0, 8.0)
CALIBRATION_REPEATS = 10
# Reading injected when an agent's infection becomes symptomatic.
FEVER_SAMPLE = dict(temperature_c=38.5, spo2_pct=96.0)

# Event ranks for tie-breaking at equal timestamps.
ROTATION, EMISSION, RECEPTION, SENSOR, MATCHING = range(5)

# RNG use sites; each gets an independent substream of the scenario seed.
_SITE_CHANNEL, _SITE_SEEDS, _SITE_GROUP_IDS, _SITE_CALIBRATION = range(4)


def _substream(seed: int, site: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(entropy=seed, spawn_key=(site,))))


# -- scenario -----------------------------------------------------------------

@dataclass(frozen=True)
class Channel:
    exponent_n: float = 2.0
    pl0_db: float = 40.0
    shadowing_sigma_db: float = 0.0
    reception_floor_dbm: float = -95.0


@dataclass
class Agent:
    id: str
    trajectory: list  # (t_s, x_m, y_m), strictly increasing t
    sensor_events: list = field(default_factory=list)
    infected_from_s: Optional[float] = None
    consent: bool = True

    @cached_property
    def _track(self):
        return tuple(np.asarray(c, dtype=float) for c in zip(*self.trajectory))

    def position(self, t):
        """Interpolated (x, y) at time(s) ``t``; held constant outside."""
        ts, xs, ys = self._track
        return np.interp(t, ts, xs), np.interp(t, ts, ys)


@dataclass
class Scenario:
    seed: int
    duration_s: float
    agents: list
    epoch_length_s: float = protocol.EPOCH_LENGTH_S
    beacon_interval_s: float = 1.0
    channel: Channel = Channel()
    matching_mode: str = "local"
    start_s: float = 0.0
    poll_interval_s: float = POLL_INTERVAL_S
    exposure_threshold_s: float = DEFAULT_EXPOSURE_THRESHOLD_S
    device_config: dict = field(default_factory=dict)

    @property
    def end_s(self) -> float:
        return self.start_s + self.duration_s

    def config(self) -> DeviceConfig:
        overrides = dict(self.device_config)
        overrides["epoch_length_s"] = self.epoch_length_s
        return DeviceConfig.with_overrides(overrides)

    @classmethod
    def from_dict(cls, data) -> Scenario:
        """Validate and build a scenario; every problem is reported at once."""
        problems = validate_scenario(data)
        if problems:
            raise ScenarioValidationError(problems)
        agents = []
        for a in data["agents"]:
            agents.append(Agent(
                id=a["id"],
                trajectory=[_waypoint(w) for w in a["trajectory"]],
                sensor_events=[SensorSample(
                    timestamp_s=float(e["timestamp_s"]),
                    temperature_c=float(e["temperature_c"]),
                    spo2_pct=float(e["spo2_pct"]),
                    cough_event=bool(e.get("cough_event", False)))
                    for e in a.get("sensor_events", [])],
                infected_from_s=(None if a.get("infected_from_s") is None
                                 else float(a["infected_from_s"])),
                consent=a.get("consent", True),
            ))
        optional = {k: float(data[k]) for k in (
            "epoch_length_s", "beacon_interval_s", "start_s", "poll_interval_s",
            "exposure_threshold_s") if k in data}
        for key in ("matching_mode", "device_config"):
            if key in data:
                optional[key] = data[key]
        return cls(seed=int(data["seed"]), duration_s=float(data["duration_s"]),
                   agents=agents, channel=Channel(**data.get("channel", {})),
                   **optional)

    @classmethod
    def from_json(cls, text: str) -> Scenario:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ScenarioValidationError(
                [f"line {exc.lineno}: invalid JSON: {exc.msg}"]) from None
        return cls.from_dict(data)


def _waypoint(w) -> tuple:
    if isinstance(w, dict):
        return float(w["t_s"]), float(w["x_m"]), float(w["y_m"])
    t, x, y = w
    return float(t), float(x), float(y)


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) \
        and math.isfinite(v)


def validate_scenario(data) -> list[str]:
    """Return a list of human-readable problems (empty when valid)."""
    if not isinstance(data, dict):
        return ["scenario must be a JSON object"]
    problems = []

    seed = data.get("seed")
    if not isinstance(seed, int) or isinstance(seed, bool) \
            or not 0 <= seed < 2 ** 64:
        problems.append("seed must be an integer in [0, 2^64)")
    for key, required in (("duration_s", True), ("epoch_length_s", False),
                          ("beacon_interval_s", False), ("poll_interval_s", False),
                          ("exposure_threshold_s", False)):
        if key not in data:
            if required:
                problems.append(f"{key} is required")
        elif not _is_number(data[key]) or data[key] <= 0:
            problems.append(f"{key} must be a positive number")
    start = data.get("start_s", 0)
    if not _is_number(start) or start < 0:
        problems.append("start_s must be a non-negative number")
        start = 0
    duration = data.get("duration_s")
    end = start + duration if _is_number(duration) else None

    if data.get("matching_mode", "local") not in ("local", "cloud"):
        problems.append("matching_mode must be 'local' or 'cloud'")

    channel = data.get("channel", {})
    if not isinstance(channel, dict):
        problems.append("channel must be an object")
    else:
        known = set(Channel.__dataclass_fields__)
        for key in sorted(set(channel) - known):
            problems.append(f"channel: unknown field {key!r}")
        for key in sorted(known & set(channel)):
            if not _is_number(channel[key]):
                problems.append(f"channel.{key} must be a number")
        if _is_number(channel.get("exponent_n", 2.0)) \
                and channel.get("exponent_n", 2.0) <= 0:
            problems.append("channel.exponent_n must be positive")
        if _is_number(channel.get("shadowing_sigma_db", 0.0)) \
                and channel.get("shadowing_sigma_db", 0.0) < 0:
            problems.append("channel.shadowing_sigma_db must be non-negative")

    overrides = data.get("device_config", {})
    if not isinstance(overrides, dict):
        problems.append("device_config must be an object")
    else:
        try:
            DeviceConfig.with_overrides(
                {**overrides, "epoch_length_s": data.get("epoch_length_s", 900)})
        except (BraceletError, TypeError) as exc:
            problems.append(f"device_config: {exc}")

    agents = data.get("agents")
    if not isinstance(agents, list) or not agents:
        problems.append("agents must be a non-empty list")
        return problems
    seen = set()
    for i, agent in enumerate(agents):
        if not isinstance(agent, dict):
            problems.append(f"agents[{i}] must be an object")
            continue
        aid = agent.get("id")
        label = f"agent {aid!r}" if isinstance(aid, str) and aid else f"agents[{i}]"
        if not isinstance(aid, str) or not aid:
            problems.append(f"{label}: id must be a non-empty string")
        elif aid in seen:
            problems.append(f"{label}: duplicate id")
        seen.add(aid)
        problems.extend(_validate_agent(agent, label, start, end))
    return problems


def _validate_agent(agent: dict, label: str, start, end) -> list[str]:
    problems = []
    trajectory = agent.get("trajectory")
    if not isinstance(trajectory, list) or not trajectory:
        problems.append(f"{label}: trajectory must be a non-empty list of waypoints")
    else:
        last_t = None
        for j, w in enumerate(trajectory):
            try:
                t, x, y = _waypoint(w)
                if not all(map(math.isfinite, (t, x, y))):
                    raise ValueError
            except (TypeError, ValueError, KeyError):
                problems.append(f"{label}: waypoint {j} must be [t_s, x_m, y_m]")
                last_t = None
                continue
            if last_t is not None and t <= last_t:
                problems.append(
                    f"{label}: waypoint {j} at t={t:g} does not come after "
                    f"t={last_t:g} (times must be strictly increasing)")
            last_t = t

    for j, e in enumerate(agent.get("sensor_events", [])):
        where = f"{label}: sensor_events[{j}]"
        if not isinstance(e, dict) or not all(
                _is_number(e.get(k)) for k in
                ("timestamp_s", "temperature_c", "spo2_pct")):
            problems.append(
                f"{where} needs numeric timestamp_s, temperature_c, spo2_pct")
            continue
        if end is not None and not start <= e["timestamp_s"] <= end:
            problems.append(f"{where} at t={e['timestamp_s']:g} is outside the run")
        try:
            SensorSample(e["timestamp_s"], e["temperature_c"],
                         e["spo2_pct"]).validate()
        except RejectedSampleError as exc:
            problems.append(f"{where}: {exc}")

    infected = agent.get("infected_from_s")
    if infected is not None:
        if not _is_number(infected):
            problems.append(f"{label}: infected_from_s must be a number")
        elif end is not None and not start <= infected <= end:
            problems.append(f"{label}: infected_from_s={infected:g} is outside the run")
    if not isinstance(agent.get("consent", True), bool):
        problems.append(f"{label}: consent must be true or false")
    return problems


# -- channel ------------------------------------------------------------------

def channel_rssi(distance_m: float, channel: Channel, rng: np.random.Generator,
                 tx_power_dbm: float = protocol.DEFAULT_TX_POWER_DBM
                 ) -> Optional[float]:
    """Received power for one beacon, or None if it falls below the floor."""
    distance_m = max(distance_m, MIN_CHANNEL_DISTANCE_M)
    rssi = tx_power_dbm - (channel.pl0_db
                           + 10.0 * channel.exponent_n * math.log10(distance_m))
    if channel.shadowing_sigma_db > 0:
        rssi += float(rng.normal(0.0, channel.shadowing_sigma_db))
    if rssi < channel.reception_floor_dbm:
        return None
    return rssi


def calibrate(channel: Channel, rng: np.random.Generator,
              tx_power_dbm: float = protocol.DEFAULT_TX_POWER_DBM) -> PathLossModel:
    """Fit a device model from calibration beacons sent through the channel."""
    samples = []
    for d in CALIBRATION_DISTANCES_M:
        for _ in range(CALIBRATION_REPEATS):
            rssi = tx_power_dbm - (channel.pl0_db
                                   + 10.0 * channel.exponent_n * math.log10(d))
            if channel.shadowing_sigma_db > 0:
                rssi += float(rng.normal(0.0, channel.shadowing_sigma_db))
            samples.append(CalibrationSample(tx_power_dbm, rssi, d))
    return fit_path_loss(samples)


# -- report -------------------------------------------------------------------

@dataclass
class SimReport:
    seed: int
    matching_mode: str
    risk_timeline: dict
    violations: list
    decisions: list
    uploads: list
    ground_truth_exposure_s: dict
    detected_pairs: list
    counts: dict
    score: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "matching_mode": self.matching_mode,
            "risk_timeline": self.risk_timeline,
            "violations": self.violations,
            "decisions": self.decisions,
            "uploads": self.uploads,
            "ground_truth_exposure_s": self.ground_truth_exposure_s,
            "detected_pairs": self.detected_pairs,
            "counts": self.counts,
            "score": self.score,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def risk_timeline_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["agent", "t_s", "risk"])
        for agent in sorted(self.risk_timeline):
            for t, level in self.risk_timeline[agent]:
                writer.writerow([agent, repr(t), level])
        return buf.getvalue()

    def final_decision(self, agent: str) -> Optional[dict]:
        rows = [d for d in self.decisions if d["agent"] == agent]
        return rows[-1] if rows else None


def _pair_key(a: str, b: str) -> str:
    return f"{a}->{b}"


# -- event loop ---------------------------------------------------------------

class _Run:
    def __init__(self, scenario: Scenario):
        self.s = scenario
        self.config = scenario.config()
        self.agents = {a.id: a for a in sorted(scenario.agents, key=lambda a: a.id)}
        self.ids = list(self.agents)

        channel_rng = _substream(scenario.seed, _SITE_CHANNEL)
        seed_rng = _substream(scenario.seed, _SITE_SEEDS)
        id_rng = _substream(scenario.seed, _SITE_GROUP_IDS)
        calib_rng = _substream(scenario.seed, _SITE_CALIBRATION)
        self.channel_rng = channel_rng

        self.service = CloudService(threshold_s=scenario.exposure_threshold_s,
                                    id_factory=lambda: id_rng.bytes(16))
        model = calibrate(scenario.channel, calib_rng, self.config.tx_power_dbm)
        self.devices = {
            aid: Device(seed=seed_rng.bytes(protocol.SEED_SIZE), config=self.config,
                        model=model, start_s=scenario.start_s,
                        consent_granted=self.agents[aid].consent)
            for aid in self.ids
        }
        self.snapshots = {aid: [] for aid in self.ids}
        self.cursors = {aid: 0 for aid in self.ids}
        self.uploader = {}  # group id hex -> agent id

        self.queue = []
        self.seq = 0
        self.risk_timeline = {aid: [[scenario.start_s, RiskLevel.NO_RISK.label]]
                              for aid in self.ids}
        self.violations = []
        self.decisions = []
        self.uploads = []
        self.detected = set()
        self.counts = dict(emissions=0, receptions=0, dropped=0, rotations=0,
                           sensor_samples=0, rejected_samples=0,
                           violation_alerts=0, counted_violations=0,
                           uploads=0, withheld_uploads=0, matches=0)

    def push(self, t: float, rank: int, agent: str, payload=None) -> None:
        self.seq += 1
        heapq.heappush(self.queue, (t, rank, agent, self.seq, payload))

    def distance(self, a: str, b: str, t: float) -> float:
        xa, ya = self.agents[a].position(t)
        xb, yb = self.agents[b].position(t)
        return float(math.hypot(xa - xb, ya - yb))

    # scheduling helpers; k counts intervals from the start so times never drift

    def _tick(self, k: int) -> float:
        return self.s.start_s + k * self.s.beacon_interval_s

    def schedule(self) -> None:
        s = self.s
        for aid in self.ids:
            self.push(self._tick(0), EMISSION, aid, 0)
            first = protocol.epoch_of(s.start_s, s.epoch_length_s) + 1
            if first * s.epoch_length_s <= s.end_s:
                self.push(first * s.epoch_length_s, ROTATION, aid, first)
            agent = self.agents[aid]
            for sample in agent.sensor_events:
                self.push(sample.timestamp_s, SENSOR, aid, sample)
            if agent.infected_from_s is not None:
                t = float(agent.infected_from_s)
                self.push(t, SENSOR, aid, SensorSample(t, **FEVER_SAMPLE))
        self.push(self._poll_time(1), MATCHING, "", 1)

    def _poll_time(self, k: int) -> float:
        return min(self.s.start_s + k * self.s.poll_interval_s, self.s.end_s)

    def run(self) -> SimReport:
        self.schedule()
        while self.queue:
            t, rank, aid, _, payload = heapq.heappop(self.queue)
            if rank == ROTATION:
                self.on_rotation(t, aid, payload)
            elif rank == EMISSION:
                self.on_emission(t, aid, payload)
            elif rank == RECEPTION:
                self.on_reception(t, aid, *payload)
            elif rank == SENSOR:
                self.on_sensor(t, aid, payload)
            else:
                self.on_matching(t, payload)
        return self.report()

    def on_rotation(self, t, aid, epoch) -> None:
        if self.devices[aid].rotate_if_due(t) is not None:
            self.counts["rotations"] += 1
        nxt = (epoch + 1) * self.s.epoch_length_s
        if nxt <= self.s.end_s:
            self.push(nxt, ROTATION, aid, epoch + 1)

    def on_emission(self, t, aid, k) -> None:
        device = self.devices[aid]
        frame = protocol.encode_beacon(device.beacon(t))
        self.counts["emissions"] += 1
        for other in self.ids:
            if other == aid:
                continue
            rssi = channel_rssi(self.distance(aid, other, t), self.s.channel,
                                self.channel_rng, device.config.tx_power_dbm)
            if rssi is None:
                self.counts["dropped"] += 1
            else:
                self.push(t, RECEPTION, other, (frame, rssi))
        if self._tick(k + 1) <= self.s.end_s:
            self.push(self._tick(k + 1), EMISSION, aid, k + 1)

    def on_reception(self, t, aid, frame, rssi) -> None:
        self.counts["receptions"] += 1
        device = self.devices[aid]
        effects = device.on_beacon(protocol.decode_beacon(frame), rssi, t)
        self.apply(t, aid, effects + device.assess_risk(t))

    def on_sensor(self, t, aid, sample) -> None:
        device = self.devices[aid]
        try:
            device.on_sensor_sample(sample, t)
        except RejectedSampleError:
            self.counts["rejected_samples"] += 1
            return
        self.counts["sensor_samples"] += 1
        self.apply(t, aid, device.assess_risk(t))

    def on_matching(self, t, k) -> None:
        threshold = self.s.exposure_threshold_s
        for aid in self.ids:
            device = self.devices[aid]
            contacts = list(device.contacts.values())
            if self.s.matching_mode == "local":
                body = json.loads(self.service.fetch_body(self.cursors[aid]))
                self.snapshots[aid].extend(
                    CaseGroup.from_dict(g) for g in body["groups"])
                self.cursors[aid] = body["new_cursor"]
                snapshot = self.snapshots[aid]
                decision = local_match(snapshot, contacts, threshold).to_dict()
                lookup = {tag: g for g in snapshot for tag in g.tags}
            else:
                request = {"contacts": [
                    {"tag": c.tag.hex(), "exposure_s": c.exposure_s}
                    for c in contacts], "threshold_s": threshold}
                decision = self.service.handle_check(json.dumps(request))
                lookup = self.service.index.by_tag
            self.counts["matches"] += 1
            self.decisions.append({"t_s": t, "agent": aid, **decision})
            # Attribution to the uploader is simulator-side ground truth only.
            for gid, total in group_exposures(lookup, contacts).items():
                if total >= threshold:
                    self.detected.add((aid, self.uploader[gid.hex()]))
            self.apply(t, aid, device.record_decision(decision["positive"], t))
        if t < self.s.end_s:
            self.push(self._poll_time(k + 1), MATCHING, "", k + 1)

    def apply(self, t, aid, effects) -> None:
        for effect in effects:
            if isinstance(effect, ViolationAlert):
                self.counts["violation_alerts"] += 1
                if effect.counted:
                    self.counts["counted_violations"] += 1
                    self.violations.append({"t_s": t, "agent": aid,
                                            "distance_m": effect.distance_m})
            elif isinstance(effect, RiskChanged):
                self.risk_timeline[aid].append([t, effect.new.label])
            elif isinstance(effect, UploadReady):
                response = self.service.handle_upload(
                    json.dumps(effect.bundle.to_request()))
                self.uploader[response["group_id"]] = aid
                self.counts["uploads"] += 1
                self.uploads.append({"t_s": t, "agent": aid,
                                     "group_id": response["group_id"],
                                     "tag_count": len(effect.bundle.tags)})
            elif isinstance(effect, UploadWithheld):
                self.counts["withheld_uploads"] += 1

    def ground_truth(self) -> dict:
        """Seconds each agent spent within the violation threshold of each
        infected agent, sampled on the beacon grid over the whole run."""
        s = self.s
        n_ticks = int(math.ceil(s.duration_s / s.beacon_interval_s - 1e-9))
        times = s.start_s + np.arange(n_ticks) * s.beacon_interval_s
        pos = {aid: self.agents[aid].position(times) for aid in self.ids}
        out = {}
        for b in self.ids:
            if self.agents[b].infected_from_s is None:
                continue
            for a in self.ids:
                if a == b:
                    continue
                d = np.hypot(pos[a][0] - pos[b][0], pos[a][1] - pos[b][1])
                close = int(np.count_nonzero(d <= self.config.violation_threshold_m))
                out[_pair_key(a, b)] = close * s.beacon_interval_s
        return out

    def report(self) -> SimReport:
        report = SimReport(
            seed=self.s.seed,
            matching_mode=self.s.matching_mode,
            risk_timeline=self.risk_timeline,
            violations=self.violations,
            decisions=self.decisions,
            uploads=self.uploads,
            ground_truth_exposure_s=self.ground_truth(),
            detected_pairs=sorted(_pair_key(a, b) for a, b in self.detected),
            counts=self.counts,
        )
        report.score = score(report, self.s)
        return report


def run(scenario: Scenario) -> SimReport:
    return _Run(scenario).run()


def score(report: SimReport, scenario: Scenario) -> dict:
    """Precision and recall of pairwise exposure detection.

    Ground truth is every ordered pair whose true proximity to an infected
    agent reached the exposure threshold, restricted to infected agents that
    actually uploaded; an infected agent without an upload is undetectable
    by design and is left out. Empty denominators score 1.0.
    """
    infected = {a.id for a in scenario.agents if a.infected_from_s is not None}
    uploaded = {u["agent"] for u in report.uploads}
    truth = set()
    for a in scenario.agents:
        for b in infected & uploaded:
            if a.id == b:
                continue
            exposure = report.ground_truth_exposure_s.get(_pair_key(a.id, b), 0.0)
            if exposure >= scenario.exposure_threshold_s:
                truth.add(_pair_key(a.id, b))
    predicted = set(report.detected_pairs)
    hits = len(truth & predicted)
    return {
        "precision": hits / len(predicted) if predicted else 1.0,
        "recall": hits / len(truth) if truth else 1.0,
    }
