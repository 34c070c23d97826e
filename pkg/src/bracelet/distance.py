"""Log-distance path-loss regression from (tx power, RSSI) to meters.

The measured loss ``tx_power - rssi`` is modelled as

    loss(d) = pl0 + 10 * n * log10(d)

with the reference distance fixed at 1 m. Fitting is ordinary least squares
in ``log10(d)``; the inverse gives the distance estimate.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DegenerateCalibrationError, ImplausibleFitError

DEFAULT_VIOLATION_THRESHOLD_M = 2.0
MIN_DISTANCE_M = 0.01
MAX_DISTANCE_M = 100.0
EXPONENT_BAND = (0.5, 8.0)


@dataclass(frozen=True)
class CalibrationSample:
    tx_power_dbm: float
    rssi_dbm: float
    distance_m: float

    def __post_init__(self):
        if not self.distance_m > 0:
            raise ValueError(f"distance must be positive, got {self.distance_m}")


@dataclass(frozen=True)
class PathLossModel:
    n: float
    pl0_db: float
    rmse_db: float = 0.0

    def loss_at(self, distance_m):
        """Predicted path loss in dB at ``distance_m`` (scalar or array)."""
        return self.pl0_db + 10.0 * self.n * np.log10(distance_m)

    def to_json(self) -> str:
        return json.dumps({"n": self.n, "pl0_db": self.pl0_db,
                           "rmse_db": self.rmse_db})

    @classmethod
    def from_json(cls, text: str) -> PathLossModel:
        data = json.loads(text)
        return cls(n=float(data["n"]), pl0_db=float(data["pl0_db"]),
                   rmse_db=float(data.get("rmse_db", 0.0)))


def fit_path_loss(samples: Iterable[CalibrationSample]) -> PathLossModel:
    samples = list(samples)
    if len(samples) < 2:
        raise DegenerateCalibrationError("need at least 2 calibration samples")
    distances = np.array([s.distance_m for s in samples], dtype=float)
    if np.unique(distances).size < 2:
        raise DegenerateCalibrationError(
            "calibration needs at least 2 distinct distances")
    loss = np.array([s.tx_power_dbm - s.rssi_dbm for s in samples], dtype=float)

    design = np.column_stack([np.ones_like(distances), 10.0 * np.log10(distances)])
    (pl0, n), *_ = np.linalg.lstsq(design, loss, rcond=None)
    residual = loss - design @ np.array([pl0, n])
    rmse = float(np.sqrt(np.mean(residual ** 2)))

    lo, hi = EXPONENT_BAND
    if not lo < n < hi:
        raise ImplausibleFitError(float(n), float(pl0))
    return PathLossModel(n=float(n), pl0_db=float(pl0), rmse_db=rmse)


def estimate_distance(model: PathLossModel, tx_power_dbm: float,
                      rssi_dbm: float) -> float:
    exponent = (tx_power_dbm - rssi_dbm - model.pl0_db) / (10.0 * model.n)
    # Clamp in log space first so extreme RSSI cannot overflow.
    exponent = min(max(exponent, math.log10(MIN_DISTANCE_M)),
                   math.log10(MAX_DISTANCE_M))
    return min(max(10.0 ** exponent, MIN_DISTANCE_M), MAX_DISTANCE_M)


def is_violation(distance_m: float,
                 threshold_m: float = DEFAULT_VIOLATION_THRESHOLD_M) -> bool:
    if not threshold_m > 0:
        raise ValueError(f"threshold must be positive, got {threshold_m}")
    return distance_m < threshold_m


def read_calibration_csv(path) -> list[CalibrationSample]:
    """Load samples from a CSV with header ``tx_power_dbm,rssi_dbm,distance_m``."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = {"tx_power_dbm", "rssi_dbm", "distance_m"}
        if reader.fieldnames is None or not expected <= set(reader.fieldnames):
            raise ValueError(
                f"{path}: header must contain tx_power_dbm,rssi_dbm,distance_m")
        return [
            CalibrationSample(float(row["tx_power_dbm"]), float(row["rssi_dbm"]),
                              float(row["distance_m"]))
            for row in reader
        ]


def write_calibration_csv(path, samples: Iterable[CalibrationSample]) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tx_power_dbm", "rssi_dbm", "distance_m"])
        for s in samples:
            writer.writerow([repr(s.tx_power_dbm), repr(s.rssi_dbm),
                             repr(s.distance_m)])
