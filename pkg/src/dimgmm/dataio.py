"""Wind power / forecast datasets: CSV ingestion, splitting and synthetic data."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .gmm import Gmm

log = logging.getLogger(__name__)

PER_UNIT_RANGE = (-0.1, 1.1)


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    """Hourly per-unit power and forecast for M sites (rows are time)."""

    timestamps: np.ndarray
    power: np.ndarray
    forecast: np.ndarray
    split_index: Optional[int] = None
    dropped: int = 0

    def __post_init__(self):
        self.power = np.asarray(self.power, dtype=float)
        self.forecast = np.asarray(self.forecast, dtype=float)
        if self.power.shape != self.forecast.shape:
            raise DataError("power and forecast must have the same shape")
        if len(self.timestamps) != self.power.shape[0]:
            raise DataError("one timestamp per row is required")

    def __len__(self) -> int:
        return self.power.shape[0]

    @property
    def num_sites(self) -> int:
        return self.power.shape[1]

    @property
    def joint(self) -> np.ndarray:
        """Rows ``[x_1..x_M, y_1..y_M]`` as used by the joint model."""
        return np.hstack([self.power, self.forecast])

    @property
    def error(self) -> np.ndarray:
        return self.power - self.forecast

    def rows(self, sl: slice) -> "Dataset":
        return Dataset(self.timestamps[sl], self.power[sl], self.forecast[sl])


def _site_columns(M: int) -> list[str]:
    cols = []
    for m in range(1, M + 1):
        cols += [f"site{m}_power", f"site{m}_forecast"]
    return cols


def load_csv(path, capacities: Sequence[float], check_range: bool = True) -> Dataset:
    """Read ``timestamp,site1_power,site1_forecast,...`` in MW and normalise.

    Rows with any missing value are dropped; the count is logged and stored
    on the dataset.
    """
    caps = np.asarray(capacities, dtype=float)
    if np.any(caps <= 0):
        raise DataError("capacities must be positive")
    frame = pd.read_csv(path)
    expected = ["timestamp"] + _site_columns(caps.shape[0])
    if list(frame.columns) != expected:
        raise DataError(f"expected columns {expected}, got {list(frame.columns)}")
    n_raw = len(frame)
    frame = frame.dropna()
    dropped = n_raw - len(frame)
    if dropped:
        log.info("dropped %d rows with missing values from %s", dropped, path)
    stamps = pd.to_datetime(frame["timestamp"], format="ISO8601").to_numpy()
    if len(stamps) > 1 and np.any(np.diff(stamps) <= np.timedelta64(0)):
        raise DataError("timestamps are not strictly increasing")
    values = frame[expected[1:]].to_numpy(dtype=float)
    power = values[:, 0::2] / caps
    forecast = values[:, 1::2] / caps
    if check_range:
        lo, hi = PER_UNIT_RANGE
        if np.any(power < lo) or np.any(power > hi) or np.any(forecast < lo) or np.any(forecast > hi):
            raise DataError(f"per-unit values outside [{lo}, {hi}]; check capacities")
    return Dataset(stamps, power, forecast, dropped=dropped)


def write_csv(dataset: Dataset, path, capacities: Sequence[float]) -> None:
    caps = np.asarray(capacities, dtype=float)
    values = np.empty((len(dataset), 2 * dataset.num_sites))
    values[:, 0::2] = dataset.power * caps
    values[:, 1::2] = dataset.forecast * caps
    frame = pd.DataFrame(values, columns=_site_columns(dataset.num_sites))
    frame.insert(0, "timestamp", pd.to_datetime(dataset.timestamps).strftime("%Y-%m-%dT%H:%M:%S"))
    frame.to_csv(path, index=False, float_format="%.17g")


def split(dataset: Dataset, boundary: int) -> tuple[Dataset, Dataset]:
    """Historical rows ``[0, boundary)`` and new rows ``[boundary, N)``."""
    if not 0 < boundary < len(dataset):
        raise DataError(f"boundary {boundary} outside (0, {len(dataset)})")
    return dataset.rows(slice(0, boundary)), dataset.rows(slice(boundary, None))


def hourly_index(n: int, start: str = "2012-01-01T00:00:00") -> np.ndarray:
    return np.datetime64(start, "s") + np.arange(n) * np.timedelta64(3600, "s")


def synth_from_gmm(truth: Gmm, n: int, seed: int, start: str = "2012-01-01T00:00:00") -> Dataset:
    """Draw ``n`` i.i.d. joint samples from ``truth`` as an hourly dataset."""
    M = truth.num_participants
    rng = np.random.default_rng(seed)
    samples = truth.sample(n, rng)
    return Dataset(hourly_index(n, start), samples[:, :M], samples[:, M:])


def from_joint(rows: np.ndarray, start: str = "2012-01-01T00:00:00") -> Dataset:
    rows = np.asarray(rows, dtype=float)
    M = rows.shape[1] // 2
    return Dataset(hourly_index(rows.shape[0], start), rows[:, :M], rows[:, M:])


def make_truth(num_sites: int, num_components: int, seed: int, spread: float = 0.08,
               site_correlation: float = 0.6, forecast_noise: float = 0.04,
               shift: float = 0.0) -> Gmm:
    """A joint power/forecast mixture with correlated sites.

    Within a component, powers share correlation ``site_correlation`` and each
    forecast equals the power plus independent noise, so the power/forecast
    block is non-zero. ``shift`` moves every component mean by a common
    random direction of that length (per-unit), for drift experiments.
    """
    M, J = num_sites, num_components
    rng = np.random.default_rng(seed)
    levels = np.linspace(0.25, 0.75, J) if J > 1 else np.array([0.5])
    A = spread**2 * (site_correlation * np.ones((M, M)) + (1 - site_correlation) * np.eye(M))
    cov = np.block([[A, A], [A, A + forecast_noise**2 * np.eye(M)]])
    means = np.empty((J, 2 * M))
    covs = np.empty((J, 2 * M, 2 * M))
    for j in range(J):
        mx = levels[j] + 0.05 * rng.standard_normal(M)
        bias = 0.02 * rng.standard_normal(M)
        means[j] = np.concatenate([mx, mx + bias])
        scale = 1.0 + 0.3 * rng.random()
        covs[j] = cov * scale
    if shift:
        direction = rng.standard_normal(2 * M)
        means += shift * direction / np.linalg.norm(direction)
    weights = rng.dirichlet(np.full(J, 5.0))
    return Gmm(weights, means, covs, weights.copy())
