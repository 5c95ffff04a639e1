"""Single-building hourly demand-response environment with a battery.

The agent observes min-max normalized features for the current hour and
sets a battery dispatch in [-1, 1] (positive charges). Net grid exchange
``e_t`` is positive for imports.
"""
from __future__ import annotations

import csv
import datetime as _dt
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

log = logging.getLogger(__name__)

PREDICTION_HORIZONS = (6, 12, 24)


def _with_predictions(name):
    return [name] + [f"{name}_predicted_{h}h" for h in PREDICTION_HORIZONS]


TEMPORAL = ("month", "day_type", "hour")

# Dataset columns, in file order.
DATASET_COLUMNS = (
    *TEMPORAL,
    *_with_predictions("outdoor_dry_bulb_temperature"),
    *_with_predictions("outdoor_relative_humidity"),
    *_with_predictions("diffuse_solar_irradiance"),
    *_with_predictions("direct_solar_irradiance"),
    "carbon_intensity",
    "non_shiftable_load",
    "solar_generation",
    *_with_predictions("electricity_pricing"),
)

# Observation features, in the order the agent sees them.
OBSERVATION_FEATURES = (
    *DATASET_COLUMNS[: DATASET_COLUMNS.index("solar_generation") + 1],
    "electrical_storage_soc",
    "net_electricity_consumption",
    *_with_predictions("electricity_pricing"),
)

CATEGORIES = {
    "temporal": TEMPORAL,
    "temperature": tuple(_with_predictions("outdoor_dry_bulb_temperature")),
    "humidity": tuple(_with_predictions("outdoor_relative_humidity")),
    "diffuse_irradiance": tuple(_with_predictions("diffuse_solar_irradiance")),
    "direct_irradiance": tuple(_with_predictions("direct_solar_irradiance")),
    "carbon_intensity": ("carbon_intensity",),
    "load": ("non_shiftable_load",),
    "solar_generation": ("solar_generation",),
    "soc": ("electrical_storage_soc",),
    "net_consumption": ("net_electricity_consumption",),
    "pricing": tuple(_with_predictions("electricity_pricing")),
}

_NON_NEGATIVE = tuple(
    c
    for c in DATASET_COLUMNS
    if c.startswith(("diffuse", "direct", "non_shiftable", "solar_generation", "electricity_pricing", "carbon"))
)
_HUMIDITY = CATEGORIES["humidity"]


class DatasetError(ValueError):
    """Raised when a building dataset violates its schema."""


def category_of(feature: str) -> str:
    for cat, names in CATEGORIES.items():
        if feature in names:
            return cat
    raise KeyError(feature)


def feature_vector(values_by_category: dict, default: float = 0.0, features=OBSERVATION_FEATURES) -> np.ndarray:
    """Per-feature vector built from per-category values."""
    return np.array([values_by_category.get(category_of(f), default) for f in features], dtype=np.float64)


# -- dataset -------------------------------------------------------------------


@dataclass
class BuildingDataset:
    """Hourly records for one episode, one column per schema field."""

    data: np.ndarray
    columns: tuple = DATASET_COLUMNS

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        validate_records(self.data, self.columns)

    def __len__(self):
        return self.data.shape[0]

    @property
    def days(self) -> int:
        return len(self) // 24

    def column(self, name: str) -> np.ndarray:
        return self.data[:, self.columns.index(name)]

    def slice_days(self, first: int, count: int) -> "BuildingDataset":
        return BuildingDataset(self.data[24 * first : 24 * (first + count)].copy(), self.columns)

    def __eq__(self, other):
        return (
            isinstance(other, BuildingDataset)
            and tuple(self.columns) == tuple(other.columns)
            and np.array_equal(self.data, other.data)
        )


def validate_records(data: np.ndarray, columns) -> None:
    if data.ndim != 2 or data.shape[1] != len(columns):
        raise DatasetError(f"expected {len(columns)} columns, got shape {data.shape}")
    if data.shape[0] == 0 or data.shape[0] % 24:
        raise DatasetError(f"record count {data.shape[0]} is not a positive multiple of 24")
    bad = np.argwhere(~np.isfinite(data))
    if len(bad):
        r, c = bad[0]
        raise DatasetError(f"row {r + 1}, column {columns[c]!r}: missing or non-finite value")
    limits = {name: (0.0, np.inf) for name in _NON_NEGATIVE}
    limits.update({name: (0.0, 100.0) for name in _HUMIDITY})
    limits.update({"month": (1, 12), "day_type": (1, 7), "hour": (0, 23)})
    for name, (lo, hi) in limits.items():
        if name not in columns:
            continue
        col = data[:, columns.index(name)]
        out = np.flatnonzero((col < lo) | (col > hi))
        if len(out):
            r = out[0]
            raise DatasetError(
                f"row {r + 1}, column {name!r}: value {col[r]!r} outside [{lo}, {hi}]"
            )


def load_dataset(path, columns=DATASET_COLUMNS, delimiter=",") -> BuildingDataset:
    """Read a delimiter-separated file with one header row and one row per hour."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        missing = [c for c in columns if c not in header]
        if missing:
            raise DatasetError(f"{path}: missing column(s) {missing}")
        index = [header.index(c) for c in columns]
        rows = []
        for r, row in enumerate(reader, start=1):
            if not row:
                continue
            values = []
            for c, i in zip(columns, index):
                try:
                    values.append(float(row[i]))
                except (ValueError, IndexError):
                    raise DatasetError(f"{path}: row {r}, column {c!r}: non-numeric value") from None
            rows.append(values)
    try:
        return BuildingDataset(np.array(rows, dtype=np.float64).reshape(-1, len(columns)), tuple(columns))
    except DatasetError as exc:
        raise DatasetError(f"{path}: {exc}") from None


def save_dataset(dataset: BuildingDataset, path, delimiter=",") -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, delimiter=delimiter)
        writer.writerow(dataset.columns)
        for row in dataset.data:
            writer.writerow([repr(float(v)) for v in row])


def _gauss(h, mu, width):
    d = np.minimum(np.abs(h - mu), 24 - np.abs(h - mu))
    return np.exp(-0.5 * (d / width) ** 2)


def _ar1(rng, n, scale, phi):
    """Stationary AR(1) noise with marginal standard deviation ``scale``; weather drifts smoothly hour to hour."""
    e = rng.normal(0.0, scale * np.sqrt(1.0 - phi * phi), n)
    e[0] = rng.normal(0.0, scale)
    return lfilter([1.0], [1.0, -phi], e)


def generate_synthetic(seed: int, days: int, start_day: int = 0, pv_kw: float = 4.0) -> BuildingDataset:
    """Synthetic year-like hourly data for one residential building.

    Irradiance follows the daylight arc (zero at night), temperature has a
    daily and a seasonal cycle plus day-to-day weather, and load has
    morning/evening peaks that differ on weekends. Prediction columns are the
    true values 6/12/24 hours ahead.
    """
    if days < 1:
        raise ValueError("days must be at least 1")
    rng = np.random.default_rng(seed)
    total = days + 2  # extra day(s) so 24h-ahead predictions exist
    hours = np.tile(np.arange(24.0), total)
    day = np.repeat(np.arange(total), 24)
    doy = (start_day + day) % 365
    season = -np.cos(2 * np.pi * (doy - 15) / 365.0)  # -1 mid-January, +1 mid-July

    base = _dt.date(2021, 1, 1)
    month = np.array([(base + _dt.timedelta(days=int(d))).month for d in doy], dtype=float)
    day_type = ((start_day + day) % 7 + 1).astype(float)  # 1 = Monday
    weekend = day_type >= 6

    # daily weather: clearness and a persistent temperature anomaly
    clear_day = np.clip(rng.beta(5.0, 1.8, total), 0.1, 1.0)
    anomaly = np.zeros(total)
    for d in range(1, total):
        anomaly[d] = 0.7 * anomaly[d - 1] + rng.normal(0, 1.5)
    clear = np.clip(np.repeat(clear_day, 24) + _ar1(rng, total * 24, 0.05, 0.8), 0.05, 1.0)

    daylen = 12.0 + 2.0 * season
    sunrise = 12.0 - daylen / 2.0
    arc = np.clip(np.sin(np.pi * (hours - sunrise) / daylen), 0.0, None)
    arc[(hours < sunrise) | (hours > sunrise + daylen)] = 0.0
    direct = 900.0 * arc**1.3 * clear * (0.85 + 0.15 * season)
    diffuse = arc * (60.0 + 180.0 * (1.0 - clear))

    temperature = (
        16.0 + 7.0 * season + np.repeat(anomaly, 24)
        - 5.0 * np.cos(2 * np.pi * (hours - 3.0) / 24.0)
        + _ar1(rng, total * 24, 0.3, 0.9)
    )
    humidity = np.clip(
        62.0 + 14.0 * np.cos(2 * np.pi * (hours - 3.0) / 24.0) + 18.0 * (1.0 - clear)
        - 6.0 * season + _ar1(rng, total * 24, 2.0, 0.9),
        5.0,
        100.0,
    )

    morning = np.where(weekend, 0.5 * _gauss(hours, 9.5, 1.8), 0.9 * _gauss(hours, 7.0, 1.0))
    midday = np.where(weekend, 0.5 * _gauss(hours, 13.0, 2.5), 0.1 * _gauss(hours, 13.0, 2.5))
    evening = 1.6 * _gauss(hours, 19.0, 1.8)
    cooling = 0.12 * np.clip(temperature - 24.0, 0.0, None)
    heating = 0.05 * np.clip(12.0 - temperature, 0.0, None)
    load = (0.45 + morning + midday + evening + cooling + heating) * rng.lognormal(0.0, 0.15, total * 24)

    generation = pv_kw * np.clip((direct + diffuse) / 1000.0, 0.0, None) * 0.85
    carbon = np.clip(0.28 - 0.12 * arc * clear + _ar1(rng, total * 24, 0.01, 0.9), 0.01, None)
    peak = (hours >= 16) & (hours < 21)
    pricing = np.where(peak & ~weekend, 0.41, 0.22) + np.where(peak & weekend, 0.08, 0.0)

    def ahead(series):
        return [series] + [np.roll(series, -h) for h in PREDICTION_HORIZONS]

    cols = {
        "month": month,
        "day_type": day_type,
        "hour": hours,
        "carbon_intensity": carbon,
        "non_shiftable_load": load,
        "solar_generation": generation,
    }
    for name, series in (
        ("outdoor_dry_bulb_temperature", temperature),
        ("outdoor_relative_humidity", humidity),
        ("diffuse_solar_irradiance", diffuse),
        ("direct_solar_irradiance", direct),
        ("electricity_pricing", pricing),
    ):
        for col, values in zip(_with_predictions(name), ahead(series)):
            cols[col] = values
    data = np.column_stack([cols[c] for c in DATASET_COLUMNS])[: 24 * days]
    return BuildingDataset(data)


# -- battery -------------------------------------------------------------------


@dataclass(frozen=True)
class BatteryState:
    soc: float = 0.0
    capacity: float = 6.4
    nominal_power: float = 5.0
    round_trip_efficiency: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.soc <= 1.0:
            raise ValueError(f"soc {self.soc} outside [0, 1]")
        if self.capacity <= 0 or self.nominal_power <= 0:
            raise ValueError("capacity and nominal power must be positive")
        if not 0.0 < self.round_trip_efficiency <= 1.0:
            raise ValueError("round-trip efficiency must be in (0, 1]")

    @property
    def one_way_efficiency(self) -> float:
        return float(np.sqrt(self.round_trip_efficiency))


def battery_dispatch(state: BatteryState, action: float):
    """Grid-side energy for one hour and the resulting state.

    Returns ``(new_state, grid_energy)`` where ``grid_energy`` is positive
    when charging.
    """
    if not -1.0 <= action <= 1.0:
        log.warning("battery action %r outside [-1, 1]; clamped", action)
        action = min(max(action, -1.0), 1.0)
    eta = state.one_way_efficiency
    cap = state.capacity
    requested = action * cap
    if requested > 0:
        grid = min(requested, state.nominal_power, (1.0 - state.soc) * cap / eta)
        soc = state.soc + grid * eta / cap
    elif requested < 0:
        grid = -min(-requested, state.nominal_power, state.soc * cap * eta)
        soc = state.soc + grid / eta / cap
    else:
        grid, soc = 0.0, state.soc
    return replace(state, soc=min(max(soc, 0.0), 1.0)), grid


def step(state: BatteryState, load: float, generation: float, action: float):
    """Advance the battery one hour; returns ``(new_state, e_t, grid_energy)``."""
    new_state, grid = battery_dispatch(state, action)
    return new_state, load - generation + grid, grid


def reward(e_t: float, generation: float = 0.0, soc: float = 0.0, kind: str = "default", penalty_weight: float = 1.0) -> float:
    """Negative grid import, optionally penalising stored energy while importing."""
    r = -max(e_t, 0.0)
    if kind == "solar_penalty":
        if e_t > 0:
            r -= penalty_weight * soc
    elif kind != "default":
        raise ValueError(f"unknown reward kind {kind!r}")
    return r


# -- normalization and environment ---------------------------------------------


@dataclass
class Normalizer:
    low: np.ndarray
    high: np.ndarray
    features: tuple = OBSERVATION_FEATURES

    @property
    def spread(self) -> np.ndarray:
        return self.high - self.low

    def normalize(self, x):
        s = self.spread
        return np.where(s > 0, (np.asarray(x) - self.low) / np.where(s > 0, s, 1.0), 0.0)

    def denormalize(self, x):
        return self.low + np.asarray(x) * self.spread

    def to_dict(self):
        return {"features": list(self.features), "low": self.low.tolist(), "high": self.high.tolist()}


@dataclass
class EpisodeLog:
    """Hourly trace of one episode.

    ``observations`` are the true normalized observations; ``perceived`` holds
    what the agent was shown when an attack was active (else the same array).
    """

    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    net_consumption: np.ndarray
    soc: np.ndarray
    perceived: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.perceived is None:
            self.perceived = self.observations
        n = len(self.actions)
        for name in ("observations", "rewards", "net_consumption", "soc", "perceived"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length differs from actions")
        if not np.all(np.isfinite(self.net_consumption)):
            raise ValueError("non-finite net consumption")

    def __len__(self):
        return len(self.actions)

    def to_dict(self) -> dict:
        return {
            "metadata": self.metadata,
            "actions": self.actions.tolist(),
            "rewards": self.rewards.tolist(),
            "net_consumption": self.net_consumption.tolist(),
            "soc": self.soc.tolist(),
            "observations": self.observations.tolist(),
            "perceived": self.perceived.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeLog":
        return cls(
            observations=np.asarray(d["observations"], dtype=np.float64),
            actions=np.asarray(d["actions"], dtype=np.float64),
            rewards=np.asarray(d["rewards"], dtype=np.float64),
            net_consumption=np.asarray(d["net_consumption"], dtype=np.float64),
            soc=np.asarray(d["soc"], dtype=np.float64),
            perceived=np.asarray(d["perceived"], dtype=np.float64),
            metadata=d.get("metadata", {}),
        )


def write_logs(logs, path) -> None:
    """One JSON object per episode, one per line."""
    with Path(path).open("w") as fh:
        for episode in logs:
            fh.write(json.dumps(episode.to_dict()) + "\n")


def read_logs(path) -> list[EpisodeLog]:
    return [EpisodeLog.from_dict(json.loads(line)) for line in Path(path).read_text().splitlines() if line]


class DemandResponseEnv:
    """Hourly battery-dispatch environment over one pass of a dataset."""

    def __init__(
        self,
        dataset: BuildingDataset,
        battery: BatteryState | None = None,
        reward_kind: str = "default",
        penalty_weight: float = 1.0,
    ):
        self.dataset = dataset
        self.battery0 = battery or BatteryState()
        self.reward_kind = reward_kind
        self.penalty_weight = penalty_weight
        self.load = dataset.column("non_shiftable_load")
        self.generation = dataset.column("solar_generation")
        self.baseline_net = self.load - self.generation

        raw = self._raw_static()
        low = raw.min(axis=0)
        high = raw.max(axis=0)
        i_soc = OBSERVATION_FEATURES.index("electrical_storage_soc")
        i_net = OBSERVATION_FEATURES.index("net_electricity_consumption")
        low[i_soc], high[i_soc] = 0.0, 1.0
        # bounds from the no-battery episode, widened by what the battery can add
        p = self.battery0.nominal_power
        low[i_net] = self.baseline_net.min() - p
        high[i_net] = self.baseline_net.max() + p
        self.normalizer = Normalizer(low, high)
        self._static = self.normalizer.normalize(raw)
        self._i_soc, self._i_net = i_soc, i_net
        self.reset()

    @property
    def length(self) -> int:
        return len(self.dataset)

    @property
    def observation_width(self) -> int:
        return len(OBSERVATION_FEATURES)

    def _raw_static(self):
        cols = []
        for f in OBSERVATION_FEATURES:
            if f == "electrical_storage_soc":
                cols.append(np.zeros(self.length))
            elif f == "net_electricity_consumption":
                cols.append(np.concatenate([[self.baseline_net[0]], self.baseline_net[:-1]]))
            else:
                cols.append(self.dataset.column(f))
        return np.column_stack(cols)

    def reset(self) -> np.ndarray:
        self.t = 0
        self.state = self.battery0
        self.last_net = float(self.baseline_net[0])
        return self.observation()

    def observation(self) -> np.ndarray:
        obs = self._static[self.t].copy()
        n = self.normalizer
        obs[self._i_soc] = self.state.soc
        obs[self._i_net] = (self.last_net - n.low[self._i_net]) / n.spread[self._i_net]
        return obs

    def step(self, action: float):
        """Apply ``action`` for hour ``t``; returns ``(obs, reward, done, info)``."""
        t = self.t
        self.state, e_t, grid = step(self.state, self.load[t], self.generation[t], float(action))
        r = reward(e_t, self.generation[t], self.state.soc, self.reward_kind, self.penalty_weight)
        self.last_net = e_t
        self.t += 1
        done = self.t >= self.length
        obs = None if done else self.observation()
        return obs, r, done, {"net_consumption": e_t, "grid_energy": grid, "soc": self.state.soc}


def run_episode(env: DemandResponseEnv, policy, metadata=None) -> EpisodeLog:
    """Roll out ``policy(obs) -> action`` for one full pass."""
    obs = env.reset()
    rows = []
    done = False
    while not done:
        a = float(policy(obs))
        nxt, r, done, info = env.step(a)
        rows.append((obs, a, r, info["net_consumption"], info["soc"]))
        obs = nxt
    return EpisodeLog(
        observations=np.array([r[0] for r in rows]),
        actions=np.array([r[1] for r in rows]),
        rewards=np.array([r[2] for r in rows]),
        net_consumption=np.array([r[3] for r in rows]),
        soc=np.array([r[4] for r in rows]),
        metadata=dict(metadata or {}),
    )


def null_episode(env: DemandResponseEnv) -> EpisodeLog:
    return run_episode(env, lambda obs: 0.0, {"agent": "null"})


# -- KPIs ------------------------------------------------------------------------


@dataclass
class KpiReport:
    electricity_consumption: float
    daily_peaks: float
    ramping: float
    raw: dict
    baseline: dict

    def as_dict(self) -> dict:
        return {
            "electricity_consumption": self.electricity_consumption,
            "daily_peaks": self.daily_peaks,
            "ramping": self.ramping,
            "raw": self.raw,
            "baseline": self.baseline,
        }


KPI_NAMES = ("electricity_consumption", "daily_peaks", "ramping")


def kpi_costs(net_consumption) -> dict:
    e = np.asarray(net_consumption, dtype=np.float64)
    days = len(e) // 24
    return {
        "electricity_consumption": float(np.sum(np.maximum(e, 0.0))),
        "daily_peaks": float(e[: 24 * days].reshape(days, 24).max(axis=1).mean()) if days else float(e.max()),
        "ramping": float(np.sum(np.abs(np.diff(e)))),
    }


def compute_kpis(log: EpisodeLog, baseline: EpisodeLog) -> KpiReport:
    """Episode costs divided by the no-controller costs on the same data."""
    if len(log) != len(baseline):
        raise ValueError("log and baseline lengths differ")
    num = kpi_costs(log.net_consumption)
    den = kpi_costs(baseline.net_consumption)
    for k, v in den.items():
        if not v > 0:
            raise ValueError(f"baseline {k} is {v}; dataset is degenerate")
    return KpiReport(**{k: num[k] / den[k] for k in KPI_NAMES}, raw=num, baseline=den)
