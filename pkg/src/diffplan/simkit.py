"""Policy-dependent daily load simulator.

Builds training tuples ``(demand, policy, context)`` by stacking an EV charging
bump and a temperature-driven heat-pump component on top of a base load
profile. All loads are per-unit of the yearly base-load peak.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np

HOURS = 24
POLICY_NAMES = ("ev_adopt", "ev_flex", "hp_adopt", "hp_eff")


class ProviderExhaustedError(RuntimeError):
    """A finite baseline source ran out of days."""


@dataclass(frozen=True)
class PolicyVector:
    ev_adopt: float = 0.0
    ev_flex: float = 0.0
    hp_adopt: float = 0.0
    hp_eff: float = 0.0

    def __post_init__(self):
        for name in POLICY_NAMES:
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"policy component {name}={v} outside [0, 1]")

    @classmethod
    def from_array(cls, values) -> "PolicyVector":
        values = np.asarray(values, dtype=float).ravel()
        if values.shape != (4,):
            raise ValueError(f"policy vector needs 4 components, got {values.shape[0]}")
        return cls(*(float(v) for v in values))

    def to_array(self) -> np.ndarray:
        return np.array([self.ev_adopt, self.ev_flex, self.hp_adopt, self.hp_eff])


@dataclass(frozen=True)
class DayContext:
    temperature: np.ndarray
    base_load: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.temperature, dtype=float)
        b = np.asarray(self.base_load, dtype=float)
        if t.shape != (HOURS,) or b.shape != (HOURS,):
            raise ValueError(f"day context needs 24 temperatures and 24 base loads, got {t.shape}, {b.shape}")
        if np.any(b <= 0.0) or np.any(b > 1.0):
            raise ValueError("base load values must lie in (0, 1]")
        object.__setattr__(self, "temperature", t)
        object.__setattr__(self, "base_load", b)


@dataclass(frozen=True)
class SimNoiseSpec:
    center_jitter_sd: float = 0.05
    width_jitter_sd: float = 0.1
    uniform_add_mean: float = 0.1
    uniform_add_sd: float = 0.01
    smooth_mean_base: float = 0.05
    smooth_sd_base: float = 0.07
    smooth_mean_max: float = 0.8
    smooth_sd_max: float = 0.3
    deterministic: bool = False

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if f.name.endswith("_sd") and getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be nonnegative")


@dataclass(frozen=True)
class SimConstants:
    ev_peak_hour: float = 18.0
    ev_base_sd_hours: float = 1.0
    ev_max_sd_hours: float = 4.0
    ev_max_shift_hours: float = 5.0
    ev_max_height: float = 0.75
    hp_max_height: float = 2.0
    hourly_temp_weight: float = 0.8
    daily_temp_weight: float = 0.2
    temp_threshold: float = 19.0
    softplus_temperature: float = 1.3
    # coldest reference blended temperature at which full adoption hits hp_max_height
    hp_reference_temp: float = -10.0


DETERMINISTIC = SimNoiseSpec(deterministic=True)
CONSTANTS = SimConstants()


def _normal(rng, mean, sd, noise: SimNoiseSpec) -> float:
    if noise.deterministic or sd == 0.0:
        return float(mean)
    return float(rng.normal(mean, sd))


def wrapped_gaussian(center: float, sd: float) -> np.ndarray:
    """Unnormalized Gaussian kernel at hours 0..23, folded onto one day."""
    t = np.arange(HOURS, dtype=float)
    shifts = np.arange(-2, 3) * HOURS
    d = t[None, :] + shifts[:, None] - center
    return np.exp(-0.5 * (d / sd) ** 2).sum(axis=0)


def ev_load(pi: PolicyVector, noise: SimNoiseSpec = DETERMINISTIC, rng=None, const: SimConstants = CONSTANTS):
    """EV charging load: a wrapped bell curve plus a flat daily offset."""
    if pi.ev_adopt == 0.0:
        return np.zeros(HOURS)
    center = const.ev_peak_hour + const.ev_max_shift_hours * pi.ev_flex
    sd = const.ev_base_sd_hours + (const.ev_max_sd_hours - const.ev_base_sd_hours) * pi.ev_flex
    center *= _normal(rng, 1.0, noise.center_jitter_sd, noise)
    sd *= max(_normal(rng, 1.0, noise.width_jitter_sd, noise), 0.1)

    # total bump energy is pinned to that of the unshifted, unwidened curve
    reference = wrapped_gaussian(const.ev_peak_hour, const.ev_base_sd_hours)
    kernel = wrapped_gaussian(center, sd)
    height = const.ev_max_height * pi.ev_adopt
    bump = height * reference.sum() * kernel / kernel.sum()
    flat = pi.ev_adopt * _normal(rng, noise.uniform_add_mean, noise.uniform_add_sd, noise)
    return bump + flat


def heat_signal(temperature, const: SimConstants = CONSTANTS) -> np.ndarray:
    """Softplus heating demand of the blended hourly/daily temperature (unscaled)."""
    temperature = np.asarray(temperature, dtype=float)
    blended = const.hourly_temp_weight * temperature + const.daily_temp_weight * temperature.mean()
    tau = const.softplus_temperature
    return tau * np.logaddexp(0.0, (const.temp_threshold - blended) / tau)


def hp_scale(const: SimConstants = CONSTANTS) -> float:
    tau = const.softplus_temperature
    ref = tau * np.logaddexp(0.0, (const.temp_threshold - const.hp_reference_temp) / tau)
    return const.hp_max_height / ref


def smoothing_factor(hp_eff: float, noise: SimNoiseSpec = DETERMINISTIC, rng=None) -> float:
    mean = noise.smooth_mean_base + (noise.smooth_mean_max - noise.smooth_mean_base) * hp_eff
    sd = noise.smooth_sd_base + (noise.smooth_sd_max - noise.smooth_sd_base) * hp_eff
    return float(np.clip(_normal(rng, mean, sd, noise), 0.0, 1.0))


def hp_load(pi: PolicyVector, temperature, noise: SimNoiseSpec = DETERMINISTIC, rng=None,
            const: SimConstants = CONSTANTS, smoothing: float | None = None) -> np.ndarray:
    """Heat-pump load for one day; ``smoothing`` overrides the random factor."""
    temperature = np.asarray(temperature, dtype=float)
    if temperature.shape != (HOURS,):
        raise ValueError(f"expected 24 temperatures, got {temperature.shape}")
    if pi.hp_adopt == 0.0:
        return np.zeros(HOURS)
    h = heat_signal(temperature, const)
    a = smoothing_factor(pi.hp_eff, noise, rng) if smoothing is None else float(np.clip(smoothing, 0.0, 1.0))
    smoothed = (1.0 - a) * h + a * h.mean()
    return pi.hp_adopt * hp_scale(const) * smoothed


def simulate_scenario(pi: PolicyVector, ctx: DayContext, noise: SimNoiseSpec = DETERMINISTIC, rng=None,
                      const: SimConstants = CONSTANTS) -> np.ndarray:
    if rng is None and not noise.deterministic:
        raise ValueError("stochastic simulation needs an rng")
    demand = ctx.base_load + ev_load(pi, noise, rng, const) + hp_load(pi, ctx.temperature, noise, rng, const)
    return np.maximum(demand, 0.0)


# --- synthetic baseline -----------------------------------------------------

def _raw_day(day_of_year: int, rng, noise: bool):
    t = np.arange(HOURS, dtype=float)
    phase = 2.0 * np.pi * (day_of_year - 15) / 365.0
    mean_temp = 11.0 - 14.0 * np.cos(phase)
    temperature = mean_temp + 5.0 * np.sin(2.0 * np.pi * (t - 9.0) / 24.0)
    shape = (
        0.55
        + 0.18 * np.exp(-0.5 * ((t - 8.0) / 2.0) ** 2)
        + 0.30 * np.exp(-0.5 * ((t - 18.5) / 2.5) ** 2)
        - 0.08 * np.exp(-0.5 * ((t - 3.5) / 2.0) ** 2)
    )
    # winter heating and summer cooling both lift the level
    seasonal = 1.0 + 0.12 * np.cos(2.0 * phase)
    load = shape * seasonal
    if noise:
        temperature = temperature + rng.normal(0.0, 3.0) + rng.normal(0.0, 0.6, HOURS)
        load = load * np.clip(1.0 + rng.normal(0.0, 0.03, HOURS) + rng.normal(0.0, 0.04), 0.85, 1.15)
    return temperature, load


_PEAK_BOUND = max(_raw_day(d, None, False)[1].max() for d in range(1, 366)) * 1.15


def synth_baseline(day_of_year: int, rng=None, noise: bool = True) -> DayContext:
    """One synthetic day: seasonal temperature profile and double-peaked base load."""
    if not 1 <= day_of_year <= 365:
        raise ValueError(f"day_of_year must be in [1, 365], got {day_of_year}")
    if noise and rng is None:
        raise ValueError("noisy baseline needs an rng")
    temperature, load = _raw_day(day_of_year, rng, noise)
    return DayContext(temperature, load / _PEAK_BOUND)


def synth_year(rng=None, noise: bool = True) -> list[DayContext]:
    """365 synthetic days normalized so the yearly base-load peak is exactly 1."""
    days = [_raw_day(d, rng, noise) for d in range(1, 366)]
    peak = max(load.max() for _, load in days)
    return [DayContext(temp, load / peak) for temp, load in days]


class BaselineProvider(Protocol):
    def draw(self, rng) -> DayContext: ...


class SyntheticBaselines:
    """Pool of synthetic years; days are drawn uniformly with replacement."""

    def __init__(self, years: int = 3, seed: int = 0, noise: bool = True):
        rng = np.random.default_rng(seed)
        self.days = [d for _ in range(years) for d in synth_year(rng, noise)]

    def __len__(self) -> int:
        return len(self.days)

    def draw(self, rng) -> DayContext:
        return self.days[int(rng.integers(len(self.days)))]


class CsvBaselines:
    """User-supplied days read from CSV (``date, t00..t23, l00..l23``).

    With ``replace=False`` each day is used at most once and drawing past the
    end raises :class:`ProviderExhaustedError`.
    """

    def __init__(self, path, replace: bool = True):
        self.path = Path(path)
        self.dates, self.days = read_baseline_csv(self.path)
        if not self.days:
            raise ValueError(f"{self.path}: no days")
        self.replace = replace
        self._order: list[int] | None = None

    def __len__(self) -> int:
        return len(self.days)

    def draw(self, rng) -> DayContext:
        if self.replace:
            return self.days[int(rng.integers(len(self.days)))]
        if self._order is None:
            self._order = list(rng.permutation(len(self.days)))
        if not self._order:
            raise ProviderExhaustedError(f"{self.path}: all {len(self.days)} days already used")
        return self.days[self._order.pop()]


def _cols(prefix: str) -> list[str]:
    return [f"{prefix}{h:02d}" for h in range(HOURS)]


def read_baseline_csv(path) -> tuple[list[str], list[DayContext]]:
    dates, days = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"date", *_cols("t"), *_cols("l")} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)[:5]}")
        for row in reader:
            dates.append(row["date"])
            days.append(DayContext([float(row[c]) for c in _cols("t")], [float(row[c]) for c in _cols("l")]))
    return dates, days


def write_baseline_csv(path, days: Iterable[DayContext], dates: Iterable[str] | None = None) -> None:
    days = list(days)
    dates = list(dates) if dates is not None else [f"day{i + 1:04d}" for i in range(len(days))]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", *_cols("t"), *_cols("l")])
        for date, day in zip(dates, days):
            w.writerow([date, *map(repr, day.temperature.tolist()), *map(repr, day.base_load.tolist())])


# --- training set -------------------------------------------------------------

@dataclass
class LoadDataset:
    """Column-stacked training tuples; row m is one (demand, policy, context)."""

    demand: np.ndarray
    policy: np.ndarray
    temperature: np.ndarray
    base_load: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.demand.shape[0]
        for name, arr, width in [("demand", self.demand, HOURS), ("policy", self.policy, 4),
                                 ("temperature", self.temperature, HOURS), ("base_load", self.base_load, HOURS)]:
            if arr.shape != (n, width):
                raise ValueError(f"{name} has shape {arr.shape}, expected {(n, width)}")

    def __len__(self) -> int:
        return self.demand.shape[0]

    @property
    def residual(self) -> np.ndarray:
        return self.demand - self.base_load

    def context(self, i: int) -> DayContext:
        return DayContext(self.temperature[i], self.base_load[i])

    def subset(self, idx) -> "LoadDataset":
        return LoadDataset(self.demand[idx], self.policy[idx], self.temperature[idx], self.base_load[idx],
                           dict(self.meta))

    COLUMNS = (
        [f"pi_{n}" for n in POLICY_NAMES]
        + [f"temp{h:02d}" for h in range(HOURS)]
        + [f"base{h:02d}" for h in range(HOURS)]
        + [f"load{h:02d}" for h in range(HOURS)]
    )

    def to_csv(self, path) -> None:
        table = np.hstack([self.policy, self.temperature, self.base_load, self.demand])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for row in table:
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path) -> "LoadDataset":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != cls.COLUMNS:
                raise ValueError(f"{path}: unexpected dataset header")
            rows = [[float(v) for v in row] for row in reader]
        if not rows:
            raise ValueError(f"{path}: dataset has no rows")
        table = np.array(rows)
        return cls(table[:, 52:76], table[:, 0:4], table[:, 4:28], table[:, 28:52])


def generate_training_set(M: int, source: BaselineProvider | None = None, seed: int = 0,
                          noise: SimNoiseSpec = SimNoiseSpec(), const: SimConstants = CONSTANTS) -> LoadDataset:
    """Draw ``M`` random policies on the unit hypercube and simulate one day each."""
    if M < 1:
        raise ValueError("M must be at least 1")
    if source is None:
        source = SyntheticBaselines(seed=seed)
    rng = np.random.default_rng(seed)
    demand = np.empty((M, HOURS))
    policy = rng.uniform(0.0, 1.0, size=(M, 4))
    temperature = np.empty((M, HOURS))
    base = np.empty((M, HOURS))
    for m in range(M):
        ctx = source.draw(rng)
        demand[m] = simulate_scenario(PolicyVector.from_array(policy[m]), ctx, noise, rng, const)
        temperature[m] = ctx.temperature
        base[m] = ctx.base_load
    return LoadDataset(demand, policy, temperature, base, {"seed": seed, "M": M})
