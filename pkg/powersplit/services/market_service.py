"""
Market Service: tariffs, grid power balance and per-step energy cost.

Sign convention: battery power is positive when charging, i.e. it adds to
the demand seen at the grid connection. Grid power is positive on import.
"""

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from services.errors import ConfigError, DataError


@dataclass(frozen=True)
class Tariff:
    """Time-of-use purchase price, flat feed-in price and tax ratio"""
    buy_price: np.ndarray      # €/kWh per step
    sell_price: float          # €/kWh
    tax_ratio: float = 0.0

    def __post_init__(self):
        buy = np.asarray(self.buy_price, dtype=float)
        object.__setattr__(self, 'buy_price', buy)
        if buy.ndim != 1 or buy.size == 0:
            raise ConfigError("Tariff buy_price must be a non-empty 1-D series")
        if not np.all(np.isfinite(buy)) or np.any(buy <= 0):
            raise ConfigError("Tariff buy_price values must be finite and > 0")
        if self.sell_price < 0:
            raise ConfigError("Tariff sell_price must be >= 0", sell_price=self.sell_price)
        if not 0 <= self.tax_ratio < 1:
            raise ConfigError("Tariff tax_ratio must lie in [0, 1)", tax_ratio=self.tax_ratio)

    def __len__(self) -> int:
        return self.buy_price.size

    def import_rate(self, t: int) -> float:
        """Effective €/kWh paid on import at step t"""
        return float(self.buy_price[t]) * (1.0 + self.tax_ratio)

    @property
    def export_rate(self) -> float:
        """Effective €/kWh received on export"""
        return self.sell_price * (1.0 - self.tax_ratio)


@dataclass(frozen=True)
class GridSample:
    """Load and PV at one step"""
    load: float
    pv: float
    dt: float

    def __post_init__(self):
        if self.load < 0 or self.pv < 0:
            raise DataError("Load and PV must be >= 0", load=self.load, pv=self.pv)
        if self.dt <= 0:
            raise DataError("Step length dt must be > 0", dt=self.dt)


def grid_power(sample: GridSample, battery_powers: Sequence[float], n_strings: int) -> float:
    """Power balance at the grid connection: p_L - p_PV + sum of battery powers.

    ``battery_powers`` must hold one entry per string; the no-battery baseline
    passes none with ``n_strings=0``.
    """
    powers = np.asarray(battery_powers, dtype=float)
    if powers.size != n_strings:
        raise ConfigError(
            f"Expected {n_strings} battery powers, got {powers.size}",
            expected=n_strings, received=int(powers.size),
        )
    return sample.load - sample.pv + float(powers.sum())


def step_cost(p_grid: float, t: int, tariff: Tariff, dt: float) -> float:
    """Energy cost of one step; imports pay ToU plus tax, exports earn feed-in minus tax."""
    if dt <= 0:
        raise DataError("Step length dt must be > 0", dt=dt)
    if not 0 <= t < len(tariff):
        raise IndexError(f"Step {t} outside tariff horizon of {len(tariff)} steps")
    if p_grid >= 0:
        return p_grid * dt * float(tariff.buy_price[t]) * (1.0 + tariff.tax_ratio)
    return p_grid * dt * tariff.sell_price * (1.0 - tariff.tax_ratio)


def baseline_cost_series(profiles, tariff: Tariff) -> np.ndarray:
    """Per-step cost without any battery dispatch.

    ``profiles`` is anything exposing aligned ``load``/``pv`` arrays and a
    ``dt`` step length (normally an ingest ``TimeSeries``).
    """
    load = np.asarray(profiles.load, dtype=float)
    pv = np.asarray(profiles.pv, dtype=float)
    if load.shape != pv.shape:
        raise DataError("Load and PV series are not aligned",
                        load_steps=load.size, pv_steps=pv.size)
    missing = ~(np.isfinite(load) & np.isfinite(pv))
    if missing.any():
        first = int(np.flatnonzero(missing)[0])
        raise DataError(f"Missing load/PV sample at step {first}", step=first,
                        missing=int(missing.sum()))
    if load.size > len(tariff):
        raise DataError("Tariff shorter than profiles",
                        profile_steps=load.size, tariff_steps=len(tariff))

    dt = float(profiles.dt)
    costs = np.empty(load.size)
    for t in range(load.size):
        sample = GridSample(load=float(load[t]), pv=float(pv[t]), dt=dt)
        costs[t] = step_cost(grid_power(sample, (), n_strings=0), t, tariff, dt)
    return costs
