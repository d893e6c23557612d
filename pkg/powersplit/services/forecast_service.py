"""
Forecast Service: horizon windows of load and PV for the dispatcher.

Two forecasters share one signature ``(profiles, t0, H) -> Forecast``:
perfect foresight returns the true future window; persistence repeats the
most recent same-time-of-day sample observed before ``t0``. Prices are not
forecast: the day-ahead tariff is known over the whole horizon.
"""

from dataclasses import dataclass
from typing import Callable, Dict

import numpy as np

from services.errors import ConfigError, HorizonError

DEFAULT_PERIOD = 96


@dataclass(frozen=True)
class Forecast:
    load: np.ndarray
    pv: np.ndarray
    origin: int

    def __post_init__(self):
        load = np.asarray(self.load, dtype=float)
        pv = np.asarray(self.pv, dtype=float)
        object.__setattr__(self, 'load', load)
        object.__setattr__(self, 'pv', pv)
        if load.shape != pv.shape or load.ndim != 1:
            raise ConfigError("Forecast load and PV must be 1-D and equally long",
                              load_steps=load.size, pv_steps=pv.size)
        if np.any(load < 0) or np.any(pv < 0):
            raise ConfigError("Forecast values must be >= 0", origin=self.origin)

    @property
    def horizon(self) -> int:
        return self.load.size

    @property
    def net_load(self) -> np.ndarray:
        return self.load - self.pv


def perfect(profiles, t0: int, H: int) -> Forecast:
    """True future window [t0, t0 + H)."""
    n = len(profiles.load)
    if H < 1 or t0 < 0 or t0 + H > n:
        raise HorizonError(f"Forecast window [{t0}, {t0 + H}) exceeds data of {n} steps",
                           t0=t0, horizon=H, steps=n)
    return Forecast(load=np.array(profiles.load[t0:t0 + H], dtype=float),
                    pv=np.array(profiles.pv[t0:t0 + H], dtype=float),
                    origin=t0)


def persistence_indices(t0: int, H: int, period: int, n: int) -> np.ndarray:
    """Source sample index for each forecast step.

    Step ``t0 + i`` is predicted by ``t0 + i - k*period`` with the smallest
    ``k >= 1`` that lands before ``t0``. While no such sample exists yet
    (origins inside the first period) the same time of the first day stands
    in, which reads values at or after ``t0``: that warmup is not causal.
    """
    if t0 < 0 or H < 1 or period < 1:
        raise ConfigError("Persistence needs t0 >= 0, H >= 1 and period >= 1",
                          t0=t0, horizon=H, period=period)
    i = np.arange(H)
    source = t0 + i - period * (i // period + 1)
    warmup = source < 0
    source[warmup] = (t0 + i[warmup]) % min(period, n)
    return source


def persistence(profiles, t0: int, H: int, period: int = DEFAULT_PERIOD) -> Forecast:
    """Same-time-yesterday forecast."""
    load = np.asarray(profiles.load, dtype=float)
    pv = np.asarray(profiles.pv, dtype=float)
    source = persistence_indices(t0, H, period, load.size)
    return Forecast(load=load[source], pv=pv[source], origin=t0)


FORECASTERS: Dict[str, Callable[..., Forecast]] = {
    'perfect': perfect,
    'persistence': persistence,
}


def get_forecaster(name: str) -> Callable[..., Forecast]:
    try:
        return FORECASTERS[name]
    except KeyError:
        raise ConfigError(f"Unknown forecaster '{name}'",
                          available=sorted(FORECASTERS)) from None
