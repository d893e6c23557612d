"""
Ingest Service: 15-minute load / PV / price profiles

Loads and validates profile CSVs, writes them back, maps raw day-ahead
prices into the tariff band and generates synthetic profiles.

CSV schema (RFC-3339 timestamps, one row per 15-minute slot):

    timestamp,load_kw,pv_kw,price_eur_kwh
    2023-01-01T00:00:00+00:00,84.2,0.0,0.21

The price column is optional; other column names can be remapped.
"""

import hashlib
from dataclasses import dataclass
from typing import Any, Dict, Optional

import numpy as np
import pandas as pd
import structlog

from services.errors import DataError

logger = structlog.get_logger(__name__)

STEP_MINUTES = 15
PRICE_LOW = 0.18
PRICE_HIGH = 0.38

DEFAULT_COLUMNS = {
    'timestamp': 'timestamp',
    'load': 'load_kw',
    'pv': 'pv_kw',
    'price': 'price_eur_kwh',
}


@dataclass(frozen=True, eq=False)
class TimeSeries:
    """Aligned, uniformly sampled load / PV / price profiles"""
    timestamps: pd.DatetimeIndex
    load: np.ndarray
    pv: np.ndarray
    price: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, 'timestamps', pd.DatetimeIndex(self.timestamps))
        object.__setattr__(self, 'load', np.asarray(self.load, dtype=float))
        object.__setattr__(self, 'pv', np.asarray(self.pv, dtype=float))
        if self.price is not None:
            object.__setattr__(self, 'price', np.asarray(self.price, dtype=float))

        n = len(self.timestamps)
        sizes = {'load': self.load.size, 'pv': self.pv.size}
        if self.price is not None:
            sizes['price'] = self.price.size
        if n == 0 or any(size != n for size in sizes.values()):
            raise DataError("Profile columns are empty or not aligned", timestamps=n, **sizes)
        ProfileValidator.check_values(self.load, 'load')
        ProfileValidator.check_values(self.pv, 'pv')
        ProfileValidator.check_spacing(self.timestamps)

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def dt(self) -> float:
        """Step length in hours"""
        return STEP_MINUTES / 60.0

    @property
    def steps_per_day(self) -> int:
        return int(round(24.0 / self.dt))

    @property
    def days(self) -> int:
        return len(self) // self.steps_per_day

    def window(self, start: int, stop: int) -> 'TimeSeries':
        if not 0 <= start < stop <= len(self):
            raise DataError(f"Window [{start}, {stop}) outside series of {len(self)} steps",
                            start=start, stop=stop, steps=len(self))
        return TimeSeries(
            timestamps=self.timestamps[start:stop],
            load=self.load[start:stop],
            pv=self.pv[start:stop],
            price=None if self.price is None else self.price[start:stop],
        )

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({
            'timestamp': [ts.isoformat() for ts in self.timestamps],
            'load_kw': self.load,
            'pv_kw': self.pv,
        })
        if self.price is not None:
            frame['price_eur_kwh'] = self.price
        return frame

    def fingerprint(self) -> str:
        """Content hash identifying the dataset across reports"""
        digest = hashlib.sha256()
        digest.update(self.timestamps.asi8.tobytes())
        digest.update(self.load.tobytes())
        digest.update(self.pv.tobytes())
        if self.price is not None:
            digest.update(self.price.tobytes())
        return digest.hexdigest()


class ProfileValidator:
    """Row-level checks on profile data"""

    @classmethod
    def check_values(cls, values: np.ndarray, name: str) -> None:
        missing = np.flatnonzero(~np.isfinite(values))
        if missing.size:
            row = int(missing[0]) + 1
            raise DataError(f"Missing {name} value at row {row}", column=name, row=row,
                            count=int(missing.size))
        negative = np.flatnonzero(values < 0)
        if negative.size:
            row = int(negative[0]) + 1
            raise DataError(f"Negative {name} value {values[negative[0]]} at row {row}",
                            column=name, row=row, count=int(negative.size))

    @classmethod
    def check_spacing(cls, timestamps: pd.DatetimeIndex) -> None:
        if len(timestamps) < 2:
            return
        step = pd.Timedelta(minutes=STEP_MINUTES)
        diffs = timestamps[1:] - timestamps[:-1]
        bad = np.flatnonzero(diffs != step)
        if not bad.size:
            return
        i = int(bad[0])
        row = i + 2
        diff = diffs[i]
        if diff == pd.Timedelta(0):
            raise DataError(f"Duplicate timestamp {timestamps[i + 1].isoformat()} at row {row}",
                            row=row, timestamp=timestamps[i + 1].isoformat())
        if diff < pd.Timedelta(0):
            raise DataError(f"Timestamps go backwards at row {row}", row=row,
                            timestamp=timestamps[i + 1].isoformat())
        if diff > step:
            missing = int(diff / step) - 1
            raise DataError(
                f"Gap of {missing} missing slot(s) after {timestamps[i].isoformat()} "
                f"before row {row}",
                row=row, missing_slots=missing, after=timestamps[i].isoformat(),
            )
        raise DataError(f"Irregular {diff} spacing at row {row}", row=row)

    @classmethod
    def validate_frame(cls, frame: pd.DataFrame, columns: Dict[str, str]) -> Dict[str, Any]:
        """Check header completeness; returns the resolved column mapping."""
        required = ['timestamp', 'load', 'pv']
        missing = [columns[key] for key in required if columns[key] not in frame.columns]
        if missing:
            raise DataError(f"Missing required columns: {', '.join(missing)}",
                            missing=missing, present=list(frame.columns))
        has_price = columns['price'] in frame.columns
        return {'columns': columns, 'has_price': has_price, 'rows': len(frame)}


def load_csv(path, columns: Optional[Dict[str, str]] = None) -> TimeSeries:
    """Read and validate a profile CSV."""
    mapping = {**DEFAULT_COLUMNS, **(columns or {})}
    try:
        frame = pd.read_csv(path, float_precision='round_trip')
    except FileNotFoundError:
        raise DataError(f"Profile file not found: {path}", path=str(path)) from None
    except pd.errors.EmptyDataError:
        raise DataError(f"Profile file is empty: {path}", path=str(path)) from None

    info = ProfileValidator.validate_frame(frame, mapping)
    try:
        timestamps = pd.to_datetime(frame[mapping['timestamp']], utc=True, format='ISO8601')
    except (ValueError, TypeError) as exc:
        raise DataError(f"Unparseable timestamp in {path}: {exc}", path=str(path)) from None

    def _numeric(key):
        values = pd.to_numeric(frame[mapping[key]], errors='coerce').to_numpy(dtype=float)
        return values

    series = TimeSeries(
        timestamps=pd.DatetimeIndex(timestamps),
        load=_numeric('load'),
        pv=_numeric('pv'),
        price=_numeric('price') if info['has_price'] else None,
    )
    logger.info('profiles_loaded', path=str(path), rows=len(series),
                start=series.timestamps[0].isoformat(),
                end=series.timestamps[-1].isoformat(), has_price=info['has_price'])
    return series


def write_csv(series: TimeSeries, path) -> None:
    series.to_frame().to_csv(path, index=False)
    logger.info('profiles_written', path=str(path), rows=len(series))


def scale_prices(raw, lo: float = PRICE_LOW, hi: float = PRICE_HIGH) -> np.ndarray:
    """Affine min-max map of raw prices onto [lo, hi]; constant input maps to the midpoint."""
    values = np.asarray(raw, dtype=float)
    if values.size == 0:
        raise DataError("Cannot scale an empty price series")
    if not np.all(np.isfinite(values)):
        raise DataError("Price series contains missing values",
                        missing=int(np.sum(~np.isfinite(values))))
    if not lo < hi:
        raise DataError("Price band must satisfy lo < hi", lo=lo, hi=hi)
    v_min, v_max = values.min(), values.max()
    if v_max == v_min:
        return np.full(values.shape, 0.5 * (lo + hi))
    return lo + (values - v_min) * ((hi - lo) / (v_max - v_min))


def synth_profiles(days: int, seed: int, start: str = '2023-01-01T00:00:00+00:00',
                   price_low: float = PRICE_LOW, price_high: float = PRICE_HIGH) -> TimeSeries:
    """Deterministic synthetic site: daily load cycle, solar arc, two-peak prices."""
    if days < 1:
        raise DataError("Synthetic profiles need at least one day", days=days)
    rng = np.random.default_rng(seed)
    steps_per_day = 24 * 60 // STEP_MINUTES
    n = days * steps_per_day
    hour = (np.arange(n) % steps_per_day) * (STEP_MINUTES / 60.0)
    day = np.arange(n) // steps_per_day

    load = 90.0 + 25.0 * np.sin(2 * np.pi * (hour - 8.0) / 24.0) + rng.normal(0.0, 4.0, n)
    load = np.clip(load, 0.0, None)

    daylight = (hour > 6.0) & (hour < 18.0)
    arc = np.where(daylight, np.sin(np.pi * (hour - 6.0) / 12.0), 0.0)
    cloudiness = rng.uniform(0.4, 1.0, days)[day]
    pv = 80.0 * cloudiness * arc * (1.0 + rng.normal(0.0, 0.05, n))
    pv = np.where(daylight, np.clip(pv, 0.0, None), 0.0)

    raw_price = (
        40.0
        + 35.0 * np.exp(-0.5 * ((hour - 8.0) / 1.5) ** 2)
        + 50.0 * np.exp(-0.5 * ((hour - 19.0) / 2.0) ** 2)
        + rng.normal(0.0, 3.0, n)
    )
    price = scale_prices(raw_price, price_low, price_high)

    timestamps = pd.date_range(start=pd.Timestamp(start), periods=n,
                               freq=f'{STEP_MINUTES}min')
    logger.debug('profiles_synthesized', days=days, seed=seed, steps=n)
    return TimeSeries(timestamps=timestamps, load=load, pv=pv, price=price)
