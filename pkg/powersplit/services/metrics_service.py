"""
Metrics Service: evaluation metrics over a dispatch trajectory

Features:
- Savings against the no-battery baseline
- Cross-string SOC and temperature imbalance (ΔSOC, Δτ) series and means
- System efficiency from logged losses and battery throughput
- Per-step and cumulative loss series
- Summary recomputation from a trajectory CSV alone
- Min / quartile / max statistics for seed sweeps
"""

from dataclasses import asdict, dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd

from services.errors import DataError


@dataclass(frozen=True)
class MetricsSummary:
    savings: float              # €
    mean_delta_soc: float       # fraction
    mean_delta_tau: float       # °C
    efficiency: float           # %
    total_loss: float           # kWh
    throughput: float           # kWh
    total_cost: float           # €
    baseline_cost: float        # €
    final_delta_soc: float
    final_delta_tau: float
    steps: int

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def savings(costs, baseline_costs) -> float:
    """Σ (baseline − actual) cost"""
    costs = np.asarray(costs, dtype=float)
    baseline = np.asarray(baseline_costs, dtype=float)
    if costs.shape != baseline.shape:
        raise DataError("Cost and baseline series differ in length",
                        costs=costs.size, baseline=baseline.size)
    return float(np.sum(baseline - costs))


def delta_series(values) -> np.ndarray:
    """Per-step Σ_m |mean − v_m| over a (steps, strings) array."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values.reshape(1, -1)
    if values.ndim != 2 or values.shape[1] < 1:
        raise DataError("Imbalance needs a (steps, strings) array", shape=values.shape)
    mean = values.mean(axis=1, keepdims=True)
    return np.abs(mean - values).sum(axis=1)


def _series_and_mean(values) -> Tuple[np.ndarray, float]:
    series = delta_series(values)
    return series, float(np.mean(series)) if series.size else 0.0


def delta_soc_series(socs) -> Tuple[np.ndarray, float]:
    return _series_and_mean(socs)


def delta_tau_series(temperatures) -> Tuple[np.ndarray, float]:
    return _series_and_mean(temperatures)


def efficiency(powers, losses, dt: float) -> float:
    """(1 − Σ loss·dt / Σ |p|·dt)·100; 100 when no energy was processed."""
    powers = np.asarray(powers, dtype=float)
    losses = np.asarray(losses, dtype=float)
    if powers.shape != losses.shape:
        raise DataError("Power and loss series differ in shape",
                        powers=powers.shape, losses=losses.shape)
    throughput = float(np.sum(np.abs(powers) * dt))
    if throughput == 0.0:
        return 100.0
    return (1.0 - float(np.sum(losses * dt)) / throughput) * 100.0


def string_columns(frame: pd.DataFrame, prefix: str) -> List[str]:
    """Per-string columns ``<prefix>_1 .. <prefix>_M`` in string order."""
    columns = []
    m = 1
    while f"{prefix}_{m}" in frame.columns:
        columns.append(f"{prefix}_{m}")
        m += 1
    if not columns:
        raise DataError(f"Trajectory has no '{prefix}_<m>' columns", prefix=prefix)
    return columns


def _dt(frame: pd.DataFrame) -> float:
    values = frame['dt_h'].to_numpy(dtype=float)
    return float(values[0]) if values.size else 0.25


def metric_series(frame: pd.DataFrame) -> pd.DataFrame:
    """Plot-ready per-step metric series of a trajectory."""
    dt = _dt(frame)
    step_savings = frame['baseline_cost_eur'].to_numpy() - frame['cost_eur'].to_numpy()
    loss_kwh = frame[string_columns(frame, 'loss_kw')].to_numpy().sum(axis=1) * dt
    return pd.DataFrame({
        'savings_eur': step_savings,
        'cumulative_savings_eur': np.cumsum(step_savings),
        'delta_soc': delta_series(frame[string_columns(frame, 'soc_next')].to_numpy()),
        'delta_tau': delta_series(frame[string_columns(frame, 'tau_next')].to_numpy()),
        'loss_kwh': loss_kwh,
        'cumulative_loss_kwh': np.cumsum(loss_kwh),
    }, index=frame.index)


def summarize_frame(frame: pd.DataFrame) -> MetricsSummary:
    """Metrics summary from trajectory columns alone."""
    if frame.empty:
        raise DataError("Cannot summarize an empty trajectory")
    dt = _dt(frame)
    costs = frame['cost_eur'].to_numpy(dtype=float)
    baseline = frame['baseline_cost_eur'].to_numpy(dtype=float)
    powers = frame[string_columns(frame, 'p')].to_numpy(dtype=float)
    losses = frame[string_columns(frame, 'loss_kw')].to_numpy(dtype=float)
    soc_series, soc_mean = delta_soc_series(frame[string_columns(frame, 'soc_next')].to_numpy())
    tau_series, tau_mean = delta_tau_series(frame[string_columns(frame, 'tau_next')].to_numpy())

    return MetricsSummary(
        savings=savings(costs, baseline),
        mean_delta_soc=soc_mean,
        mean_delta_tau=tau_mean,
        efficiency=efficiency(powers, losses, dt),
        total_loss=float(np.sum(losses * dt)),
        throughput=float(np.sum(np.abs(powers) * dt)),
        total_cost=float(np.sum(costs)),
        baseline_cost=float(np.sum(baseline)),
        final_delta_soc=float(soc_series[-1]),
        final_delta_tau=float(tau_series[-1]),
        steps=int(len(frame)),
    )


def summary_statistics(values: Sequence[float]) -> Dict[str, float]:
    """min / Q1 / median / Q3 / max"""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise DataError("No values to summarize")
    q1, median, q3 = np.percentile(values, [25, 50, 75])
    return {
        'min': float(values.min()),
        'q1': float(q1),
        'median': float(median),
        'q3': float(q3),
        'max': float(values.max()),
        'count': int(values.size),
    }
