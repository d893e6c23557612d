"""
Environment Service: episodic BESS environment over the plant simulation

State (per step t): [p_load_t, p_pv_t, soc_1..M, tau_1..M, price_t] where
SOC and temperature are the values entering the step. Actions are per-string
set-points in kW (charge positive); learned policies act in [-1, 1] and are
mapped affinely onto [-p_N, p_N].

Reward of a step:

    r = x * (baseline_cost - cost) - y * delta_soc - z * delta_tau

with the imbalance terms taken on the post-step states.
"""

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import structlog

from services.dispatch_service import ObjectiveWeights
from services.errors import ConfigError, DataError, DomainError, EnvStateError
from services.market_service import GridSample, Tariff, baseline_cost_series, grid_power, step_cost
from services.metrics_service import MetricsSummary, delta_series, summarize_frame
from services.plant_service import StringSpec, StringState, simulate_step

logger = structlog.get_logger(__name__)

TAU_REFERENCE = 25.0
TAU_SPAN = 20.0


@dataclass(frozen=True)
class EnvState:
    p_load: float
    p_pv: float
    soc: Tuple[float, ...]
    tau: Tuple[float, ...]
    price: float

    @property
    def n_strings(self) -> int:
        return len(self.soc)

    def as_vector(self) -> np.ndarray:
        return np.array([self.p_load, self.p_pv, *self.soc, *self.tau, self.price])


@dataclass(frozen=True)
class EnvAction:
    powers: Tuple[float, ...]

    def __post_init__(self):
        powers = tuple(float(p) for p in np.atleast_1d(np.asarray(self.powers, dtype=float)))
        if not all(np.isfinite(powers)):
            raise DomainError("Action contains non-finite set-points", powers=powers)
        object.__setattr__(self, 'powers', powers)


@dataclass(frozen=True)
class EnvTransition:
    step: int
    state: EnvState
    action: EnvAction
    reward: float
    done: bool
    info: Dict[str, Any]
    next_state: EnvState


def reward_from_info(info: Dict[str, Any], weights: ObjectiveWeights) -> float:
    """Step reward recomputed from logged transition fields."""
    return (weights.x * (info['baseline_cost'] - info['cost'])
            - weights.y * info['delta_soc']
            - weights.z * info['delta_tau'])


@dataclass(frozen=True)
class ObservationScale:
    """Policy-facing normalization of the raw state vector"""
    total_power: float
    price_min: float
    price_max: float

    def normalize(self, state: EnvState) -> np.ndarray:
        span = self.price_max - self.price_min
        price = (state.price - self.price_min) / span if span > 0 else 0.5
        return np.array([
            state.p_load / self.total_power,
            state.p_pv / self.total_power,
            *state.soc,
            *((t - TAU_REFERENCE) / TAU_SPAN for t in state.tau),
            price,
        ])


@dataclass
class Report:
    """Trajectory, metrics and run metadata of one episode"""
    trajectory: pd.DataFrame
    summary: MetricsSummary
    meta: Dict[str, Any] = field(default_factory=dict)
    transitions: List[EnvTransition] = field(default_factory=list, repr=False)

    @property
    def baseline_costs(self) -> np.ndarray:
        return self.trajectory['baseline_cost_eur'].to_numpy()

    @property
    def costs(self) -> np.ndarray:
        return self.trajectory['cost_eur'].to_numpy()


Controller = Callable[[EnvState, int], Sequence[float]]


class BessEnv:
    """Sequential environment: one episode over ``[start, start + length)``"""

    def __init__(self, profiles, tariff: Tariff, specs: Sequence[StringSpec],
                 weights: ObjectiveWeights,
                 initial_states: Optional[Sequence[StringState]] = None,
                 start: int = 0, length: Optional[int] = None,
                 baseline: Optional[np.ndarray] = None):
        if profiles is None:
            raise DataError("Environment needs a dataset")
        self.profiles = profiles
        self.tariff = tariff
        self.specs = tuple(specs)
        self.weights = weights
        if not self.specs:
            raise ConfigError("Environment needs at least one string")

        n = len(profiles.load)
        length = n - start if length is None else length
        if start < 0 or length < 1 or start + length > n:
            raise DataError(f"Episode [{start}, {start + length}) outside dataset of {n} steps",
                            start=start, length=length, steps=n)
        if len(tariff) < n:
            raise DataError("Tariff shorter than dataset", tariff_steps=len(tariff), steps=n)
        self.start = start
        self.length = length
        self.dt = float(profiles.dt)
        self.baseline = baseline if baseline is not None else baseline_cost_series(profiles, tariff)
        self.initial_states = list(initial_states) if initial_states is not None else [
            StringState(soc=0.5, temperature=spec.thermal.tau_air) for spec in self.specs]
        self._check_states(self.initial_states)
        self.scale = ObservationScale(
            total_power=sum(spec.power_rating for spec in self.specs),
            price_min=float(tariff.buy_price[:n].min()),
            price_max=float(tariff.buy_price[:n].max()),
        )
        self._t = start
        self._states = list(self.initial_states)
        self._done = False

    def _check_states(self, states: Sequence[StringState]):
        if len(states) != len(self.specs):
            raise ConfigError(f"Expected {len(self.specs)} initial states, got {len(states)}",
                              strings=len(self.specs), states=len(states))

    @property
    def n_strings(self) -> int:
        return len(self.specs)

    @property
    def power_ratings(self) -> np.ndarray:
        return np.array([spec.power_rating for spec in self.specs])

    @property
    def steps_per_day(self) -> int:
        return int(round(24.0 / self.dt))

    @property
    def t(self) -> int:
        return self._t

    @property
    def done(self) -> bool:
        return self._done

    @property
    def states(self) -> List[StringState]:
        return list(self._states)

    def window(self, start: int, length: int,
               initial_states: Optional[Sequence[StringState]] = None) -> 'BessEnv':
        """Environment over a sub-range of the same dataset."""
        return BessEnv(self.profiles, self.tariff, self.specs, self.weights,
                       initial_states=initial_states or self.initial_states,
                       start=start, length=length, baseline=self.baseline)

    def _state_at(self, t: int) -> EnvState:
        i = min(t, len(self.profiles.load) - 1)
        return EnvState(
            p_load=float(self.profiles.load[i]),
            p_pv=float(self.profiles.pv[i]),
            soc=tuple(s.soc for s in self._states),
            tau=tuple(s.temperature for s in self._states),
            price=float(self.tariff.buy_price[i]),
        )

    @property
    def state(self) -> EnvState:
        return self._state_at(self._t)

    def reset(self, scenario=None,
              initial_states: Optional[Sequence[StringState]] = None) -> EnvState:
        """Back to the episode start; ``scenario`` supplies initial_soc / initial_tau."""
        if scenario is not None:
            socs, taus = list(scenario.initial_soc), list(scenario.initial_tau)
            if len(socs) != self.n_strings or len(taus) != self.n_strings:
                raise ConfigError("Scenario initial conditions do not match string count",
                                  strings=self.n_strings, socs=len(socs), taus=len(taus))
            initial_states = [StringState(soc=s, temperature=t) for s, t in zip(socs, taus)]
        if initial_states is not None:
            self._check_states(initial_states)
            self.initial_states = list(initial_states)
        self._t = self.start
        self._states = list(self.initial_states)
        self._done = False
        return self.state

    def observe(self, state: Optional[EnvState] = None) -> np.ndarray:
        return self.scale.normalize(state or self.state)

    def to_power(self, unit_action) -> np.ndarray:
        """Map [-1, 1] actions to kW set-points."""
        return np.clip(np.asarray(unit_action, dtype=float), -1.0, 1.0) * self.power_ratings

    def to_unit(self, powers) -> np.ndarray:
        return np.asarray(powers, dtype=float) / self.power_ratings

    def step(self, action) -> EnvTransition:
        if self._done:
            raise EnvStateError("step() called on a finished episode", step=self._t)
        requested = action if isinstance(action, EnvAction) else EnvAction(tuple(np.atleast_1d(action)))
        if len(requested.powers) != self.n_strings:
            raise ConfigError(f"Expected {self.n_strings} set-points, got {len(requested.powers)}",
                              strings=self.n_strings, received=len(requested.powers))

        t = self._t
        state = self.state
        results = [simulate_step(s, p, spec, self.dt)
                   for s, p, spec in zip(self._states, requested.powers, self.specs)]
        applied = tuple(r.p_applied for r in results)
        sample = GridSample(load=state.p_load, pv=state.p_pv, dt=self.dt)
        p_grid = grid_power(sample, applied, self.n_strings)
        cost = step_cost(p_grid, t, self.tariff, self.dt)

        new_states = [r.new_state for r in results]
        info = {
            'cost': cost,
            'baseline_cost': float(self.baseline[t]),
            'p_grid': p_grid,
            'delta_soc': float(delta_series([s.soc for s in new_states])[0]),
            'delta_tau': float(delta_series([s.temperature for s in new_states])[0]),
            'p_set': requested.powers,
            'p_loss': tuple(r.p_loss for r in results),
            'p_inv_loss': tuple(r.p_inv_loss for r in results),
            'p_heat': tuple(r.p_heat for r in results),
            'soc_limited': tuple(r.soc_limited for r in results),
            'rate_limited': tuple(r.rate_limited for r in results),
            'soc_clamped': tuple(r.soc_clamped for r in results),
        }
        reward = reward_from_info(info, self.weights)

        self._states = new_states
        self._t += 1
        self._done = self._t >= self.start + self.length
        return EnvTransition(step=t, state=state, action=EnvAction(applied), reward=reward,
                             done=self._done, info=info, next_state=self.state)

    def _row(self, transition: EnvTransition) -> Dict[str, Any]:
        s, info = transition.state, transition.info
        row = {
            'step': transition.step,
            'timestamp': self.profiles.timestamps[transition.step].isoformat(),
            'dt_h': self.dt,
            'load_kw': s.p_load,
            'pv_kw': s.p_pv,
            'price_eur_kwh': s.price,
        }
        for m in range(self.n_strings):
            k = m + 1
            row[f'soc_{k}'] = s.soc[m]
            row[f'tau_{k}'] = s.tau[m]
            row[f'p_set_{k}'] = info['p_set'][m]
            row[f'p_{k}'] = transition.action.powers[m]
            row[f'loss_kw_{k}'] = info['p_loss'][m]
            row[f'inv_loss_kw_{k}'] = info['p_inv_loss'][m]
            row[f'heat_kw_{k}'] = info['p_heat'][m]
            row[f'soc_next_{k}'] = transition.next_state.soc[m]
            row[f'tau_next_{k}'] = transition.next_state.tau[m]
            row[f'soc_limited_{k}'] = info['soc_limited'][m]
            row[f'rate_limited_{k}'] = info['rate_limited'][m]
            row[f'soc_clamped_{k}'] = info['soc_clamped'][m]
        row.update({
            'p_grid_kw': info['p_grid'],
            'cost_eur': info['cost'],
            'baseline_cost_eur': info['baseline_cost'],
            'delta_soc': info['delta_soc'],
            'delta_tau': info['delta_tau'],
            'reward': transition.reward,
        })
        return row

    def run_episode(self, controller: Controller, scenario=None,
                    extras: Optional[Callable[[EnvTransition], Dict[str, Any]]] = None) -> Report:
        """Drive ``controller(state, t)`` until the episode ends."""
        state = self.reset(scenario)
        transitions, rows = [], []
        while not self._done:
            action = controller(state, self._t)
            transition = self.step(action)
            row = self._row(transition)
            if extras is not None:
                row.update(extras(transition))
            transitions.append(transition)
            rows.append(row)
            state = transition.next_state

        frame = pd.DataFrame(rows)
        step_savings = frame['baseline_cost_eur'] - frame['cost_eur']
        frame['cumulative_savings_eur'] = step_savings.cumsum()
        loss_columns = [f'loss_kw_{m + 1}' for m in range(self.n_strings)]
        loss_kwh = frame[loss_columns].sum(axis=1) * self.dt
        frame['loss_kwh'] = loss_kwh
        frame['cumulative_loss_kwh'] = loss_kwh.cumsum()

        summary = summarize_frame(frame)
        name = getattr(controller, 'name', type(controller).__name__)
        meta = {
            'controller': name,
            'start': self.start,
            'steps': self.length,
            'n_strings': self.n_strings,
            'dataset': self.profiles.fingerprint() if hasattr(self.profiles, 'fingerprint') else None,
            'weights': self.weights.to_dict(),
        }
        logger.info('episode_finished', controller=name, steps=len(rows),
                    savings=summary.savings, efficiency=summary.efficiency)
        return Report(trajectory=frame, summary=summary, meta=meta, transitions=transitions)


class ZeroController:
    name = 'zero'

    def __init__(self, n_strings: int):
        self.n_strings = n_strings

    def __call__(self, state: EnvState, t: int) -> np.ndarray:
        return np.zeros(self.n_strings)


class RandomController:
    """Uniform set-points over each string's rating (seeded)"""
    name = 'random'

    def __init__(self, power_ratings: Sequence[float], seed: int = 0):
        self.power_ratings = np.asarray(power_ratings, dtype=float)
        self.rng = np.random.default_rng(seed)

    def __call__(self, state: EnvState, t: int) -> np.ndarray:
        return self.rng.uniform(-1.0, 1.0, self.power_ratings.size) * self.power_ratings


class ReplayController:
    """Plays back a fixed sequence of set-points"""
    name = 'replay'

    def __init__(self, actions: Sequence[Sequence[float]], start: int = 0):
        self.actions = [np.asarray(a, dtype=float) for a in actions]
        self.start = start

    def __call__(self, state: EnvState, t: int) -> np.ndarray:
        return self.actions[t - self.start]
