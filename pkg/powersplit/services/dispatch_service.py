"""
Dispatch Service: rolling-horizon LP controller for a multi-string BESS

Per horizon step t and string m the LP decides grid purchase / sale,
per-string charge and discharge power, and carries per-string SOC and
temperature through linear recursions:

    soc[m,t] = soc[m,t-1] + dt/E_m * (eta_ch*ch[m,t] - dch[m,t]/eta_dch)
    tau[m,t] = (1 - k2*dt)*tau[m,t-1] + dt*k1*alpha_m*(ch[m,t] + dch[m,t]) + dt*k2*tau_air
    buy[t] - sell[t] = L[t] - PV[t] + sum_m (ch[m,t] - dch[m,t])

The objective weighs energy cost against the cross-string SOC and
temperature imbalance, each |mean - value| linearized with an auxiliary
``u >= ±(mean - value)``. Only the first step of every plan is applied.
"""

import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from services.errors import ConfigError, HorizonError, SolverError
from services.forecast_service import Forecast, get_forecaster
from services.lp_service import LpProblem, LpSolution, LpStatus, solve
from services.market_service import Tariff
from services.plant_service import StringSpec, StringState, lp_efficiency, lp_heat_coefficient

logger = structlog.get_logger(__name__)

SIMULTANEOUS_TOL = 1e-6
# loose box keeping the LP temperature variables bounded
TAU_MARGIN_LOW = 100.0
TAU_MARGIN_HIGH = 200.0


@dataclass(frozen=True)
class ObjectiveWeights:
    """Scaling of cost (x, 1/€), SOC imbalance (y) and temperature imbalance (z, 1/°C)"""
    x: float
    y: float
    z: float

    def __post_init__(self):
        if min(self.x, self.y, self.z) < 0:
            raise ConfigError("Objective weights must be >= 0", x=self.x, y=self.y, z=self.z)
        if self.x == 0 and self.y == 0 and self.z == 0:
            raise ConfigError("At least one objective weight must be positive")

    @classmethod
    def normalized(cls, baseline_costs, n_strings: int, horizon: int, dt: float,
                   cost: float = 1.0, soc: float = 1.0,
                   temperature: float = 1.0) -> 'ObjectiveWeights':
        """Weights that bring the three objective terms to comparable scale.

        x = 1 / mean daily baseline cost over the first week,
        y = 1 / (M * H * 0.5), z = 1 / (M * H * 5 °C), each times a multiplier.
        """
        baseline = np.asarray(baseline_costs, dtype=float)
        steps_per_day = int(round(24.0 / dt))
        week = baseline[:7 * steps_per_day]
        days = week.size / steps_per_day if week.size else 0.0
        daily = abs(float(week.sum()) / days) if days else 0.0
        x_scale = 1.0 / daily if daily > 1e-12 else 1.0
        if daily <= 1e-12:
            logger.warning('weights_zero_baseline', days=days)
        return cls(x=cost * x_scale,
                   y=soc / (n_strings * horizon * 0.5),
                   z=temperature / (n_strings * horizon * 5.0))

    def to_dict(self) -> Dict[str, float]:
        return {'x': self.x, 'y': self.y, 'z': self.z}


@dataclass(frozen=True)
class LpParams:
    """LP-side plant approximation and solver settings.

    Unset efficiencies and heat coefficients are calibrated per string to
    the plant at half rated power.
    """
    eta_ch: Optional[float] = None
    eta_dch: Optional[float] = None
    heat_coefficients: Optional[Tuple[float, ...]] = None
    tolerance: float = 1e-7
    max_iter: int = 50000
    pricing: str = 'dantzig'

    def __post_init__(self):
        for name in ('eta_ch', 'eta_dch'):
            value = getattr(self, name)
            if value is not None and not 0 < value <= 1:
                raise ConfigError("LP efficiencies must lie in (0, 1]", **{name: value})

    @classmethod
    def from_config(cls, config, **overrides) -> 'LpParams':
        """Solver settings from the runtime configuration; ``overrides`` win."""
        settings = {'tolerance': config.LP_TOLERANCE, 'max_iter': config.LP_MAX_ITER,
                    'pricing': config.LP_PRICING}
        settings.update(overrides)
        return cls(**settings)

    def efficiencies(self, specs: Sequence[StringSpec]) -> Tuple[Tuple[float, float], ...]:
        """(eta_ch, eta_dch) per string"""
        pairs = []
        for spec in specs:
            eta_ch, eta_dch = lp_efficiency(spec)
            pairs.append((self.eta_ch if self.eta_ch is not None else eta_ch,
                          self.eta_dch if self.eta_dch is not None else eta_dch))
        return tuple(pairs)

    def alphas(self, specs: Sequence[StringSpec]) -> Tuple[float, ...]:
        if self.heat_coefficients is None:
            return tuple(lp_heat_coefficient(spec) for spec in specs)
        if len(self.heat_coefficients) != len(specs):
            raise ConfigError("One heat coefficient per string required",
                              strings=len(specs), coefficients=len(self.heat_coefficients))
        return tuple(self.heat_coefficients)


class VariableIndex:
    """Column layout of the horizon LP"""

    BLOCKS = ('buy', 'sell', 'ch', 'dch', 'soc', 'tau', 'soc_mean', 'tau_mean', 'u_soc', 'u_tau')
    PER_STRING = {'ch', 'dch', 'soc', 'tau', 'u_soc', 'u_tau'}

    def __init__(self, n_strings: int, horizon: int):
        self.n_strings = n_strings
        self.horizon = horizon
        offset = 0
        for name in self.BLOCKS:
            if name in self.PER_STRING:
                size = n_strings * horizon
                block = np.arange(offset, offset + size).reshape(n_strings, horizon)
            else:
                size = horizon
                block = np.arange(offset, offset + size)
            setattr(self, name, block)
            offset += size
        self.n_vars = offset
        self.n_slacks = 4 * n_strings * horizon

        self._steps = np.empty(self.n_vars + self.n_slacks, dtype=int)
        for name in self.BLOCKS:
            self._steps[getattr(self, name)] = np.arange(horizon)
        self._steps[self.n_vars:] = np.repeat(np.arange(horizon), 4 * n_strings)

    def names(self) -> List[str]:
        names = [''] * self.n_vars
        for name in self.BLOCKS:
            block = getattr(self, name)
            if block.ndim == 2:
                for m in range(block.shape[0]):
                    for t in range(block.shape[1]):
                        names[block[m, t]] = f"{name}_{m + 1}_{t}"
            else:
                for t, j in enumerate(block):
                    names[j] = f"{name}_{t}"
        return names

    def step_columns(self, t: int) -> np.ndarray:
        columns = []
        for name in self.BLOCKS:
            block = getattr(self, name)
            columns.extend(block[:, t] if block.ndim == 2 else [block[t]])
        return np.array(columns, dtype=int)

    def step_of(self, columns) -> np.ndarray:
        """Horizon step of problem-space columns (variables, then inequality slacks)"""
        return self._steps[np.asarray(columns, dtype=int)]

    def shift_map(self, current: 'VariableIndex', steps: int = 1) -> np.ndarray:
        """Column of ``current`` that takes over each of our columns once the
        origin has moved ``steps`` steps ahead; -1 where none does."""
        target = np.full(self.n_vars + self.n_slacks, -1, dtype=int)
        if current.n_strings != self.n_strings:
            return target
        span = max(0, min(self.horizon - steps, current.horizon))
        for name in self.BLOCKS:
            before, after = getattr(self, name), getattr(current, name)
            target[before[..., steps:steps + span]] = after[..., :span]
        rows = 4 * self.n_strings
        target[self.n_vars + steps * rows:self.n_vars + (steps + span) * rows] = \
            current.n_vars + np.arange(span * rows)
        return target


@dataclass
class HorizonModel:
    problem: LpProblem
    index: VariableIndex
    horizon: int
    dt: float
    origin: int
    specs: Tuple[StringSpec, ...]
    weights: ObjectiveWeights
    initial_basis: List[int] = field(default_factory=list)

    def step_objective(self, solution: LpSolution, t: int = 0) -> float:
        columns = self.index.step_columns(t)
        return float(self.problem.c[columns] @ solution.x[columns])

    def predicted_states(self, solution: LpSolution, t: int = 0) -> List[StringState]:
        states = []
        for m in range(len(self.specs)):
            soc = float(np.clip(solution.x[self.index.soc[m, t]], 0.0, 1.0))
            states.append(StringState(soc=soc, temperature=float(solution.x[self.index.tau[m, t]])))
        return states


def build_horizon_model(init: Sequence[StringState], specs: Sequence[StringSpec],
                        tariff: Tariff, forecast: Forecast, weights: ObjectiveWeights,
                        H: int, dt: float, lp: Optional[LpParams] = None) -> HorizonModel:
    """Assemble the horizon LP starting from ``init`` at step ``forecast.origin``."""
    lp = lp or LpParams()
    specs = tuple(specs)
    M = len(specs)
    if H < 1 or dt <= 0:
        raise ConfigError("Horizon must be >= 1 step and dt > 0", horizon=H, dt=dt)
    if M < 1 or len(init) != M:
        raise ConfigError(f"Expected {M} initial states, got {len(init)}",
                          strings=M, states=len(init))
    if forecast.horizon != H:
        raise ConfigError(f"Forecast length {forecast.horizon} does not match horizon {H}",
                          forecast=forecast.horizon, horizon=H)
    t0 = forecast.origin
    if t0 + H > len(tariff):
        raise HorizonError("Tariff does not cover the horizon", origin=t0, horizon=H,
                           tariff_steps=len(tariff))

    alphas = lp.alphas(specs)
    idx = VariableIndex(M, H)
    n = idx.n_vars
    rows_eq, rows_ub = 2 * M + 3, 4 * M
    A_eq = np.zeros((H * rows_eq, n))
    b_eq = np.zeros(H * rows_eq)
    A_ub = np.zeros((H * rows_ub, n))
    b_ub = np.zeros(H * rows_ub)
    net = forecast.net_load

    etas = lp.efficiencies(specs)
    for t in range(H):
        base = t * rows_eq
        for m, spec in enumerate(specs):
            eta_ch, eta_dch = etas[m]
            th = spec.thermal
            decay = 1.0 - th.k2 * dt
            heat = dt * th.k1 * alphas[m]

            r = base + m
            A_eq[r, idx.soc[m, t]] = 1.0
            A_eq[r, idx.ch[m, t]] = -dt * eta_ch / spec.energy_capacity
            A_eq[r, idx.dch[m, t]] = dt / (eta_dch * spec.energy_capacity)
            if t > 0:
                A_eq[r, idx.soc[m, t - 1]] = -1.0
            else:
                b_eq[r] = init[m].soc

            r = base + M + m
            A_eq[r, idx.tau[m, t]] = 1.0
            A_eq[r, idx.ch[m, t]] = -heat
            A_eq[r, idx.dch[m, t]] = -heat
            b_eq[r] = dt * th.k2 * th.tau_air
            if t > 0:
                A_eq[r, idx.tau[m, t - 1]] = -decay
            else:
                b_eq[r] += decay * init[m].temperature

        r = base + 2 * M
        A_eq[r, idx.soc_mean[t]] = 1.0
        A_eq[r, idx.soc[:, t]] = -1.0 / M
        A_eq[r + 1, idx.tau_mean[t]] = 1.0
        A_eq[r + 1, idx.tau[:, t]] = -1.0 / M

        r = base + 2 * M + 2
        A_eq[r, idx.buy[t]] = 1.0
        A_eq[r, idx.sell[t]] = -1.0
        A_eq[r, idx.ch[:, t]] = -1.0
        A_eq[r, idx.dch[:, t]] = 1.0
        b_eq[r] = net[t]

        for m in range(M):
            r = t * rows_ub + 4 * m
            for k, (mean, value, aux) in enumerate(((idx.soc_mean[t], idx.soc[m, t], idx.u_soc[m, t]),
                                                    (idx.tau_mean[t], idx.tau[m, t], idx.u_tau[m, t]))):
                A_ub[r + 2 * k, mean] = 1.0
                A_ub[r + 2 * k, value] = -1.0
                A_ub[r + 2 * k, aux] = -1.0
                A_ub[r + 2 * k + 1, mean] = -1.0
                A_ub[r + 2 * k + 1, value] = 1.0
                A_ub[r + 2 * k + 1, aux] = -1.0

    prices = tariff.buy_price[t0:t0 + H]
    c = np.zeros(n)
    c[idx.buy] = weights.x * prices * (1.0 + tariff.tax_ratio) * dt
    c[idx.sell] = -weights.x * tariff.sell_price * (1.0 - tariff.tax_ratio) * dt
    c[idx.u_soc] = weights.y
    c[idx.u_tau] = weights.z

    taus = [s.temperature for s in init] + [spec.thermal.tau_air for spec in specs]
    tau_lo, tau_hi = min(taus) - TAU_MARGIN_LOW, max(taus) + TAU_MARGIN_HIGH
    lower = np.zeros(n)
    upper = np.full(n, np.inf)
    for m, spec in enumerate(specs):
        upper[idx.ch[m]] = spec.power_rating
        upper[idx.dch[m]] = spec.power_rating
        lower[idx.soc[m]] = spec.soc_min
        upper[idx.soc[m]] = spec.soc_max
    upper[idx.soc_mean] = 1.0
    for block in (idx.tau, idx.tau_mean):
        lower[block] = tau_lo
        upper[block] = tau_hi

    problem = LpProblem(c=c, A_eq=A_eq, b_eq=b_eq, A_ub=A_ub, b_ub=b_ub,
                        lower=lower, upper=upper)
    basis = _idle_basis(idx, init, specs, net, dt, n)
    return HorizonModel(problem=problem, index=idx, horizon=H, dt=dt, origin=t0,
                        specs=specs, weights=weights, initial_basis=basis)


def _idle_basis(idx: VariableIndex, init: Sequence[StringState], specs: Sequence[StringSpec],
                net: np.ndarray, dt: float, n_vars: int) -> List[int]:
    """Basis of the idle-battery plan: state, means, one grid variable and the
    imbalance auxiliaries basic; the slack of each non-binding abs row basic."""
    M, H = idx.n_strings, idx.horizon
    socs = np.array([s.soc for s in init])
    taus = np.array([s.temperature for s in init], dtype=float)
    basis = []
    slacks = []
    for t in range(H):
        taus = (1.0 - np.array([s.thermal.k2 for s in specs]) * dt) * taus + \
            dt * np.array([s.thermal.k2 * s.thermal.tau_air for s in specs])
        for m in range(M):
            basis.append(int(idx.soc[m, t]))
        for m in range(M):
            basis.append(int(idx.tau[m, t]))
        basis.append(int(idx.soc_mean[t]))
        basis.append(int(idx.tau_mean[t]))
        basis.append(int(idx.buy[t] if net[t] >= 0 else idx.sell[t]))

        soc_mean, tau_mean = socs.mean(), taus.mean()
        for m in range(M):
            r = t * 4 * M + 4 * m
            basis.append(int(idx.u_soc[m, t]))
            basis.append(int(idx.u_tau[m, t]))
            slacks.append(n_vars + r + (1 if soc_mean - socs[m] >= 0 else 0))
            slacks.append(n_vars + r + 2 + (1 if tau_mean - taus[m] >= 0 else 0))
    return basis + slacks


def extract_action(model: HorizonModel, solution: LpSolution,
                   step: Optional[int] = None) -> np.ndarray:
    """Net first-step power per string (kW, charge positive)."""
    if solution.status is not LpStatus.OPTIMAL:
        raise SolverError(f"LP not optimal at step {step}: {solution.status.value}",
                          step=step, status=solution.status.value)
    idx = model.index
    action = np.empty(len(model.specs))
    for m, spec in enumerate(model.specs):
        ch = float(solution.x[idx.ch[m, 0]])
        dch = float(solution.x[idx.dch[m, 0]])
        if ch > SIMULTANEOUS_TOL and dch > SIMULTANEOUS_TOL:
            logger.warning('simultaneous_charge_discharge', step=step, string=m + 1,
                           charge=ch, discharge=dch)
        action[m] = min(max(ch - dch, -spec.power_rating), spec.power_rating)
    return action


def shifted_basis(basis: Sequence[int], previous: VariableIndex, model: HorizonModel,
                  steps: int = 1) -> Optional[List[int]]:
    """Optimal basis of the plan made ``steps`` steps earlier, moved onto
    ``model``; steps it leaves uncovered take the idle basis. None when the
    moved columns do not fill the basis."""
    moved = previous.shift_map(model.index, steps)[np.asarray(basis, dtype=int)]
    moved = moved[moved >= 0]
    covered = max(0, min(previous.horizon - steps, model.horizon))
    idle = np.asarray(model.initial_basis, dtype=int)
    candidate = np.concatenate([moved, idle[model.index.step_of(idle) >= covered]])
    if candidate.size != idle.size:
        return None
    return [int(j) for j in candidate]


def solve_model(model: HorizonModel, lp: Optional[LpParams] = None,
                warm_basis: Optional[Sequence[int]] = None) -> LpSolution:
    """Solve from ``warm_basis`` when given, else (or when it is unusable)
    from the model's idle basis."""
    lp = lp or LpParams()
    if warm_basis is None:
        return solve(model.problem, tol=lp.tolerance, max_iter=lp.max_iter,
                     pricing=lp.pricing, initial_basis=model.initial_basis)
    return solve(model.problem, tol=lp.tolerance, max_iter=lp.max_iter, pricing=lp.pricing,
                 initial_basis=warm_basis, fallback_basis=model.initial_basis)


def solve_single_shot(dataset, tariff: Tariff, specs: Sequence[StringSpec],
                      init: Sequence[StringState], weights: ObjectiveWeights,
                      lp: Optional[LpParams] = None, start: int = 0,
                      steps: Optional[int] = None) -> Tuple[HorizonModel, LpSolution]:
    """One perfect-foresight LP over the whole window."""
    steps = steps if steps is not None else len(dataset.load) - start
    forecast = get_forecaster('perfect')(dataset, start, steps)
    model = build_horizon_model(init, specs, tariff, forecast, weights, steps,
                                dataset.dt, lp)
    return model, solve_model(model, lp)


class LpController:
    """Rolling-horizon LP controller; callable as ``controller(state, t)``"""

    def __init__(self, dataset, tariff: Tariff, specs: Sequence[StringSpec],
                 weights: ObjectiveWeights, horizon: int,
                 forecaster: Union[str, Callable[..., Forecast]] = 'perfect',
                 lp: Optional[LpParams] = None, anchor: str = 'plant'):
        if anchor not in ('plant', 'model'):
            raise ConfigError(f"Unknown anchor mode '{anchor}'", anchor=anchor)
        if horizon < 1:
            raise ConfigError("Horizon must be >= 1 step", horizon=horizon)
        self.dataset = dataset
        self.tariff = tariff
        self.specs = tuple(specs)
        self.weights = weights
        self.horizon = horizon
        self.forecaster_name = forecaster if isinstance(forecaster, str) else forecaster.__name__
        self.forecaster = get_forecaster(forecaster) if isinstance(forecaster, str) else forecaster
        self.lp = lp or LpParams()
        self.anchor = anchor
        self.name = 'lp-perfect' if self.forecaster_name == 'perfect' else 'lp-persist'
        self.records: List[Dict[str, Any]] = []
        self.build_seconds = 0.0
        self.solve_seconds = 0.0
        self.warm_starts = 0
        self._predicted: Optional[List[StringState]] = None
        self._last_plan: Optional[Tuple[int, VariableIndex, List[int]]] = None

    def _initial_states(self, state) -> List[StringState]:
        if self.anchor == 'model' and self._predicted is not None:
            return self._predicted
        return [StringState(soc=s, temperature=tau) for s, tau in zip(state.soc, state.tau)]

    def __call__(self, state, t: int) -> np.ndarray:
        available = min(len(self.dataset.load), len(self.tariff)) - t
        H = min(self.horizon, available)
        if H < 1:
            raise HorizonError(f"No data left at step {t}", step=t)
        init = self._initial_states(state)

        started = time.perf_counter()
        forecast = self.forecaster(self.dataset, t, H)
        model = build_horizon_model(init, self.specs, self.tariff, forecast, self.weights,
                                    H, self.dataset.dt, self.lp)
        warm = None
        if self._last_plan is not None and self._last_plan[0] < t:
            origin, index, basis = self._last_plan
            warm = shifted_basis(basis, index, model, steps=t - origin)
        built = time.perf_counter()
        solution = solve_model(model, self.lp, warm_basis=warm)
        if warm is not None and solution.start == 'initial':
            self.warm_starts += 1
        self.build_seconds += built - started
        self.solve_seconds += time.perf_counter() - built

        if solution.is_optimal:
            action = extract_action(model, solution, step=t)
            first_step = model.step_objective(solution)
            self._predicted = model.predicted_states(solution)
            self._last_plan = (t, model.index, solution.basis)
        else:
            logger.warning('lp_fallback_zero_action', step=t, status=solution.status.value,
                           iterations=solution.iterations)
            action = np.zeros(len(self.specs))
            first_step = float('nan')
            self._predicted = None
            self._last_plan = None

        self.records.append({
            'lp_status': solution.status.value,
            'lp_iterations': solution.iterations,
            'lp_horizon': H,
            'lp_objective': solution.objective,
            'lp_first_step': first_step,
        })
        return action

    def step_record(self, transition) -> Dict[str, Any]:
        return self.records[-1]

    def meta(self) -> Dict[str, Any]:
        statuses = [r['lp_status'] for r in self.records]
        return {
            'controller': self.name,
            'forecaster': self.forecaster_name,
            'horizon': self.horizon,
            'anchor': self.anchor,
            'weights': self.weights.to_dict(),
            'solver': {
                'solves': len(self.records),
                'fallbacks': sum(s != LpStatus.OPTIMAL.value for s in statuses),
                'iterations': int(sum(r['lp_iterations'] for r in self.records)),
                'warm_starts': self.warm_starts,
                'build_seconds': self.build_seconds,
                'solve_seconds': self.solve_seconds,
                'pricing': self.lp.pricing,
                'tolerance': self.lp.tolerance,
            },
        }


def rolling_run(dataset, forecaster: Union[str, Callable[..., Forecast]], env,
                weights: ObjectiveWeights, H: int, anchor: str = 'plant',
                lp: Optional[LpParams] = None, scenario=None):
    """Closed-loop rolling-horizon run of the LP controller through ``env``."""
    controller = LpController(dataset, env.tariff, env.specs, weights, H,
                              forecaster=forecaster, lp=lp, anchor=anchor)
    logger.info('rolling_run_started', controller=controller.name, horizon=H,
                steps=env.length, anchor=anchor)
    report = env.run_episode(controller, scenario=scenario, extras=controller.step_record)
    report.meta.update(controller.meta())
    logger.info('rolling_run_finished', controller=controller.name,
                savings=report.summary.savings,
                fallbacks=report.meta['solver']['fallbacks'])
    return report
