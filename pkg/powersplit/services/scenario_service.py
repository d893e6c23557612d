"""
Scenario Service: scenario files, run orchestration and controller comparison

A scenario is one YAML document (see config/scenarios/) parsed into frozen
dataclasses. Unknown keys anywhere in the document are rejected.
"""

import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import pandas as pd
import structlog
import yaml

from services.dispatch_service import LpController, LpParams, ObjectiveWeights
from services.env_service import BessEnv, RandomController, Report, ZeroController
from services.errors import ComparisonError, ConfigError, DataError
from services.export_service import ReportWriter, atomic_write_text, frame_to_csv
from services.ingest_service import PRICE_HIGH, PRICE_LOW, TimeSeries, load_csv, scale_prices, synth_profiles
from services.market_service import Tariff, baseline_cost_series
from services.metrics_service import metric_series
from services.plant_service import StringSpec, StringState
from services.policy_service import MlpPolicy, load_checkpoint, save_checkpoint
from services.training_service import (
    PolicyController, TrainConfig, bc_train, collect_expert, seed_sweep, train_pipeline,
)

logger = structlog.get_logger(__name__)

SCENARIO_DIR = Path(__file__).resolve().parent.parent / 'config' / 'scenarios'
PRESETS = {
    'scenario-1': SCENARIO_DIR / 'scenario_1.yaml',
    'scenario-2': SCENARIO_DIR / 'scenario_2.yaml',
}
CONTROLLERS = ('lp-perfect', 'lp-persist', 'bc', 'ppo', 'zero', 'random')
DESK_DAYS = 30
EXPERT_WEEK_DAYS = 7
COMPARED_METRICS = ('savings', 'mean_delta_soc', 'mean_delta_tau', 'efficiency',
                    'total_loss', 'throughput', 'total_cost', 'baseline_cost',
                    'final_delta_soc', 'final_delta_tau')
ALIGNED_COLUMNS = ('cumulative_savings_eur', 'delta_soc', 'delta_tau', 'cumulative_loss_kwh')


@dataclass(frozen=True)
class WeightsConfig:
    cost: float = 1.0
    soc: float = 1.0
    temperature: float = 1.0
    normalize: bool = True


@dataclass(frozen=True)
class TariffConfig:
    sell_price: float = 0.086
    tax_ratio: float = 0.0
    price_low: float = PRICE_LOW
    price_high: float = PRICE_HIGH


@dataclass(frozen=True)
class DatasetConfig:
    path: Optional[str] = None
    synth_seed: int = 7
    synth_days: Optional[int] = None
    columns: Dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class PolicyConfig:
    checkpoint: Optional[str] = None


@dataclass(frozen=True)
class StringConfig:
    name: str
    energy_kwh: float
    power_kw: float
    n_cells: int
    resistance: float = 0.002
    soc_min: float = 0.05
    soc_max: float = 0.95

    def to_spec(self) -> StringSpec:
        return StringSpec.build(self.name, self.energy_kwh, self.power_kw, self.n_cells,
                                resistance=self.resistance, soc_min=self.soc_min,
                                soc_max=self.soc_max)


@dataclass(frozen=True)
class Scenario:
    """One experiment: horizon, initial conditions, controller and data"""
    name: str
    duration_days: int
    initial_soc: Tuple[float, ...]
    initial_tau: Tuple[float, ...]
    controller: str = 'lp-perfect'
    horizon: int = 96
    seed: int = 0
    full_year: bool = False
    weights: WeightsConfig = field(default_factory=WeightsConfig)
    tariff: TariffConfig = field(default_factory=TariffConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    lp: LpParams = field(default_factory=LpParams)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    strings: Optional[Tuple[StringConfig, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, 'initial_soc', tuple(float(s) for s in self.initial_soc))
        object.__setattr__(self, 'initial_tau', tuple(float(t) for t in self.initial_tau))
        if self.duration_days < 1:
            raise ConfigError("Scenario duration must be >= 1 day", duration_days=self.duration_days)
        if self.controller not in CONTROLLERS:
            raise ConfigError(f"Unknown controller '{self.controller}'",
                              available=list(CONTROLLERS))
        if self.horizon < 1:
            raise ConfigError("Horizon must be >= 1 step", horizon=self.horizon)

        specs = self.specs()
        if len(self.initial_soc) != len(specs) or len(self.initial_tau) != len(specs):
            raise ConfigError("Initial conditions do not match string count", strings=len(specs),
                              initial_soc=len(self.initial_soc), initial_tau=len(self.initial_tau))
        for spec, soc in zip(specs, self.initial_soc):
            if not spec.soc_min <= soc <= spec.soc_max:
                raise ConfigError(f"Initial SOC of '{spec.name}' outside its operating window",
                                  soc=soc, soc_min=spec.soc_min, soc_max=spec.soc_max)

    def specs(self) -> Tuple[StringSpec, ...]:
        if self.strings is None:
            return StringSpec.default_pair()
        return tuple(s.to_spec() for s in self.strings)

    def initial_states(self) -> List[StringState]:
        return [StringState(soc=s, temperature=t)
                for s, t in zip(self.initial_soc, self.initial_tau)]

    @property
    def effective_days(self) -> int:
        """Simulated days; long scenarios are trimmed unless full_year is set."""
        if self.full_year:
            return self.duration_days
        return min(self.duration_days, DESK_DAYS)

    def with_overrides(self, controller: Optional[str] = None, seed: Optional[int] = None,
                       horizon: Optional[int] = None, full_year: Optional[bool] = None,
                       checkpoint: Optional[str] = None,
                       ppo_iterations: Optional[int] = None) -> 'Scenario':
        changes: Dict[str, Any] = {}
        if controller is not None:
            changes['controller'] = controller
        if seed is not None:
            changes['seed'] = seed
        if horizon is not None:
            changes['horizon'] = horizon
        if full_year is not None:
            changes['full_year'] = full_year
        if checkpoint is not None:
            changes['policy'] = replace(self.policy, checkpoint=checkpoint)
        if ppo_iterations is not None:
            changes['train'] = replace(self.train, ppo_iterations=ppo_iterations)
        return replace(self, **changes) if changes else self

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['initial_soc'] = list(self.initial_soc)
        data['initial_tau'] = list(self.initial_tau)
        data['train'] = self.train.to_dict()
        data['lp']['heat_coefficients'] = (None if self.lp.heat_coefficients is None
                                           else list(self.lp.heat_coefficients))
        if self.strings is not None:
            data['strings'] = [asdict(s) for s in self.strings]
        return data


def config_hash(scenario: Scenario) -> str:
    """sha256 over every field except the display name"""
    data = scenario.to_dict()
    data.pop('name', None)
    canonical = json.dumps(data, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def _build(cls, data: Any, section: str, exclude: Sequence[str] = ()):
    if data is None:
        return cls()
    if not isinstance(data, Mapping):
        raise ConfigError(f"Scenario section '{section}' must be a mapping", section=section)
    allowed = {f.name for f in fields(cls)} - set(exclude)
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"Unknown keys in scenario section '{section}': {', '.join(unknown)}",
                          section=section, unknown=unknown)
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"Invalid scenario section '{section}': {exc}", section=section) from None


def scenario_from_dict(data: Mapping[str, Any], config=None) -> Scenario:
    """Scenario from a parsed document. With a runtime ``config``, keys the
    document leaves out (horizon, seed, solver settings) come from it."""
    if not isinstance(data, Mapping):
        raise ConfigError("Scenario document must be a mapping")
    allowed = {f.name for f in fields(Scenario)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"Unknown scenario keys: {', '.join(unknown)}", unknown=unknown)
    missing = [key for key in ('name', 'duration_days', 'initial_soc', 'initial_tau')
               if key not in data]
    if missing:
        raise ConfigError(f"Scenario is missing: {', '.join(missing)}", missing=missing)

    values = dict(data)
    if config is not None:
        values.setdefault('horizon', config.DEFAULT_HORIZON)
        values.setdefault('seed', config.DEFAULT_SEED)
    values['weights'] = _build(WeightsConfig, data.get('weights'), 'weights')
    values['tariff'] = _build(TariffConfig, data.get('tariff'), 'tariff')
    values['dataset'] = _build(DatasetConfig, data.get('dataset'), 'dataset')
    values['policy'] = _build(PolicyConfig, data.get('policy'), 'policy')
    # the run seed drives training
    values['train'] = _build(TrainConfig, data.get('train'), 'train', exclude=('seed',))
    lp = dict(data.get('lp') or {})
    if lp.get('heat_coefficients') is not None:
        lp['heat_coefficients'] = tuple(lp['heat_coefficients'])
    values['lp'] = _build(LpParams, lp, 'lp')
    if config is not None:
        values['lp'] = LpParams.from_config(config, **lp)
    if data.get('strings') is not None:
        if not isinstance(data['strings'], list) or not data['strings']:
            raise ConfigError("Scenario 'strings' must be a non-empty list")
        values['strings'] = tuple(_build(StringConfig, s, f'strings[{i}]')
                                  for i, s in enumerate(data['strings']))
    try:
        return Scenario(**values)
    except TypeError as exc:
        raise ConfigError(f"Invalid scenario: {exc}") from None


def load_scenario(source: Union[str, Path], config=None) -> Scenario:
    """Scenario from a YAML file or a preset name ('scenario-1', 'scenario-2').

    ``config`` is the runtime configuration supplying defaults, see
    ``scenario_from_dict``.
    """
    path = PRESETS.get(str(source), Path(source))
    try:
        with open(path, 'r', encoding='utf-8') as handle:
            data = yaml.safe_load(handle)
    except FileNotFoundError:
        raise ConfigError(f"Scenario file not found: {source}", path=str(path),
                          presets=sorted(PRESETS)) from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"Scenario file is not valid YAML: {exc}", path=str(path)) from None
    scenario = scenario_from_dict(data, config)
    logger.info('scenario_loaded', name=scenario.name, path=str(path),
                days=scenario.effective_days, controller=scenario.controller,
                horizon=scenario.horizon, pricing=scenario.lp.pricing)
    return scenario


def build_dataset(scenario: Scenario, days: Optional[int] = None) -> TimeSeries:
    """Profiles for the first ``days`` days (default: the scenario's effective days)."""
    days = days or scenario.effective_days
    source = scenario.dataset
    if source.path:
        series = load_csv(source.path, source.columns)
        if series.price is None:
            raise DataError("Profile file has no price column", path=source.path)
        needed = days * series.steps_per_day
        if len(series) < needed:
            raise DataError(f"Profile file covers {series.days} days, scenario needs {days}",
                            path=source.path, days=series.days, needed=days)
        series = series.window(0, needed)
        return TimeSeries(series.timestamps, series.load, series.pv,
                          scale_prices(series.price, scenario.tariff.price_low,
                                       scenario.tariff.price_high))

    synth_days = max(source.synth_days or days, days)
    series = synth_profiles(synth_days, source.synth_seed,
                            price_low=scenario.tariff.price_low,
                            price_high=scenario.tariff.price_high)
    return series.window(0, days * series.steps_per_day)


def build_tariff(scenario: Scenario, dataset: TimeSeries) -> Tariff:
    return Tariff(buy_price=dataset.price, sell_price=scenario.tariff.sell_price,
                  tax_ratio=scenario.tariff.tax_ratio)


def build_weights(scenario: Scenario, dataset: TimeSeries, tariff: Tariff) -> ObjectiveWeights:
    w = scenario.weights
    if not w.normalize:
        return ObjectiveWeights(x=w.cost, y=w.soc, z=w.temperature)
    return ObjectiveWeights.normalized(baseline_cost_series(dataset, tariff),
                                       n_strings=len(scenario.specs()), horizon=scenario.horizon,
                                       dt=dataset.dt, cost=w.cost, soc=w.soc,
                                       temperature=w.temperature)


def build_env(scenario: Scenario, dataset: TimeSeries) -> BessEnv:
    tariff = build_tariff(scenario, dataset)
    return BessEnv(dataset, tariff, scenario.specs(), build_weights(scenario, dataset, tariff),
                   initial_states=scenario.initial_states())


def _train_config(scenario: Scenario) -> TrainConfig:
    return replace(scenario.train, seed=scenario.seed)


def make_controller(scenario: Scenario, env: BessEnv, dataset: TimeSeries):
    name = scenario.controller
    if name in ('lp-perfect', 'lp-persist'):
        forecaster = 'perfect' if name == 'lp-perfect' else 'persistence'
        return LpController(dataset, env.tariff, env.specs, env.weights, scenario.horizon,
                            forecaster=forecaster, lp=scenario.lp)
    if name == 'zero':
        return ZeroController(env.n_strings)
    if name == 'random':
        return RandomController(env.power_ratings, seed=scenario.seed)

    checkpoint = scenario.policy.checkpoint
    if checkpoint:
        return PolicyController(load_checkpoint(checkpoint), env, name)
    if name == 'ppo':
        raise ConfigError("Controller 'ppo' needs policy.checkpoint (run `train` first)")

    # behavior clone of the first week's LP expert
    config = _train_config(scenario)
    expert_env = env.window(env.start, min(EXPERT_WEEK_DAYS * env.steps_per_day, env.length))
    expert, _ = collect_expert(dataset, expert_env, env.weights, scenario.horizon, scenario.lp)
    policy = MlpPolicy.create(n_inputs=3 + 2 * env.n_strings, n_actions=env.n_strings,
                              hidden=config.hidden, seed=config.seed,
                              init_log_std=config.init_log_std)
    bc_train(policy, expert, config)
    return PolicyController(policy, env, name)


def execute(env: BessEnv, controller) -> Report:
    """Run one episode, attaching per-step and run-level controller records."""
    report = env.run_episode(controller, extras=getattr(controller, 'step_record', None))
    if hasattr(controller, 'meta'):
        report.meta.update(controller.meta())
    return report


def run_scenario(scenario: Scenario, out: Optional[Union[str, Path]] = None,
                 writer: Optional[ReportWriter] = None) -> Report:
    """Build data, environment and controller, run the episode and write the report."""
    log = logger.bind(scenario=scenario.name, controller=scenario.controller)
    started = time.perf_counter()
    dataset = build_dataset(scenario)
    env = build_env(scenario, dataset)
    controller = make_controller(scenario, env, dataset)
    log.info('scenario_started', steps=env.length, strings=env.n_strings, seed=scenario.seed)
    report = execute(env, controller)
    report.meta.update({
        'scenario': scenario.name,
        'config_hash': config_hash(scenario),
        'seed': scenario.seed,
        'days': scenario.effective_days,
        'controller': scenario.controller,
        'wall_time_s': time.perf_counter() - started,
    })
    if out is not None:
        (writer or ReportWriter(out)).write_report(report, out)
    log.info('scenario_finished', savings=report.summary.savings,
             efficiency=report.summary.efficiency, mean_delta_soc=report.summary.mean_delta_soc)
    return report


@dataclass
class TrainingRun:
    policy: MlpPolicy
    report: Dict[str, Any]


def train_scenario(scenario: Scenario, seeds: int = 1,
                   out: Optional[Union[str, Path]] = None) -> TrainingRun:
    """Train on the scenario's profiles; the last ``validation_days`` are held out."""
    config = _train_config(scenario)
    days = max(scenario.effective_days, config.validation_days + EXPERT_WEEK_DAYS)
    dataset = build_dataset(scenario, days)
    env = build_env(scenario, dataset)
    if seeds > 1:
        sweep = seed_sweep(dataset, env, config, seeds, scenario.horizon, scenario.lp)
        policy = sweep.policy
        report = {'best_seed': sweep.best_seed, 'statistics': sweep.statistics,
                  'runs': sweep.reports}
    else:
        result = train_pipeline(dataset, env, config, scenario.horizon, scenario.lp)
        policy, report = result.policy, result.report
    report.update({'scenario': scenario.name, 'config_hash': config_hash(scenario),
                   'dataset': dataset.fingerprint(), 'days': days})

    if out is not None:
        writer = ReportWriter(out)
        save_checkpoint(policy, Path(out) / 'policy.json',
                        metadata={'scenario': scenario.name, 'config_hash': report['config_hash']})
        writer.write_json('training.json', report)
    return TrainingRun(policy=policy, report=report)


@dataclass
class Comparison:
    """Side-by-side metrics of runs on the same dataset"""
    table: pd.DataFrame       # metric x controller
    deltas: pd.DataFrame      # table minus the first controller's column
    aligned: pd.DataFrame     # per-step series, one column group per controller
    dataset: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            'dataset': self.dataset,
            'controllers': list(self.table.columns),
            'metrics': {metric: {c: float(v) for c, v in row.items()}
                        for metric, row in self.table.iterrows()},
            'deltas': {metric: {c: float(v) for c, v in row.items()}
                       for metric, row in self.deltas.iterrows()},
        }


def _labels(names: Sequence[str]) -> List[str]:
    seen: Dict[str, int] = {}
    labels = []
    for name in names:
        seen[name] = seen.get(name, 0) + 1
        labels.append(name if seen[name] == 1 else f'{name}#{seen[name]}')
    return labels


def compare_reports(reports: Mapping[str, Report]) -> Comparison:
    if len(reports) < 2:
        raise ComparisonError("Comparison needs at least two reports", reports=len(reports))
    datasets = {label: r.meta.get('dataset') for label, r in reports.items()}
    lengths = {label: len(r.trajectory) for label, r in reports.items()}
    if len(set(datasets.values())) != 1 or len(set(lengths.values())) != 1:
        raise ComparisonError("Reports were produced on different datasets",
                              datasets=datasets, steps=lengths)

    table = pd.DataFrame({label: [getattr(r.summary, m) for m in COMPARED_METRICS]
                          for label, r in reports.items()},
                         index=pd.Index(COMPARED_METRICS, name='metric'))
    reference = table.iloc[:, 0]
    deltas = table.sub(reference, axis=0)

    first = next(iter(reports.values())).trajectory
    aligned = pd.DataFrame({'step': first['step'].to_numpy(),
                            'timestamp': first['timestamp'].to_numpy()})
    for label, r in reports.items():
        series = metric_series(r.trajectory)
        for column in ALIGNED_COLUMNS:
            aligned[f'{column}_{label}'] = series[column].to_numpy()
    return Comparison(table=table, deltas=deltas, aligned=aligned,
                      dataset=next(iter(datasets.values())))


def compare(scenarios: Sequence[Scenario], workers: int = 1,
            out: Optional[Union[str, Path]] = None) -> Comparison:
    """Run each scenario (in parallel when workers > 1) and compare the reports."""
    if len(scenarios) < 2:
        raise ComparisonError("Comparison needs at least two scenarios", scenarios=len(scenarios))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(run_scenario, scenarios))
    else:
        reports = [run_scenario(s) for s in scenarios]

    labels = _labels([s.controller for s in scenarios])
    comparison = compare_reports(dict(zip(labels, reports)))
    if out is not None:
        writer = ReportWriter(out)
        for label, report in zip(labels, reports):
            writer.write_report(report, Path(out) / label)
        writer.write_comparison(comparison)
    logger.info('comparison_finished', controllers=labels,
                savings={label: r.summary.savings for label, r in zip(labels, reports)})
    return comparison


def sweep_weights(scenario: Scenario, soc_multipliers: Sequence[float],
                  temperature_multipliers: Sequence[float], workers: int = 1,
                  out: Optional[Union[str, Path]] = None) -> pd.DataFrame:
    """Metrics of one scenario over a grid of (soc, temperature) weight multipliers."""
    if not len(soc_multipliers) or not len(temperature_multipliers):
        raise ConfigError("Weight sweep needs at least one multiplier per axis")
    grid = [(float(s), float(t)) for s in soc_multipliers for t in temperature_multipliers]
    variants = [replace(scenario, weights=replace(scenario.weights, soc=s, temperature=t))
                for s, t in grid]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(run_scenario, variants))
    else:
        reports = [run_scenario(v) for v in variants]

    table = pd.DataFrame([
        {'soc_weight': s, 'temperature_weight': t, 'savings': r.summary.savings,
         'mean_delta_soc': r.summary.mean_delta_soc, 'mean_delta_tau': r.summary.mean_delta_tau,
         'efficiency': r.summary.efficiency}
        for (s, t), r in zip(grid, reports)
    ])
    if out is not None:
        atomic_write_text(Path(out) / 'weight_sweep.csv', frame_to_csv(table))
    logger.info('weight_sweep_finished', points=len(grid))
    return table
