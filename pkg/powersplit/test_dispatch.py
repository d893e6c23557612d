"""
Tests for the horizon LP model and the rolling-horizon LP controller
"""

import itertools

import numpy as np
import pandas as pd
import pytest

from services.dispatch_service import (
    LpController, LpParams, ObjectiveWeights, VariableIndex, build_horizon_model,
    extract_action, rolling_run, shifted_basis, solve_model, solve_single_shot,
)
from services.env_service import EnvState
from services.errors import ConfigError, HorizonError, SolverError
from services.forecast_service import Forecast, perfect
from services.ingest_service import TimeSeries
from services.lp_service import LpSolution, LpStatus, check_feasible, solve
from services.market_service import Tariff
from services.plant_service import StringSpec, StringState, chemical_energy_delta, simulate_step


def price_step_series(steps=8, load=100.0):
    """Flat load, no PV, one cheap step followed by expensive ones."""
    timestamps = pd.date_range('2023-06-01', periods=steps, freq='15min', tz='UTC')
    price = np.full(steps, 0.4)
    price[0] = 0.1
    return TimeSeries(timestamps=timestamps, load=np.full(steps, load),
                      pv=np.zeros(steps), price=price)


def mid_states(socs=(0.5, 0.5), taus=(25.0, 25.0)):
    return [StringState(soc=s, temperature=t) for s, t in zip(socs, taus)]


def profile_series(load, pv, price):
    steps = len(price)
    timestamps = pd.date_range('2023-06-01', periods=steps, freq='15min', tz='UTC')
    return TimeSeries(timestamps=timestamps, load=np.asarray(load, dtype=float),
                      pv=np.asarray(pv, dtype=float), price=np.asarray(price, dtype=float))


def grid_plans(specs, steps, levels):
    """Every per-step, per-string net power plan on ``levels`` points of [-rating, rating]:
    shape (plans, steps, strings)."""
    choices = [np.linspace(-spec.power_rating, spec.power_rating, levels) for spec in specs]
    per_step = np.array(list(itertools.product(*choices)))
    plans = np.array(list(itertools.product(range(len(per_step)), repeat=steps)))
    return per_step[plans]


def lp_soc_paths(plans, specs, socs, dt, lp=None):
    """SOC after every step of every plan under the LP's own recursion."""
    etas = (lp or LpParams()).efficiencies(specs)
    scale = np.array([dt / spec.energy_capacity for spec in specs])
    eta_ch = np.array([e[0] for e in etas])
    eta_dch = np.array([e[1] for e in etas])
    gain = np.where(plans > 0, eta_ch * plans, plans / eta_dch) * scale
    return np.asarray(socs, dtype=float) + np.cumsum(gain, axis=1)


class TestObjectiveWeights:

    def test_rejects_negative(self):
        with pytest.raises(ConfigError):
            ObjectiveWeights(x=1.0, y=-0.1, z=0.0)

    def test_rejects_all_zero(self):
        with pytest.raises(ConfigError):
            ObjectiveWeights(x=0.0, y=0.0, z=0.0)

    def test_normalized_scales(self):
        baseline = np.ones(96 * 8)
        weights = ObjectiveWeights.normalized(baseline, n_strings=2, horizon=96, dt=0.25)
        # only the first week counts: 96 steps of 1 € per day
        assert weights.x == pytest.approx(1.0 / 96.0)
        assert weights.y == pytest.approx(1.0 / 96.0)
        assert weights.z == pytest.approx(1.0 / 960.0)

    def test_normalized_multipliers(self):
        weights = ObjectiveWeights.normalized(np.ones(96), 2, 96, 0.25, cost=2.0, soc=0.0,
                                              temperature=3.0)
        assert weights.x == pytest.approx(2.0 / 96.0)
        assert weights.y == 0.0
        assert weights.z == pytest.approx(3.0 / 960.0)

    def test_zero_baseline_keeps_unit_cost_scale(self):
        weights = ObjectiveWeights.normalized(np.zeros(96), 2, 16, 0.25)
        assert weights.x == 1.0


class TestVariableIndex:

    def test_layout(self):
        idx = VariableIndex(n_strings=2, horizon=4)
        assert idx.n_vars == 4 * 4 + 6 * 2 * 4
        assert idx.ch.shape == (2, 4)
        assert idx.buy.shape == (4,)
        all_columns = np.concatenate([getattr(idx, b).ravel() for b in VariableIndex.BLOCKS])
        np.testing.assert_array_equal(np.sort(all_columns), np.arange(idx.n_vars))

    def test_names_and_step_columns(self):
        idx = VariableIndex(n_strings=2, horizon=3)
        names = idx.names()
        assert names[idx.buy[0]] == 'buy_0'
        assert names[idx.ch[1, 2]] == 'ch_2_2'
        assert len(idx.step_columns(1)) == 4 + 6 * 2


class TestHorizonModel:
    """Constraint assembly, warm start and solved plans"""

    def setup_method(self):
        self.series = price_step_series()
        self.tariff = Tariff(buy_price=self.series.price, sell_price=0.0)
        self.weights = ObjectiveWeights(x=1.0, y=0.0, z=0.0)

    def _model(self, H=8, init=None, lp=None):
        forecast = perfect(self.series, 0, H)
        return build_horizon_model(init or mid_states(), StringSpec.default_pair(), self.tariff,
                                   forecast, self.weights, H, self.series.dt, lp)

    def test_constraint_counts(self):
        model = self._model(H=4)
        assert model.problem.n_eq == 4 * (2 * 2 + 3)
        assert model.problem.n_ub == 4 * 4 * 2
        assert len(model.initial_basis) == model.problem.n_eq + model.problem.n_ub

    def test_forecast_length_mismatch(self, specs):
        forecast = Forecast(load=np.ones(3), pv=np.zeros(3), origin=0)
        with pytest.raises(ConfigError):
            build_horizon_model(mid_states(), specs, self.tariff, forecast, self.weights, 4, 0.25)

    def test_tariff_too_short(self, specs):
        tariff = Tariff(buy_price=np.full(3, 0.2), sell_price=0.0)
        with pytest.raises(HorizonError):
            build_horizon_model(mid_states(), specs, tariff, perfect(self.series, 0, 4),
                                self.weights, 4, 0.25)

    def test_initial_state_count(self, specs):
        with pytest.raises(ConfigError):
            build_horizon_model(mid_states()[:1], specs, self.tariff, perfect(self.series, 0, 4),
                                self.weights, 4, 0.25)

    def test_idle_basis_warm_starts(self):
        model = self._model()
        solution = solve_model(model)
        assert solution.is_optimal
        assert solution.crashed
        assert solution.phase1_iterations == 0
        assert check_feasible(model.problem, solution.x).is_feasible()

    def test_charges_at_cheap_step(self):
        model = self._model()
        solution = solve_model(model)
        action = extract_action(model, solution, step=0)
        np.testing.assert_allclose(action, [75.0, 50.0], atol=1e-6)

        idle_cost = float(np.sum(self.series.price * 100.0 * self.series.dt))
        assert solution.objective < idle_cost - 1.0

    def test_soc_recursion(self):
        model = self._model()
        solution = solve_model(model)
        idx, spec = model.index, model.specs[0]
        eta_ch, eta_dch = LpParams().efficiencies(model.specs)[0]
        expected = 0.5 + 0.25 / spec.energy_capacity * eta_ch * solution.x[idx.ch[0, 0]]
        expected -= 0.25 / (eta_dch * spec.energy_capacity) * solution.x[idx.dch[0, 0]]
        assert solution.x[idx.soc[0, 0]] == pytest.approx(expected, abs=1e-9)

    def test_power_balance(self):
        model = self._model()
        solution = solve_model(model)
        idx, x = model.index, solution.x
        for t in range(model.horizon):
            battery = x[idx.ch[:, t]].sum() - x[idx.dch[:, t]].sum()
            assert x[idx.buy[t]] - x[idx.sell[t]] == pytest.approx(100.0 + battery, abs=1e-7)

    def test_predicted_states(self):
        model = self._model()
        solution = solve_model(model)
        states = model.predicted_states(solution)
        assert len(states) == 2
        assert states[0].soc == pytest.approx(solution.x[model.index.soc[0, 0]])

    def test_explicit_heat_coefficients(self):
        with pytest.raises(ConfigError):
            self._model(lp=LpParams(heat_coefficients=(0.01,)))

    def test_efficiencies_match_plant_at_half_power(self, specs):
        """The LP's energy into and out of the cells equals the plant's at half rating"""
        dt = self.series.dt
        state = StringState(soc=0.5, temperature=25.0)
        model = self._model(H=1)
        for m, (spec, (eta_ch, eta_dch)) in enumerate(zip(specs, LpParams().efficiencies(specs))):
            p = 0.5 * spec.power_rating
            charged = chemical_energy_delta(simulate_step(state, p, spec, dt), spec, dt)
            drained = chemical_energy_delta(simulate_step(state, -p, spec, dt), spec, dt)
            assert charged == pytest.approx(eta_ch * p * dt, rel=1e-9)
            assert drained == pytest.approx(-p * dt / eta_dch, rel=1e-9)
            assert 0.95 < eta_ch * eta_dch < 1.0
            row = model.problem.A_eq[m]
            assert row[model.index.ch[m, 0]] == pytest.approx(-dt * eta_ch / spec.energy_capacity)
            assert row[model.index.dch[m, 0]] == pytest.approx(dt / (eta_dch * spec.energy_capacity))

    def test_explicit_efficiencies_override_calibration(self, specs):
        pairs = LpParams(eta_ch=0.9).efficiencies(specs)
        assert [p[0] for p in pairs] == [0.9, 0.9]
        assert pairs[1][1] == LpParams().efficiencies(specs)[1][1]
        with pytest.raises(ConfigError):
            LpParams(eta_dch=1.5)

    def test_balancing_matches_grid_search(self, specs):
        """Flat prices and only the SOC term: string 1 discharges into string 2"""
        series = profile_series(np.full(2, 50.0), np.zeros(2), np.full(2, 0.2))
        tariff = Tariff(buy_price=series.price, sell_price=0.0)
        init = mid_states(socs=(0.7, 0.3))
        model = build_horizon_model(init, specs, tariff, perfect(series, 0, 2),
                                    ObjectiveWeights(x=0.0, y=1.0, z=0.0), 2, series.dt)
        solution = solve_model(model)
        np.testing.assert_allclose(extract_action(model, solution, step=0), [-75.0, 50.0],
                                   atol=1e-6)

        plans = grid_plans(specs, steps=2, levels=5)
        socs = lp_soc_paths(plans, specs, (0.7, 0.3), series.dt)
        spread = np.abs(socs - socs.mean(axis=2, keepdims=True)).sum(axis=(1, 2))
        best = int(np.argmin(spread))
        assert solution.objective == pytest.approx(spread[best], abs=1e-9)
        np.testing.assert_allclose(plans[best, 0], [-75.0, 50.0])

    def test_valley_then_peak_against_exhaustive_search(self, specs):
        """Empty strings, two cheap steps then two expensive ones"""
        price = np.array([0.1, 0.1, 0.4, 0.4])
        load = 100.0
        series = profile_series(np.full(4, load), np.zeros(4), price)
        tariff = Tariff(buy_price=price, sell_price=0.0)
        init = mid_states(socs=(0.05, 0.05))
        model = build_horizon_model(init, specs, tariff, perfect(series, 0, 4),
                                    ObjectiveWeights(x=1.0, y=0.0, z=0.0), 4, series.dt)
        solution = solve_model(model)
        assert solution.is_optimal

        plans = grid_plans(specs, steps=4, levels=3)
        socs = lp_soc_paths(plans, specs, (0.05, 0.05), series.dt)
        feasible = np.all((socs >= 0.05 - 1e-12) & (socs <= 0.95 + 1e-12), axis=(1, 2))
        net = load + plans.sum(axis=2)
        cost = (np.maximum(net, 0.0) * price * series.dt).sum(axis=1)
        baseline = float(np.sum(load * price * series.dt))

        assert solution.objective <= cost[feasible].min() + 1e-9
        assert solution.objective < baseline
        x, idx = solution.x, model.index
        assert x[idx.ch[:, :2]].sum() > 1.0
        assert x[idx.dch[:, :2]].sum() == pytest.approx(0.0, abs=1e-9)
        assert x[idx.dch[:, 2:]].sum() > 1.0

    @pytest.mark.parametrize('sell_price', [0.0, 0.1])
    def test_never_buys_and_sells_at_once(self, specs, sell_price):
        series = profile_series([20.0] * 6, [0.0, 0.0, 120.0, 120.0, 0.0, 0.0],
                                [0.1, 0.1, 0.2, 0.2, 0.4, 0.4])
        tariff = Tariff(buy_price=series.price, sell_price=sell_price)
        model = build_horizon_model(mid_states(socs=(0.3, 0.3)), specs, tariff,
                                    perfect(series, 0, 6), ObjectiveWeights(1.0, 0.01, 0.001),
                                    6, series.dt)
        solution = solve_model(model)
        assert solution.is_optimal
        x, idx = solution.x, model.index
        assert np.max(x[idx.buy] * x[idx.sell]) <= 1e-9

    def test_absolute_value_auxiliaries_are_tight(self):
        self.weights = ObjectiveWeights(x=1.0, y=0.01, z=0.001)
        model = self._model(init=mid_states(socs=(0.7, 0.3), taus=(35.0, 25.0)))
        solution = solve_model(model)
        x, idx = solution.x, model.index
        soc_gap = np.abs(x[idx.soc_mean] - x[idx.soc])
        tau_gap = np.abs(x[idx.tau_mean] - x[idx.tau])
        np.testing.assert_allclose(x[idx.u_soc], soc_gap, atol=1e-6)
        np.testing.assert_allclose(x[idx.u_tau], tau_gap, atol=1e-6)

    def test_extract_action_requires_optimal(self):
        model = self._model(H=2)
        failed = LpSolution(x=np.zeros(model.problem.n_vars), objective=float('nan'),
                            status=LpStatus.INFEASIBLE, iterations=3)
        with pytest.raises(SolverError):
            extract_action(model, failed, step=5)

    @pytest.mark.slow
    def test_day_ahead_horizon_solves(self, two_days, specs, tariff_for, weights):
        model = build_horizon_model(mid_states(socs=(0.7, 0.3), taus=(35.0, 25.0)), specs,
                                    tariff_for(two_days), perfect(two_days, 0, 96), weights,
                                    96, two_days.dt)
        solution = solve_model(model)
        assert solution.is_optimal
        assert check_feasible(model.problem, solution.x).is_feasible()


class TestShiftedBasis:
    """Carrying a basis forward one control step"""

    def setup_method(self):
        self.series = price_step_series(steps=12)
        self.tariff = Tariff(buy_price=self.series.price, sell_price=0.0)
        self.weights = ObjectiveWeights(x=1.0, y=0.01, z=0.001)

    def _model(self, origin, H):
        return build_horizon_model(mid_states(socs=(0.6, 0.4)), StringSpec.default_pair(),
                                   self.tariff, perfect(self.series, origin, H), self.weights,
                                   H, self.series.dt)

    def test_idle_basis_keeps_one_block_per_step(self):
        previous, current = self._model(0, 8), self._model(1, 8)
        candidate = shifted_basis(previous.initial_basis, previous.index, current)
        assert len(candidate) == len(current.initial_basis)
        rows_per_step = 6 * 2 + 3
        counts = np.bincount(current.index.step_of(candidate), minlength=8)
        np.testing.assert_array_equal(counts, np.full(8, rows_per_step))

    def test_shrinking_horizon_adds_no_idle_columns(self):
        previous, current = self._model(0, 8), self._model(1, 7)
        candidate = shifted_basis(previous.initial_basis, previous.index, current)
        moved = previous.index.shift_map(current.index)[previous.initial_basis]
        assert sorted(candidate) == sorted(int(j) for j in moved if j >= 0)

    def test_short_basis_is_rejected(self):
        previous, current = self._model(0, 8), self._model(1, 8)
        assert shifted_basis(previous.initial_basis[:-1], previous.index, current) is None

    def test_solution_matches_cold_start(self):
        previous, current = self._model(0, 8), self._model(1, 8)
        candidate = shifted_basis(previous.initial_basis, previous.index, current)
        warm = solve_model(current, warm_basis=candidate)
        cold = solve(current.problem)
        assert warm.is_optimal and cold.is_optimal
        assert warm.objective == pytest.approx(cold.objective, rel=1e-9, abs=1e-12)

    def test_optimal_basis_is_exported(self):
        model = self._model(0, 8)
        solution = solve_model(model)
        assert len(solution.basis) == len(model.initial_basis)
        again = solve_model(model, warm_basis=solution.basis)
        assert again.start == 'initial'
        assert again.objective == pytest.approx(solution.objective, rel=1e-12)


class TestSingleShot:

    def test_full_window_plan(self, two_days, specs, tariff_for, weights):
        model, solution = solve_single_shot(two_days, tariff_for(two_days), specs, mid_states(),
                                            weights, start=10, steps=12)
        assert model.horizon == 12 and model.origin == 10
        assert solution.is_optimal
        assert check_feasible(model.problem, solution.x).is_feasible()


class TestLpController:
    """Closed-loop rolling horizon runs"""

    def test_rolling_run_perfect(self, two_days, make_env, weights):
        env = make_env(two_days, length=8)
        report = rolling_run(two_days, 'perfect', env, weights, H=16)
        assert report.meta['controller'] == 'lp-perfect'
        assert report.meta['solver']['solves'] == 8
        assert report.meta['solver']['fallbacks'] == 0
        assert (report.trajectory['lp_status'] == 'Optimal').all()
        assert len(report.trajectory) == 8

    def test_rolling_run_persistence(self, two_days, make_env, weights):
        env = make_env(two_days, length=6)
        report = rolling_run(two_days, 'persistence', env, weights, H=16, anchor='model')
        assert report.meta['controller'] == 'lp-persist'
        assert report.meta['anchor'] == 'model'
        assert report.meta['solver']['fallbacks'] == 0

    def test_horizon_shrinks_at_data_end(self, two_days, make_env, weights):
        env = make_env(two_days).window(180, 12)
        controller = LpController(two_days, env.tariff, env.specs, weights, horizon=24)
        env.run_episode(controller)
        assert controller.records[0]['lp_horizon'] == 12
        assert controller.records[-1]['lp_horizon'] == 1

    def test_iteration_limit_falls_back_to_idle(self, specs):
        series = price_step_series()
        tariff = Tariff(buy_price=series.price, sell_price=0.0)
        controller = LpController(series, tariff, specs, ObjectiveWeights(1.0, 0.0, 0.0),
                                  horizon=8, lp=LpParams(max_iter=1))
        state = EnvState(p_load=100.0, p_pv=0.0, soc=(0.5, 0.5), tau=(25.0, 25.0), price=0.1)
        action = controller(state, 0)
        np.testing.assert_array_equal(action, [0.0, 0.0])
        assert controller.meta()['solver']['fallbacks'] == 1
        assert np.isnan(controller.records[0]['lp_first_step'])

    def test_invalid_arguments(self, two_days, specs, tariff_for, weights):
        tariff = tariff_for(two_days)
        with pytest.raises(ConfigError):
            LpController(two_days, tariff, specs, weights, horizon=16, anchor='forecast')
        with pytest.raises(ConfigError):
            LpController(two_days, tariff, specs, weights, horizon=0)
        with pytest.raises(ConfigError):
            LpController(two_days, tariff, specs, weights, horizon=16, forecaster='oracle')

    def test_warm_started_solves_match_cold_solves(self, two_days, make_env, weights):
        """Every carried-forward plan has the objective of a solve from scratch"""
        env = make_env(two_days, socs=(0.7, 0.3), taus=(35.0, 25.0), length=8)
        controller = LpController(two_days, env.tariff, env.specs, weights, horizon=16)
        report = env.run_episode(controller)
        trajectory = report.trajectory
        for t, record in enumerate(controller.records):
            init = [StringState(soc=trajectory[f'soc_{m + 1}'].iloc[t],
                                temperature=trajectory[f'tau_{m + 1}'].iloc[t])
                    for m in range(len(env.specs))]
            model = build_horizon_model(init, env.specs, env.tariff, perfect(two_days, t, 16),
                                        weights, 16, two_days.dt)
            cold = solve(model.problem)
            assert record['lp_objective'] == pytest.approx(cold.objective, rel=1e-7, abs=1e-9)
        solver = controller.meta()['solver']
        assert 0 <= solver['warm_starts'] <= solver['solves'] - 1
