"""
System-level acceptance checks of the workbench

The multi-day closed-loop runs carry the ``slow`` marker.
"""

import itertools
from dataclasses import replace

import numpy as np
import pytest

from services.dispatch_service import ObjectiveWeights, rolling_run, solve_single_shot
from services.env_service import BessEnv, RandomController
from services.ingest_service import synth_profiles
from services.lp_service import LpProblem, check_feasible, solve
from services.market_service import Tariff, baseline_cost_series
from services.plant_service import StringSpec, StringState, chemical_energy_delta, simulate_step
from services.policy_service import MlpPolicy, PpoBatch, bc_loss, gaussian_log_prob, ppo_loss
from services.scenario_service import compare, load_scenario, run_scenario
from services.training_service import TrainConfig, bc_train, collect_expert, evaluate_policy


def build_env(series, socs=(0.5, 0.5), taus=(25.0, 25.0), weights=None, length=None):
    tariff = Tariff(buy_price=series.price, sell_price=0.086)
    specs = StringSpec.default_pair()
    if weights is None:
        weights = ObjectiveWeights.normalized(baseline_cost_series(series, tariff), len(specs),
                                              16, series.dt)
    states = [StringState(soc=s, temperature=t) for s, t in zip(socs, taus)]
    return BessEnv(series, tariff, specs, weights, initial_states=states, length=length)


def vertex_oracle(c, A, b, upper):
    n = c.size
    G = np.vstack([A, -np.eye(n), np.eye(n)])
    h = np.concatenate([b, np.zeros(n), upper])
    combos = np.array(list(itertools.combinations(range(G.shape[0]), n)))
    M, rhs = G[combos], h[combos]
    regular = np.abs(np.linalg.det(M)) > 1e-9
    X = np.linalg.solve(M[regular], rhs[regular][..., None])[..., 0]
    feasible = np.all(X @ G.T <= h + 1e-9, axis=1)
    return float(np.min(X[feasible] @ c))


def numeric_gradients(policy, loss_fn, h=1e-6):
    grads = []
    for param in policy.parameters():
        grad = np.zeros_like(param)
        flat, flat_grad = param.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            up = loss_fn()
            flat[i] = saved - h
            down = loss_fn()
            flat[i] = saved
            flat_grad[i] = (up - down) / (2.0 * h)
        grads.append(grad)
    return grads


class TestSolverOracle:

    def test_random_bounded_problems(self):
        rng = np.random.default_rng(100)
        for _ in range(100):
            n, m = int(rng.integers(1, 7)), int(rng.integers(1, 7))
            c = rng.uniform(-1.0, 1.0, n)
            A = rng.uniform(-1.0, 1.0, (m, n))
            b = rng.uniform(0.5, 2.0, m)
            upper = rng.uniform(0.5, 3.0, n)
            problem = LpProblem(c=c, A_ub=A, b_ub=b, upper=upper)
            solution = solve(problem)
            expected = vertex_oracle(c, A, b, upper)
            assert abs(solution.objective - expected) <= 1e-6 * max(1.0, abs(expected))
            assert check_feasible(problem, solution.x).is_feasible()


@pytest.mark.slow
class TestEnergyBalance:

    def test_week_of_random_dispatch(self):
        series = synth_profiles(7, seed=31)
        env = build_env(series)
        report = env.run_episode(RandomController(env.power_ratings, seed=31))
        frame = report.trajectory
        residual = frame['p_grid_kw'] - (frame['load_kw'] - frame['pv_kw'] + frame['p_1'] + frame['p_2'])
        assert residual.abs().max() < 1e-9

        for transition in report.transitions:
            for m, spec in enumerate(env.specs):
                state = StringState(soc=transition.state.soc[m], temperature=transition.state.tau[m])
                result = simulate_step(state, transition.info['p_set'][m], spec, env.dt)
                assert result.new_state.soc == transition.next_state.soc[m]
                conserved = (result.p_applied - result.p_loss) * env.dt
                assert abs(chemical_energy_delta(result, spec, env.dt) - conserved) < 1e-6


@pytest.mark.slow
class TestForecastOrdering:

    @pytest.mark.parametrize('seed', [41, 42, 43])
    def test_perfect_not_worse_than_persistence(self, seed):
        series = synth_profiles(7, seed=seed)
        env = build_env(series)
        perfect = rolling_run(series, 'perfect', env, env.weights, H=12)
        persist = rolling_run(series, 'persistence', env, env.weights, H=12)
        slack = 1e-4 * abs(persist.summary.savings) + 1e-6
        assert perfect.summary.savings >= persist.summary.savings - slack


@pytest.mark.slow
class TestBalancing:

    def test_unbalanced_start_converges(self):
        scenario = load_scenario('scenario-2')
        assert scenario.horizon == 96 and scenario.duration_days == 7
        report = run_scenario(scenario)
        frame = report.trajectory
        assert abs(frame['soc_1'].iloc[0] - frame['soc_2'].iloc[0]) == pytest.approx(0.4)
        assert abs(frame['tau_1'].iloc[0] - frame['tau_2'].iloc[0]) == pytest.approx(10.0)
        assert report.summary.final_delta_soc < 0.05
        assert report.summary.final_delta_tau < 1.0
        solver = report.meta['solver']
        assert solver['fallbacks'] == 0
        assert solver['solve_seconds'] < 600.0


class TestRewardReconstruction:

    def test_random_actions(self):
        series = synth_profiles(105, seed=51)
        weights = ObjectiveWeights(x=0.7, y=0.3, z=0.05)
        env = build_env(series, socs=(0.8, 0.2), taus=(30.0, 25.0), weights=weights, length=10000)
        report = env.run_episode(RandomController(env.power_ratings, seed=51))
        assert len(report.transitions) == 10000
        for transition in report.transitions:
            info = transition.info
            expected = (weights.x * (info['baseline_cost'] - info['cost'])
                        - weights.y * info['delta_soc']
                        - weights.z * info['delta_tau'])
            assert transition.reward == expected


class TestGradientOracle:

    @pytest.mark.parametrize('seed', range(20))
    def test_tiny_network(self, seed):
        rng = np.random.default_rng(seed)
        policy = MlpPolicy.create(n_inputs=2, n_actions=2, hidden=(2,), seed=seed,
                                  init_log_std=rng.uniform(-1.0, 0.0))
        policy.actor.weights[-1] *= 50.0
        states = rng.uniform(-1.0, 1.0, (5, 2))
        targets = rng.uniform(-0.9, 0.9, (5, 2))
        _, bc_grads = bc_loss(policy, states, targets)
        bc_numeric = numeric_gradients(policy, lambda: bc_loss(policy, states, targets)[0])

        mean, _ = policy.actor.forward(states)
        actions = mean + 0.3 * rng.standard_normal(mean.shape)
        old = gaussian_log_prob(actions, mean, policy.log_std) + rng.uniform(-0.4, 0.4, 5)
        batch = PpoBatch(states, actions, old, rng.normal(0.0, 1.0, 5), rng.normal(0.0, 1.0, 5))
        _, ppo_grads, _ = ppo_loss(policy, batch, clip_eps=0.2)
        ppo_numeric = numeric_gradients(policy, lambda: ppo_loss(policy, batch, clip_eps=0.2)[0])

        for analytic, numeric in zip(bc_grads + ppo_grads, bc_numeric + ppo_numeric):
            np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-7)


@pytest.mark.slow
class TestBehaviorCloning:

    def test_clone_of_week_expert_saves_money(self):
        series = synth_profiles(7, seed=61)
        env = build_env(series)
        expert, expert_report = collect_expert(series, env, env.weights, H=24)
        assert expert_report.summary.savings > 0.0
        assert len(expert) == 7

        config = TrainConfig(bc_epochs=50, seed=0)
        policy = MlpPolicy.create(hidden=config.hidden, seed=0)
        result = bc_train(policy, expert[:5], config, validation=expert[5:])
        assert result.validation_losses[-1] < result.validation_losses[0]
        assert evaluate_policy(result.policy, env, 'bc').summary.savings > 0.0


@pytest.mark.slow
class TestComparisonPipeline:

    def test_month_comparison_metrics(self, tmp_path):
        base = load_scenario('scenario-2').with_overrides(horizon=8)
        month = replace(base, duration_days=30)
        scenarios = [month.with_overrides(controller=c) for c in ('lp-perfect', 'lp-persist', 'bc')]
        comparison = compare(scenarios, out=tmp_path)
        assert list(comparison.table.columns) == ['lp-perfect', 'lp-persist', 'bc']
        for metric in ('savings', 'mean_delta_soc', 'mean_delta_tau', 'efficiency'):
            assert metric in comparison.table.index
            assert np.all(np.isfinite(comparison.table.loc[metric]))
        assert len(comparison.aligned) == 30 * 96
        assert (tmp_path / 'comparison.csv').exists()


class TestDeterminism:

    def test_identical_trajectory_files(self, tmp_path):
        scenario = load_scenario('scenario-2').with_overrides(controller='lp-perfect', horizon=8)
        one_day = replace(scenario, duration_days=1)
        run_scenario(one_day, tmp_path / 'a')
        run_scenario(one_day, tmp_path / 'b')
        assert (tmp_path / 'a' / 'trajectory.csv').read_bytes() == \
            (tmp_path / 'b' / 'trajectory.csv').read_bytes()


class TestRecedingHorizon:
    """Rolling from the model's own prediction telescopes to the single-shot optimum"""

    def _check(self, window):
        env = build_env(window, socs=(0.6, 0.4), taus=(28.0, 25.0))
        init = [StringState(soc=0.6, temperature=28.0), StringState(soc=0.4, temperature=25.0)]
        _, single = solve_single_shot(window, env.tariff, env.specs, init, env.weights)
        report = rolling_run(window, 'perfect', env, env.weights, H=len(window), anchor='model')
        rolled = float(report.trajectory['lp_first_step'].sum())
        assert single.is_optimal
        assert report.meta['solver']['fallbacks'] == 0
        assert rolled == pytest.approx(single.objective, rel=1e-6)

    def test_rolling_matches_single_shot(self):
        window = synth_profiles(1, seed=71).window(30, 46)
        assert len(window) == 16
        self._check(window)

    @pytest.mark.slow
    def test_two_day_window(self):
        window = synth_profiles(2, seed=72)
        assert len(window) == 192
        self._check(window)
