"""
Training Service: expert demonstrations, behavior cloning and PPO fine-tuning

The pipeline runs three phases on a training range of the dataset:

1. expert  - rolling-horizon LP with perfect foresight, recorded as
             (normalized state, action in [-1, 1]) pairs
2. clone   - supervised regression of the policy mean onto expert actions
3. refine  - clipped-surrogate policy-gradient updates on 1-day episodes
             sampled from the training range

After cloning and after each refinement iteration the deterministic policy
is evaluated on the held-out validation range; the best instance is kept.
"""

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog

from services.dispatch_service import LpParams, ObjectiveWeights, rolling_run
from services.errors import ConfigError, TrainingError
from services.metrics_service import summary_statistics
from services.policy_service import (
    Adam, MlpPolicy, PpoBatch, Trajectory, bc_loss, clip_grad_norm, compute_gae,
    concatenate, forward, ppo_loss,
)

logger = structlog.get_logger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    bc_learning_rate: float = 1e-3
    ppo_learning_rate: float = 3e-4
    batch_size: int = 64
    bc_epochs: int = 50
    ppo_iterations: int = 10
    ppo_epochs: int = 4
    rollout_episodes: int = 4
    clip_eps: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    init_log_std: float = -1.0
    hidden: Tuple[int, ...] = (64, 64)
    validation_days: int = 7
    expert_days: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'hidden', tuple(int(h) for h in self.hidden))
        errors = {}
        if self.bc_learning_rate <= 0 or self.ppo_learning_rate <= 0:
            errors['learning_rate'] = (self.bc_learning_rate, self.ppo_learning_rate)
        if not 0 < self.clip_eps < 1:
            errors['clip_eps'] = self.clip_eps
        if not 0 < self.gamma <= 1:
            errors['gamma'] = self.gamma
        if not 0 <= self.gae_lambda <= 1:
            errors['gae_lambda'] = self.gae_lambda
        if self.batch_size < 1:
            errors['batch_size'] = self.batch_size
        if min(self.bc_epochs, self.ppo_iterations, self.ppo_epochs) < 0:
            errors['epochs'] = (self.bc_epochs, self.ppo_iterations, self.ppo_epochs)
        if self.rollout_episodes < 1:
            errors['rollout_episodes'] = self.rollout_episodes
        if self.validation_days < 1:
            errors['validation_days'] = self.validation_days
        if self.expert_days is not None and self.expert_days < 1:
            errors['expert_days'] = self.expert_days
        if not self.hidden or min(self.hidden) < 1:
            errors['hidden'] = self.hidden
        if errors:
            raise ConfigError("Invalid training configuration", **errors)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['hidden'] = list(self.hidden)
        return data


class PolicyController:
    """Deterministic (mean-action) policy driving an environment"""

    def __init__(self, policy: MlpPolicy, env, name: str = 'policy'):
        self.policy = policy
        self.env = env
        self.name = name

    def __call__(self, state, t: int) -> np.ndarray:
        mean, _ = forward(self.policy, self.env.observe(state))
        return self.env.to_power(mean)


def evaluate_policy(policy: MlpPolicy, env, name: str = 'policy'):
    return env.run_episode(PolicyController(policy, env, name))


def _split_episodes(env, report) -> List[Trajectory]:
    spd = env.steps_per_day
    observations, actions, rewards = [], [], []
    for tr in report.transitions:
        observations.append(env.observe(tr.state))
        actions.append(np.clip(env.to_unit(tr.info['p_set']), -1.0, 1.0))
        rewards.append(tr.reward)
    trajectories = []
    for start in range(0, len(observations), spd):
        stop = min(start + spd, len(observations))
        trajectories.append(Trajectory(observations[start:stop], actions[start:stop],
                                       rewards[start:stop]))
    return trajectories


def collect_expert(dataset, env, weights: ObjectiveWeights, H: int,
                   lp: Optional[LpParams] = None) -> Tuple[List[Trajectory], Any]:
    """LP-perfect demonstrations over ``env``'s range, one trajectory per day.

    Returns the trajectories and the expert's report.
    """
    report = rolling_run(dataset, 'perfect', env, weights, H, lp=lp)
    trajectories = _split_episodes(env, report)
    logger.info('expert_collected', episodes=len(trajectories),
                steps=sum(len(t) for t in trajectories), savings=report.summary.savings)
    return trajectories, report


@dataclass
class BcResult:
    policy: MlpPolicy
    losses: List[float]
    validation_losses: List[float] = field(default_factory=list)


def bc_train(policy: MlpPolicy, expert: Sequence[Trajectory], config: TrainConfig,
             validation: Optional[Sequence[Trajectory]] = None) -> BcResult:
    """Minibatch Adam on the MSE between policy mean and expert action.

    ``losses[e]`` is the full-data loss after epoch ``e``.
    """
    if not expert:
        raise ConfigError("Behavior cloning needs at least one expert trajectory")
    data = concatenate(expert)
    X, Y = data.observations, data.actions
    val = concatenate(validation) if validation else None
    if X.shape[1] != policy.n_inputs or Y.shape[1] != policy.n_actions:
        raise ConfigError("Expert data does not match policy dimensions",
                          states=X.shape[1], actions=Y.shape[1],
                          n_inputs=policy.n_inputs, n_actions=policy.n_actions)

    rng = np.random.default_rng(config.seed)
    actor_params = policy.actor.parameters()
    optimizer = Adam(actor_params, lr=config.bc_learning_rate)
    n = X.shape[0]
    losses, val_losses = [], []
    for epoch in range(config.bc_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            index = order[start:start + config.batch_size]
            loss, grads = bc_loss(policy, X[index], Y[index])
            grads = grads[:len(actor_params)]
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingError("Behavior cloning diverged", epoch=epoch, loss=loss)
            optimizer.step(grads)

        epoch_loss, _ = bc_loss(policy, X, Y)
        if not np.isfinite(epoch_loss):
            raise TrainingError("Behavior cloning diverged", epoch=epoch, loss=epoch_loss)
        losses.append(epoch_loss)
        if val is not None:
            val_losses.append(bc_loss(policy, val.observations, val.actions)[0])
        logger.debug('bc_epoch', epoch=epoch, loss=epoch_loss)

    logger.info('bc_trained', epochs=config.bc_epochs, samples=n,
                final_loss=losses[-1] if losses else None)
    return BcResult(policy=policy, losses=losses, validation_losses=val_losses)


def collect_rollouts(policy: MlpPolicy, env, starts: Sequence[int], length: int,
                     config: TrainConfig, rng: np.random.Generator) -> List[Trajectory]:
    """Stochastic episodes of ``length`` steps beginning at each start index."""
    trajectories = []
    for start in starts:
        episode = env.window(int(start), length)
        state = episode.reset()
        obs, actions, log_probs, values, rewards = [], [], [], [], []
        while not episode.done:
            o = episode.observe(state)
            action, log_prob, value = policy.act(o, rng)
            transition = episode.step(episode.to_power(action))
            obs.append(o)
            actions.append(action)
            log_probs.append(log_prob)
            values.append(value)
            rewards.append(transition.reward)
            state = transition.next_state
        trajectory = Trajectory(obs, actions, rewards, log_probs=np.array(log_probs),
                                values=np.array(values))
        trajectory.advantages, trajectory.returns = compute_gae(
            trajectory.rewards, trajectory.values, trajectory.dones,
            gamma=config.gamma, lam=config.gae_lambda)
        trajectories.append(trajectory)
    return trajectories


def ppo_update(policy: MlpPolicy, rollouts: Sequence[Trajectory], config: TrainConfig,
               optimizer: Adam, rng: np.random.Generator) -> Dict[str, float]:
    """One epoch of minibatch clipped-surrogate updates; returns mean statistics."""
    data = concatenate(rollouts)
    if data.advantages is None or data.log_probs is None:
        raise ConfigError("Rollouts lack log-probabilities or advantages")
    adv = data.advantages
    adv = (adv - adv.mean()) / (adv.std() + 1e-8) if adv.size > 1 else adv
    batch = PpoBatch(data.observations, data.actions, data.log_probs, adv, data.returns)

    totals: Dict[str, float] = {}
    n_batches = 0
    order = rng.permutation(len(batch))
    for start in range(0, len(batch), config.batch_size):
        minibatch = batch.subset(order[start:start + config.batch_size])
        _, grads, stats = ppo_loss(policy, minibatch, config.clip_eps,
                                   config.value_coef, config.entropy_coef)
        stats['grad_norm'] = clip_grad_norm(grads, config.max_grad_norm)
        optimizer.step(grads)
        for key, value in stats.items():
            totals[key] = totals.get(key, 0.0) + value
        n_batches += 1
    if not policy.is_finite():
        raise TrainingError("Policy parameters became non-finite", **totals)
    return {key: value / n_batches for key, value in totals.items()}


@dataclass
class TrainingResult:
    policy: MlpPolicy
    bc_policy: MlpPolicy
    report: Dict[str, Any]


def train_pipeline(dataset, env, config: TrainConfig, H: int = 96,
                   lp: Optional[LpParams] = None,
                   expert: Optional[Sequence[Trajectory]] = None) -> TrainingResult:
    """Expert -> behavior cloning -> PPO; keeps the best policy on validation savings."""
    spd = env.steps_per_day
    days = env.length // spd
    train_days = days - config.validation_days
    if train_days < 7:
        raise ConfigError(
            f"Training needs {config.validation_days + 7} days of data, got {days}",
            days=days, validation_days=config.validation_days)
    expert_days = min(config.expert_days or train_days, train_days)
    log = logger.bind(seed=config.seed)

    expert_savings = None
    if expert is None:
        expert_env = env.window(env.start, expert_days * spd)
        expert, expert_report = collect_expert(dataset, expert_env, env.weights, H, lp)
        expert_savings = expert_report.summary.savings

    policy = MlpPolicy.create(n_inputs=3 + 2 * env.n_strings, n_actions=env.n_strings,
                              hidden=config.hidden, seed=config.seed,
                              init_log_std=config.init_log_std)
    bc = bc_train(policy, expert, config)
    bc_policy = policy.copy()

    val_env = env.window(env.start + train_days * spd, config.validation_days * spd)
    best_savings = evaluate_policy(policy, val_env, 'bc').summary.savings
    best_policy, best_iteration = policy.copy(), 0
    bc_savings = best_savings
    log.info('bc_validated', validation_savings=bc_savings)

    rng = np.random.default_rng(config.seed + 1)
    optimizer = Adam(policy.parameters(), lr=config.ppo_learning_rate)
    iterations = []
    for iteration in range(1, config.ppo_iterations + 1):
        day_starts = env.start + spd * rng.integers(0, train_days, config.rollout_episodes)
        rollouts = collect_rollouts(policy, env, day_starts, spd, config, rng)
        stats = {}
        for _ in range(config.ppo_epochs):
            stats = ppo_update(policy, rollouts, config, optimizer, rng)
        savings = evaluate_policy(policy, val_env, 'ppo').summary.savings
        stats.update(iteration=iteration, validation_savings=savings,
                     rollout_reward=float(np.mean([t.rewards.sum() for t in rollouts])))
        iterations.append(stats)
        log.info('ppo_iteration', iteration=iteration, validation_savings=savings,
                 approx_kl=stats.get('approx_kl'))
        if savings > best_savings:
            best_savings, best_policy, best_iteration = savings, policy.copy(), iteration

    report = {
        'seed': config.seed,
        'config': config.to_dict(),
        'horizon': H,
        'train_days': train_days,
        'validation_days': config.validation_days,
        'expert_days': expert_days,
        'expert_savings': expert_savings,
        'bc_losses': bc.losses,
        'bc_validation_savings': bc_savings,
        'iterations': iterations,
        'best_iteration': best_iteration,
        'best_validation_savings': best_savings,
    }
    log.info('training_finished', best_iteration=best_iteration,
             best_validation_savings=best_savings)
    return TrainingResult(policy=best_policy, bc_policy=bc_policy, report=report)


@dataclass
class SeedSweepResult:
    policy: MlpPolicy
    best_seed: int
    reports: List[Dict[str, Any]]
    statistics: Dict[str, float]


def seed_sweep(dataset, env, config: TrainConfig, n_seeds: int, H: int = 96,
               lp: Optional[LpParams] = None) -> SeedSweepResult:
    """Repeat the pipeline for seeds ``seed .. seed + n_seeds - 1`` and keep the best."""
    if n_seeds < 1:
        raise ConfigError("Seed sweep needs at least one seed", n_seeds=n_seeds)
    spd = env.steps_per_day
    train_days = env.length // spd - config.validation_days
    expert_days = min(config.expert_days or train_days, max(train_days, 1))
    expert, _ = collect_expert(dataset, env.window(env.start, expert_days * spd),
                               env.weights, H, lp)

    results = []
    for offset in range(n_seeds):
        seeded = TrainConfig(**{**asdict(config), 'seed': config.seed + offset})
        results.append(train_pipeline(dataset, env, seeded, H, lp, expert=expert))

    scores = [r.report['best_validation_savings'] for r in results]
    best = int(np.argmax(scores))
    statistics = summary_statistics(scores)
    logger.info('seed_sweep_finished', seeds=n_seeds, best_seed=config.seed + best, **statistics)
    return SeedSweepResult(policy=results[best].policy, best_seed=config.seed + best,
                           reports=[r.report for r in results], statistics=statistics)
