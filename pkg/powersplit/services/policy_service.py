"""
Policy Service: small actor-critic MLP with hand-written gradients

The actor maps a normalized state to the mean of a Gaussian over per-string
actions (tanh output, so the mean lies in [-1, 1]) with a state-independent
log standard deviation. The critic has the same hidden layout and a linear
scalar output.

Features:
- Batched forward / reverse-mode backward over ReLU layers
- Behavior-cloning (MSE) loss and PPO clipped-surrogate loss with gradients
- Generalized advantage estimation
- Adam optimizer and global-norm gradient clipping
- JSON checkpoints (layer shapes + row-major weights)
"""

import json
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog

from services.errors import ConfigError, TrainingError

logger = structlog.get_logger(__name__)

CHECKPOINT_FORMAT = 'powersplit-mlp-policy'
CHECKPOINT_VERSION = 1
LOG_2PI = math.log(2.0 * math.pi)


class Mlp:
    """Fully connected ReLU network; ``output`` is 'tanh' or 'linear'"""

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray],
                 output: str = 'linear'):
        if output not in ('tanh', 'linear'):
            raise ConfigError(f"Unknown output activation '{output}'")
        if len(weights) != len(biases) or not weights:
            raise ConfigError("Every layer needs weights and a bias")
        self.weights = [np.array(w, dtype=float) for w in weights]
        self.biases = [np.array(b, dtype=float).reshape(-1) for b in biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or w.shape[0] != b.size:
                raise ConfigError(f"Layer {i} shape mismatch", weights=w.shape, bias=b.shape)
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ConfigError(f"Layer {i} input does not match previous output")
        self.output = output

    @classmethod
    def initialize(cls, sizes: Sequence[int], rng: np.random.Generator,
                   output: str = 'linear', last_scale: float = 0.01) -> 'Mlp':
        weights, biases = [], []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            scale = math.sqrt(2.0 / n_in)
            if i == len(sizes) - 2:
                scale *= last_scale
            weights.append(rng.normal(0.0, scale, (n_out, n_in)))
            biases.append(np.zeros(n_out))
        return cls(weights, biases, output)

    @property
    def sizes(self) -> List[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def parameters(self) -> List[np.ndarray]:
        params = []
        for w, b in zip(self.weights, self.biases):
            params.extend([w, b])
        return params

    def forward(self, inputs: np.ndarray):
        """(N, in) -> ((N, out), cache)"""
        h = np.atleast_2d(np.asarray(inputs, dtype=float))
        activations, pre = [h], []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            pre.append(z)
            if i < last:
                h = np.maximum(z, 0.0)
            else:
                h = np.tanh(z) if self.output == 'tanh' else z
            activations.append(h)
        return h, (activations, pre)

    def backward(self, cache, grad_out: np.ndarray) -> List[np.ndarray]:
        """Gradients in ``parameters()`` order."""
        activations, pre = cache
        g = grad_out
        if self.output == 'tanh':
            g = g * (1.0 - activations[-1] ** 2)
        grads: List[np.ndarray] = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            grads[2 * i] = g.T @ activations[i]
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                g = (g @ self.weights[i]) * (pre[i - 1] > 0)
        return grads

    def copy(self) -> 'Mlp':
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.output)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'activation': 'relu',
            'output': self.output,
            'layers': [{'shape': list(w.shape), 'weights': w.reshape(-1).tolist(),
                        'bias': b.tolist()} for w, b in zip(self.weights, self.biases)],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'Mlp':
        weights = [np.array(layer['weights'], dtype=float).reshape(layer['shape'])
                   for layer in data['layers']]
        biases = [np.array(layer['bias'], dtype=float) for layer in data['layers']]
        return cls(weights, biases, data.get('output', 'linear'))


class MlpPolicy:
    """Gaussian actor (tanh mean, free log-std) plus value critic"""

    def __init__(self, actor: Mlp, critic: Mlp, log_std: np.ndarray):
        self.actor = actor
        self.critic = critic
        self.log_std = np.array(log_std, dtype=float).reshape(-1)
        if actor.sizes[-1] != self.log_std.size:
            raise ConfigError("Actor output and log_std sizes differ",
                              actor=actor.sizes[-1], log_std=self.log_std.size)
        if critic.sizes[0] != actor.sizes[0] or critic.sizes[-1] != 1:
            raise ConfigError("Critic must read the actor's input and emit one value")

    @classmethod
    def create(cls, n_inputs: int = 7, n_actions: int = 2, hidden: Sequence[int] = (64, 64),
               seed: int = 0, init_log_std: float = -1.0) -> 'MlpPolicy':
        rng = np.random.default_rng(seed)
        actor = Mlp.initialize([n_inputs, *hidden, n_actions], rng, output='tanh')
        critic = Mlp.initialize([n_inputs, *hidden, 1], rng, output='linear', last_scale=1.0)
        return cls(actor, critic, np.full(n_actions, init_log_std))

    @property
    def n_inputs(self) -> int:
        return self.actor.sizes[0]

    @property
    def n_actions(self) -> int:
        return self.actor.sizes[-1]

    def parameters(self) -> List[np.ndarray]:
        """Actor layers, then log_std, then critic layers"""
        return self.actor.parameters() + [self.log_std] + self.critic.parameters()

    def n_actor_params(self) -> int:
        return len(self.actor.parameters())

    def value(self, observations: np.ndarray) -> np.ndarray:
        values, _ = self.critic.forward(observations)
        return values[:, 0]

    def act(self, observation: np.ndarray, rng: np.random.Generator):
        """Sample an action; returns (action, log_prob, value)."""
        mean, log_std = forward(self, observation)
        action = mean + np.exp(log_std) * rng.standard_normal(mean.size)
        log_prob = float(gaussian_log_prob(action[None, :], mean[None, :], log_std)[0])
        return action, log_prob, float(self.value(observation[None, :])[0])

    def copy(self) -> 'MlpPolicy':
        return MlpPolicy(self.actor.copy(), self.critic.copy(), self.log_std.copy())

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.parameters())


def forward(policy: MlpPolicy, state) -> Tuple[np.ndarray, np.ndarray]:
    """Mean action in [-1, 1] and log-std for one normalized state."""
    state = np.asarray(state, dtype=float).reshape(-1)
    if state.size != policy.n_inputs:
        raise ConfigError(f"State has {state.size} entries, policy expects {policy.n_inputs}",
                          received=state.size, expected=policy.n_inputs)
    mean, _ = policy.actor.forward(state[None, :])
    return mean[0], policy.log_std.copy()


def gaussian_log_prob(actions: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    z = (actions - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=1)


def _zeros_like(policy: MlpPolicy) -> List[np.ndarray]:
    return [np.zeros_like(p) for p in policy.parameters()]


def _check_finite(loss: float, grads: List[np.ndarray], **context):
    if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
        raise TrainingError("Non-finite loss or gradient", loss=loss, **context)


def bc_loss(policy: MlpPolicy, states: np.ndarray,
            actions: np.ndarray) -> Tuple[float, List[np.ndarray]]:
    """Mean squared error between the policy mean and expert actions."""
    states = np.atleast_2d(states)
    actions = np.atleast_2d(actions)
    mean, cache = policy.actor.forward(states)
    diff = mean - actions
    loss = float(np.mean(diff * diff))
    grads = _zeros_like(policy)
    actor_grads = policy.actor.backward(cache, 2.0 * diff / diff.size)
    grads[:len(actor_grads)] = actor_grads
    return loss, grads


@dataclass
class PpoBatch:
    observations: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def subset(self, index: np.ndarray) -> 'PpoBatch':
        return PpoBatch(self.observations[index], self.actions[index], self.log_probs[index],
                        self.advantages[index], self.returns[index])

    def __len__(self) -> int:
        return self.observations.shape[0]


def ppo_loss(policy: MlpPolicy, batch: PpoBatch, clip_eps: float, value_coef: float = 0.5,
             entropy_coef: float = 0.0) -> Tuple[float, List[np.ndarray], Dict[str, float]]:
    """Clipped surrogate (negated) + value loss − entropy bonus, with gradients."""
    n = len(batch)
    mean, actor_cache = policy.actor.forward(batch.observations)
    log_std = policy.log_std
    inv_var = np.exp(-2.0 * log_std)
    diff = batch.actions - mean
    log_prob = gaussian_log_prob(batch.actions, mean, log_std)

    ratio = np.exp(log_prob - batch.log_probs)
    adv = batch.advantages
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    surrogate = float(np.mean(np.minimum(unclipped, clipped)))
    # d surrogate / d log_prob per sample; zero where the clipped branch is active
    g_logp = np.where(unclipped <= clipped, unclipped, 0.0) / n

    entropy = float(np.sum(log_std + 0.5 * (LOG_2PI + 1.0)))
    values, critic_cache = policy.critic.forward(batch.observations)
    v_err = values[:, 0] - batch.returns
    value_loss = float(np.mean(v_err * v_err))
    loss = -surrogate + value_coef * value_loss - entropy_coef * entropy

    grads = _zeros_like(policy)
    k = policy.n_actor_params()
    grad_mean = -g_logp[:, None] * diff * inv_var
    grads[:k] = policy.actor.backward(actor_cache, grad_mean)
    grads[k] = -np.sum(g_logp[:, None] * (diff * diff * inv_var - 1.0), axis=0) - entropy_coef
    grads[k + 1:] = policy.critic.backward(critic_cache, (2.0 * value_coef / n) * v_err[:, None])

    stats = {
        'loss': loss,
        'policy_loss': -surrogate,
        'value_loss': value_loss,
        'entropy': entropy,
        'approx_kl': float(np.mean(batch.log_probs - log_prob)),
        'clip_fraction': float(np.mean(np.abs(ratio - 1.0) > clip_eps)),
    }
    _check_finite(loss, grads, **{key: stats[key] for key in ('policy_loss', 'value_loss')})
    return loss, grads, stats


def compute_gae(rewards, values, dones, last_value: float = 0.0, gamma: float = 0.99,
                lam: float = 0.95) -> Tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and value targets."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    advantages = np.zeros_like(rewards)
    gae = 0.0
    for t in range(rewards.size - 1, -1, -1):
        next_value = last_value if t == rewards.size - 1 else values[t + 1]
        nonterminal = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        gae = delta + gamma * lam * nonterminal * gae
        advantages[t] = gae
    return advantages, advantages + values


def clip_grad_norm(grads: List[np.ndarray], max_norm: float) -> float:
    """Scale gradients in place to a global norm of at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


class Adam:
    """Adam over a fixed list of parameter arrays, updated in place"""

    def __init__(self, params: List[np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ConfigError("Learning rate must be > 0", lr=lr)
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: List[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class Trajectory:
    """One episode of (normalized state, action in policy space, reward)"""
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: Optional[np.ndarray] = None
    log_probs: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None

    def __post_init__(self):
        self.observations = np.atleast_2d(np.asarray(self.observations, dtype=float))
        self.actions = np.atleast_2d(np.asarray(self.actions, dtype=float))
        self.rewards = np.asarray(self.rewards, dtype=float).reshape(-1)
        n = self.observations.shape[0]
        if n == 0:
            raise ConfigError("Trajectory is empty")
        if self.actions.shape[0] != n or self.rewards.size != n:
            raise ConfigError("Trajectory fields differ in length", observations=n,
                              actions=self.actions.shape[0], rewards=self.rewards.size)
        if self.dones is None:
            self.dones = np.zeros(n, dtype=bool)
            self.dones[-1] = True

    def __len__(self) -> int:
        return self.observations.shape[0]


def concatenate(trajectories: Sequence[Trajectory]) -> Trajectory:
    if not trajectories:
        raise ConfigError("No trajectories to concatenate")

    def _stack(name):
        parts = [getattr(t, name) for t in trajectories]
        return None if any(p is None for p in parts) else np.concatenate(parts)

    return Trajectory(
        observations=np.vstack([t.observations for t in trajectories]),
        actions=np.vstack([t.actions for t in trajectories]),
        rewards=np.concatenate([t.rewards for t in trajectories]),
        dones=_stack('dones'),
        log_probs=_stack('log_probs'),
        values=_stack('values'),
        advantages=_stack('advantages'),
        returns=_stack('returns'),
    )


def policy_to_dict(policy: MlpPolicy, metadata: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    return {
        'format': CHECKPOINT_FORMAT,
        'version': CHECKPOINT_VERSION,
        'n_inputs': policy.n_inputs,
        'n_actions': policy.n_actions,
        'actor': policy.actor.to_dict(),
        'critic': policy.critic.to_dict(),
        'log_std': policy.log_std.tolist(),
        'metadata': metadata or {},
    }


def policy_from_dict(data: Dict[str, Any]) -> MlpPolicy:
    if data.get('format') != CHECKPOINT_FORMAT:
        raise ConfigError("Not a policy checkpoint", format=data.get('format'))
    if data.get('version') != CHECKPOINT_VERSION:
        raise ConfigError("Unsupported checkpoint version", version=data.get('version'))
    return MlpPolicy(Mlp.from_dict(data['actor']), Mlp.from_dict(data['critic']),
                     np.array(data['log_std'], dtype=float))


def save_checkpoint(policy: MlpPolicy, path, metadata: Optional[Dict[str, Any]] = None) -> None:
    from services.export_service import atomic_write_text

    atomic_write_text(path, json.dumps(policy_to_dict(policy, metadata), indent=2, sort_keys=True))
    logger.info('checkpoint_saved', path=str(path), sizes=policy.actor.sizes)


def load_checkpoint(path) -> MlpPolicy:
    try:
        with open(path, 'r', encoding='utf-8') as handle:
            data = json.load(handle)
    except FileNotFoundError:
        raise ConfigError(f"Checkpoint not found: {path}", path=str(path)) from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"Checkpoint is not valid JSON: {exc}", path=str(path)) from None
    policy = policy_from_dict(data)
    logger.info('checkpoint_loaded', path=str(path), sizes=policy.actor.sizes)
    return policy
