"""Training state, replay buffer and environment interaction shared by the sub-agents."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Deque, List, Optional, Tuple, Union

import numpy as np

from .core import EmptyBatch, RunConfig, TokenSeq, ToksoftError, Transition
from .metrics import MetricsLog
from .policy_q import Context, ParametricPolicy, PolicyTable, QFunction, ReferencePolicy, sample_action
from .soft_bellman import kl_term
from .token_env import TokenEnv

logger = logging.getLogger(__name__)


class ReplayBuffer:
    """Bounded FIFO of transitions; the oldest entry is evicted first."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ToksoftError(f"buffer capacity must be positive, got {capacity}")
        self.capacity = capacity
        self._items: Deque[Tuple[int, Transition]] = deque(maxlen=capacity)
        self.last_sample_age = float("nan")

    def __len__(self) -> int:
        return len(self._items)

    def add(self, transition: Transition, env_step: int) -> None:
        self._items.append((env_step, transition))

    def transitions(self) -> List[Transition]:
        return [t for _, t in self._items]

    def entry_steps(self) -> List[int]:
        """Env step at which each held transition was added, oldest first."""
        return [step for step, _ in self._items]

    def sample(self, batch_size: int, rng: np.random.Generator, now: Optional[int] = None) -> List[Transition]:
        """Uniform draw without replacement within the batch."""
        if not self._items:
            raise EmptyBatch("cannot sample from an empty buffer")
        n = min(batch_size, len(self._items))
        picked = rng.choice(len(self._items), size=n, replace=False)
        items = [self._items[int(i)] for i in picked]
        if now is not None:
            self.last_sample_age = float(np.mean([now - step for step, _ in items]))
        return [t for _, t in items]


@dataclass
class TrainState:
    """Everything one training job owns.

    `reference` is never written; `q_target` only moves through polyak_update.
    """

    cfg: RunConfig
    env: TokenEnv
    policy: Union[PolicyTable, ParametricPolicy]
    reference: ReferencePolicy
    buffer: ReplayBuffer
    rng: np.random.Generator
    q_online: Optional[QFunction] = None
    q_target: Optional[QFunction] = None
    baseline: Any = None
    metrics: MetricsLog = field(default_factory=MetricsLog)
    env_steps: int = 0
    obs: Optional[TokenSeq] = None
    episode_len: int = 0
    recent_rewards: Deque[float] = field(default_factory=deque)

    def __post_init__(self) -> None:
        self.recent_rewards = deque(self.recent_rewards, maxlen=self.cfg.batch_size)


def step_once(state: TrainState) -> Transition:
    """Sample one action from the current policy, step the env and log a metrics row."""
    env = state.env
    if state.obs is None:
        state.obs = env.reset()
        state.episode_len = 0
    obs = state.obs
    action = sample_action(state.policy, obs, state.rng, env.max_action_len, env.vocab.eos_id)
    next_state, reward, done = env.step(action)
    transition = Transition(obs, action, reward, next_state, done)
    state.env_steps += 1
    state.episode_len += 1
    state.recent_rewards.append(reward)
    state.metrics.record(
        state.env_steps,
        reward,
        float(np.mean(state.recent_rewards)),
        kl_to_ref=kl_term(state.policy, state.reference, Context(obs)),
    )
    if done:
        state.metrics.episode_lengths.append(state.episode_len)
        state.obs = None
    else:
        state.obs = next_state
    return transition


def collect(state: TrainState, n_steps: int) -> TrainState:
    """Run `n_steps` env interactions into the replay buffer, resetting on done."""
    if n_steps < 1:
        raise ToksoftError(f"n_steps must be >= 1, got {n_steps}")
    for _ in range(n_steps):
        state.buffer.add(step_once(state), state.env_steps)
    return state


def action_kl(policy, reference, state: TokenSeq, action: TokenSeq) -> float:
    """Chain-rule KL along the prefixes of one sampled action."""
    return sum(kl_term(policy, reference, Context(state, tuple(action[:j]))) for j in range(len(action)))


def entropy_regularized_return_estimate(policy, reference, env: TokenEnv, beta: float, gamma: float,
                                        n_episodes: int, rng: np.random.Generator) -> float:
    """Monte-Carlo mean of Σ_t γ^t (r_t − β·KL_action(s_t)) over `n_episodes` rollouts."""
    if n_episodes < 1:
        raise ToksoftError(f"n_episodes must be >= 1, got {n_episodes}")
    total = 0.0
    for _ in range(n_episodes):
        obs = env.reset()
        discount = 1.0
        ret = 0.0
        while True:
            action = sample_action(policy, obs, rng, env.max_action_len, env.vocab.eos_id)
            kl = action_kl(policy, reference, obs, action) if beta else 0.0
            obs, reward, done = env.step(action)
            ret += discount * (reward - beta * kl)
            discount *= gamma
            if done:
                break
        total += ret
    return total / n_episodes
