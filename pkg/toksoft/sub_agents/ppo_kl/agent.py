"""Action-level PPO with the KL penalty folded into the reward.

Each action earns r − β·log(π(a|s)/π̄(a|s)); discounted returns minus a learned
state-value baseline give one advantage per action, and that same advantage
multiplies the clipped-ratio gradient of every token in the action. Rollouts
are on-policy, so this trainer never reads the replay buffer.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from ...core import EmptyBatch, Mode, RunConfig, TokenSeq, Transition
from ...policy_q import (
    Context,
    ContextEncoder,
    ParametricNet,
    ParametricQ,
    QFunction,
    QTable,
    action_log_prob,
)
from ...rollout import TrainState, step_once
from ...token_env import TokenEnv

logger = logging.getLogger(__name__)

Episode = List[Transition]


def make_baseline(cfg: RunConfig, env: TokenEnv, rng: np.random.Generator) -> QFunction:
    """State-value baseline V(s), stored as a one-column Q-function at Context(s)."""
    if cfg.mode is Mode.TABULAR:
        return QTable(1)
    encoder = ContextEncoder(env.state_vocab.size, env.vocab.size, env.max_state_len, 0)
    return ParametricQ(ParametricNet(encoder.dim, cfg.hidden, 1, rng), encoder)


def shaped_reward(reward: float, log_pi: float, log_ref: float, beta: float) -> float:
    """r − β·log(π(a|s)/π̄(a|s)); exactly r when β is 0."""
    if beta == 0:
        return reward
    return reward - beta * (log_pi - log_ref)


def discounted_returns(rewards: Sequence[float], gamma: float) -> np.ndarray:
    out = np.zeros(len(rewards))
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        running = rewards[t] + gamma * running
        out[t] = running
    return out


def clipped_surrogate(ratio: np.ndarray, advantage: np.ndarray, eps: float) -> Tuple[np.ndarray, np.ndarray]:
    """min(ρ·A, clip(ρ, 1−ε, 1+ε)·A) and its derivative in ρ.

    The derivative is A where the unclipped term is the minimum and 0 where
    the clipped one is.
    """
    ratio = np.asarray(ratio, dtype=np.float64)
    advantage = np.asarray(advantage, dtype=np.float64)
    unclipped = ratio * advantage
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * advantage
    obj = np.minimum(unclipped, clipped)
    grad = np.where(unclipped <= clipped, advantage, 0.0)
    return obj, grad


def rollout_episodes(state: TrainState, n_episodes: int, budget: int) -> List[Episode]:
    """Play up to `n_episodes` fresh episodes without passing `budget` env steps.

    The last episode is cut short when the budget runs out.
    """
    episodes: List[Episode] = []
    for _ in range(n_episodes):
        if state.env_steps >= budget:
            break
        state.obs = None
        episode: Episode = []
        while state.env_steps < budget:
            t = step_once(state)
            episode.append(t)
            if t.done:
                break
        episodes.append(episode)
    return episodes


@dataclass
class _Batch:
    states: List[TokenSeq]
    ctxs: List[Context]
    tokens: np.ndarray
    owner: np.ndarray
    returns: np.ndarray
    old_probs: np.ndarray


def _flatten(state: TrainState, episodes: Sequence[Episode]) -> _Batch:
    cfg = state.cfg
    states: List[TokenSeq] = []
    returns: List[float] = []
    ctxs: List[Context] = []
    tokens: List[int] = []
    owner: List[int] = []
    for episode in episodes:
        shaped = [
            shaped_reward(t.reward,
                          action_log_prob(state.policy, t.state, t.action),
                          action_log_prob(state.reference, t.state, t.action),
                          cfg.beta)
            for t in episode
        ]
        returns.extend(discounted_returns(shaped, cfg.gamma))
        for t in episode:
            for j, w in enumerate(t.action):
                ctxs.append(Context(t.state, tuple(t.action[:j])))
                tokens.append(w)
                owner.append(len(states))
            states.append(t.state)
    tokens_arr = np.asarray(tokens, dtype=np.int64)
    old = state.policy.probs_batch(ctxs)[np.arange(len(ctxs)), tokens_arr] if ctxs else np.zeros(0)
    return _Batch(states, ctxs, tokens_arr, np.asarray(owner, dtype=np.int64), np.asarray(returns), old)


def _values(baseline: QFunction, states: Sequence[TokenSeq]) -> np.ndarray:
    return baseline.q_values_batch([Context(s) for s in states])[:, 0]


def _fit_baseline(baseline: QFunction, states: Sequence[TokenSeq], returns: np.ndarray,
                  lr: float, coef: float) -> float:
    """One gradient step on coef·mean((V(s) − G)²); returns the pre-step loss."""
    ctxs = [Context(s) for s in states]
    n = len(ctxs)
    if isinstance(baseline, QTable):
        v = _values(baseline, states)
        diff = v - returns
        grads: dict = {}
        for ctx, g in zip(ctxs, 2.0 * coef * diff / n):
            grads[ctx] = grads.get(ctx, 0.0) + g
        for ctx, g in grads.items():
            baseline.set(ctx, 0, baseline.q_value(ctx, 0) - lr * g)
        return float(coef * np.mean(diff ** 2))
    net = baseline.net
    v = net.forward(baseline.encoder.encode_batch(ctxs))[:, 0]
    diff = v - returns
    net.sgd_step(net.backward((2.0 * coef * diff / n)[:, None]), lr)
    return float(coef * np.mean(diff ** 2))


def ppo_kl_update(state: TrainState, episodes: Sequence[Episode]) -> Tuple[float, float, TrainState]:
    """`ppo_epochs` clipped policy-gradient and baseline steps on complete episodes.

    Returns:
        tuple: (policy_loss, value_loss, state), both measured in the first epoch
        before any parameter moves.
    """
    episodes = [e for e in episodes if e]
    if not episodes:
        raise EmptyBatch("ppo_kl_update needs at least one non-empty episode")
    cfg = state.cfg
    batch = _flatten(state, episodes)
    advantages = batch.returns - _values(state.baseline, batch.states)
    token_adv = advantages[batch.owner]
    n = len(batch.ctxs)
    rows = np.arange(n)

    policy_loss = value_loss = float("nan")
    for epoch in range(cfg.ppo_epochs):
        pi = state.policy.probs_batch(batch.ctxs)
        ratio = pi[rows, batch.tokens] / batch.old_probs
        obj, dobj = clipped_surrogate(ratio, token_adv, cfg.clip_eps)
        # d ratio / d logits = ratio·(onehot − π)
        onehot = np.zeros_like(pi)
        onehot[rows, batch.tokens] = 1.0
        dlogits = -(dobj * ratio)[:, None] * (onehot - pi) / n
        state.policy.apply_logit_grads(batch.ctxs, dlogits, cfg.lr)
        v_loss = _fit_baseline(state.baseline, batch.states, batch.returns, cfg.lr, cfg.value_coef)
        if epoch == 0:
            policy_loss, value_loss = float(-np.mean(obj)), v_loss
    logger.debug("ppo-kl update on %d actions: policy_loss=%.6g value_loss=%.6g",
                 len(batch.states), policy_loss, value_loss)
    return policy_loss, value_loss, state
