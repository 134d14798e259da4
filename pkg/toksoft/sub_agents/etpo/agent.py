"""ETPO: per-token soft Q-learning with a closed-form (tabular) or
gradient (parametric) policy update toward π*_Q, a Polyak target network
and a replay buffer.

The discounted ablation passes `within_discount=γ`, which scales every
within-action target; plain ETPO keeps it at 1.
"""

from __future__ import annotations

import logging
from typing import List, Sequence, Tuple

import numpy as np

from ...core import EmptyBatch, NonConvergence, Transition
from ...policy_q import Context, QTable, polyak_update
from ...rollout import TrainState
from ...soft_bellman import (
    kl_divergence,
    optimal_soft_policy,
    optimal_soft_policy_row,
    per_token_target,
    policy_kl_grad_logits,
    soft_state_values,
)
from ...token_env import TabularEnv

logger = logging.getLogger(__name__)


def etpo_update(state: TrainState, batch: Sequence[Transition], within_discount: float = 1.0) -> Tuple[float, float, TrainState]:
    """One ETPO update on `batch`.

    Every token of every transition gets its per-token soft Bellman target
    (target Q inside the expectations, current policy). Tabular mode assigns
    the targets and then sets π(·|ctx) = π*_Q at each touched context;
    parametric mode takes one SGD step on the squared error and one on
    KL(π‖π*_Q). The target Q is Polyak-averaged afterwards.

    Returns:
        tuple: (q_loss, policy_objective, state), losses measured before the update.
    """
    if not batch:
        raise EmptyBatch("etpo_update needs at least one transition")
    if isinstance(state.q_online, QTable):
        q_loss, policy_objective = _tabular_update(state, batch, within_discount)
    else:
        q_loss, policy_objective = _parametric_update(state, batch, within_discount)
    polyak_update(state.q_target, state.q_online, state.cfg.polyak)
    logger.debug("etpo update: q_loss=%.6g policy_kl=%.6g", q_loss, policy_objective)
    return q_loss, policy_objective, state


def _tabular_update(state: TrainState, batch: Sequence[Transition], within_discount: float) -> Tuple[float, float]:
    cfg = state.cfg
    targets = [
        per_token_target(t, j, state.policy, state.reference, state.q_target, cfg, within_discount)
        for t in batch
        for j in range(1, len(t.action) + 1)
    ]
    q = state.q_online
    q_loss = float(np.mean([(q.q_value(tt.ctx, tt.token) - tt.target_value) ** 2 for tt in targets]))
    for tt in targets:
        q.set(tt.ctx, tt.token, tt.target_value)

    objectives = []
    for ctx in dict.fromkeys(tt.ctx for tt in targets):
        pi_star = optimal_soft_policy(state.reference, q, ctx, cfg.beta)
        objectives.append(kl_divergence(state.policy.probs(ctx), pi_star))
        state.policy.set_row(ctx, pi_star)
    return q_loss, float(np.mean(objectives))


def _token_items(batch: Sequence[Transition]) -> Tuple[List[Context], List[int], List[Transition], List[int]]:
    ctxs, tokens, owners, positions = [], [], [], []
    for t in batch:
        for j in range(1, len(t.action) + 1):
            ctxs.append(Context(t.state, tuple(t.action[: j - 1])))
            tokens.append(t.action[j - 1])
            owners.append(t)
            positions.append(j)
    return ctxs, tokens, owners, positions


def _parametric_update(state: TrainState, batch: Sequence[Transition], within_discount: float) -> Tuple[float, float]:
    cfg = state.cfg
    ctxs, tokens, owners, positions = _token_items(batch)
    n = len(ctxs)

    # where each target bootstraps from: next prefix, or next state's first token
    boot_ctxs, boot_rows, scale = [], [], np.zeros(n)
    targets = np.zeros(n)
    for i, (ctx, tok, t, j) in enumerate(zip(ctxs, tokens, owners, positions)):
        if j < len(t.action):
            boot_ctxs.append(ctx.extend(tok))
            boot_rows.append(i)
            scale[i] = within_discount
        else:
            targets[i] = t.reward
            if not t.done:
                boot_ctxs.append(Context(t.next_state))
                boot_rows.append(i)
                scale[i] = cfg.gamma
    if boot_ctxs:
        values = soft_state_values(state.policy, state.reference, state.q_target, boot_ctxs, cfg.beta)
        targets[boot_rows] += scale[boot_rows] * values

    q_net = state.q_online.net
    q_all = q_net.forward(state.q_online.encoder.encode_batch(ctxs))
    rows = np.arange(n)
    diff = q_all[rows, tokens] - targets
    q_loss = float(np.mean(diff ** 2))
    dout = np.zeros_like(q_all)
    dout[rows, tokens] = 2.0 * diff / n
    q_net.sgd_step(q_net.backward(dout), cfg.lr)

    pi = state.policy.probs_batch(ctxs)
    pi_star = optimal_soft_policy_row(state.reference.probs_batch(ctxs), state.q_online.q_values_batch(ctxs), cfg.beta)
    kl, dlogits = policy_kl_grad_logits(pi, pi_star)
    state.policy.apply_logit_grads(ctxs, dlogits / n, cfg.lr)
    return q_loss, float(np.mean(kl))


def enumerated_transitions(env: TabularEnv) -> List[Transition]:
    """One transition per (non-terminal state, action), read from the spec tables.

    `done` marks entry into a terminal state only; the step limit plays no part.
    """
    out = []
    for s in range(env.spec.n_states):
        if env.is_terminal(s):
            continue
        for idx, action in enumerate(env.enumerate_actions()):
            nxt = int(env.spec.transition_table[s, idx])
            out.append(Transition(env.state_seq(s), action, float(env.spec.reward_table[s, idx]),
                                  env.state_seq(nxt), env.is_terminal(nxt)))
    return out


def exact_sweep(state: TrainState, env: TabularEnv, within_discount: float = 1.0,
                tol: float = 1e-11, max_sweeps: int = 20_000) -> int:
    """Repeat tabular etpo_update over every enumerated transition until Q stops moving.

    Returns:
        int: number of sweeps taken.

    Raises:
        NonConvergence: when the sup-norm change is still >= tol after `max_sweeps`.
    """
    batch = enumerated_transitions(env)
    q = state.q_online
    delta = float("inf")
    for sweep in range(1, max_sweeps + 1):
        before = q.as_array()
        etpo_update(state, batch, within_discount)
        after = q.as_array()
        delta = float(np.max(np.abs(after[: len(before)] - before))) if len(before) else float("inf")
        if len(after) != len(before):
            delta = float("inf")
        if delta < tol:
            logger.debug("exact sweep converged after %d sweeps", sweep)
            return sweep
    raise NonConvergence(f"exact sweep still moving by {delta:.3e} after {max_sweeps} sweeps")
