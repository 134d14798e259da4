"""KL terms, soft state values, per-token soft Bellman targets and the
closed-form optimal soft policy π*_Q ∝ π̄·exp(Q/β).

Expectations over the next token are exact sums over the vocabulary.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .core import IndexOutOfRange, RunConfig, SupportViolation, ToksoftError, Transition
from .policy_q import Context, Policy, QFunction

# exponents are clamped after max-subtraction; e^-60 is far below double resolution of 1
EXP_CLAMP = 60.0


class TargetCase(str, enum.Enum):
    WITHIN_ACTION = "within_action"
    ACTION_BOUNDARY = "action_boundary"


@dataclass(frozen=True)
class TokenTarget:
    ctx: Context
    token: int
    target_value: float
    case: TargetCase


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Σ p·log(p/q) over a discrete support.

    Raises:
        SupportViolation: when p > 0 somewhere q = 0.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    support = p > 0
    if np.any(q[support] <= 0):
        raise SupportViolation("p puts mass where the reference has none")
    value = float(np.sum(p[support] * (np.log(p[support]) - np.log(q[support]))))
    return max(value, 0.0)


def kl_divergence_batch(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise KL for (batch, |V|) arrays."""
    support = p > 0
    if np.any(support & (q <= 0)):
        raise SupportViolation("p puts mass where the reference has none")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(support, p * (np.log(np.where(support, p, 1.0)) - np.log(np.where(support, q, 1.0))), 0.0)
    return np.maximum(terms.sum(axis=-1), 0.0)


def kl_term(policy: Policy, reference: Policy, ctx: Context) -> float:
    """D_KL[π(·|ctx) || π̄(·|ctx)]."""
    return kl_divergence(policy.probs(ctx), reference.probs(ctx))


def soft_value_from_rows(pi: np.ndarray, ref: np.ndarray, q: np.ndarray, beta: float) -> float:
    return float(np.dot(pi, q)) - beta * kl_divergence(pi, ref)


def soft_state_value(policy: Policy, reference: Policy, q_target: QFunction, ctx: Context, beta: float) -> float:
    """E_{w~π}[Q(ctx, w)] − β·KL[π||π̄](ctx), summed exactly over the vocabulary."""
    return soft_value_from_rows(policy.probs(ctx), reference.probs(ctx), q_target.q_values(ctx), beta)


def soft_state_values(policy: Policy, reference: Policy, q_target: QFunction, ctxs, beta: float) -> np.ndarray:
    """Batched soft_state_value."""
    if not ctxs:
        return np.zeros(0)
    pi = policy.probs_batch(ctxs)
    ref = reference.probs_batch(ctxs)
    q = q_target.q_values_batch(ctxs)
    return np.sum(pi * q, axis=-1) - beta * kl_divergence_batch(pi, ref)


def per_token_target(
    transition: Transition,
    j: int,
    policy: Policy,
    reference: Policy,
    q_target: QFunction,
    cfg: RunConfig,
    within_discount: float = 1.0,
) -> TokenTarget:
    """Soft Bellman target for token j (1-based) of `transition.action`.

    Inside an action the target is the soft value of the next prefix, with no
    reward and no discount (unless `within_discount` is set, which only the
    discounted ablation does). At the last token the reward enters and the
    soft value of the next state's first token is discounted by γ; a finished
    episode bootstraps nothing.
    """
    action = transition.action
    if not 1 <= j <= len(action):
        raise IndexOutOfRange(f"token index {j} outside [1, {len(action)}]")
    ctx = Context(transition.state, tuple(action[: j - 1]))
    token = action[j - 1]
    if j < len(action):
        value = soft_state_value(policy, reference, q_target, ctx.extend(token), cfg.beta)
        return TokenTarget(ctx, token, within_discount * value, TargetCase.WITHIN_ACTION)
    value = transition.reward
    if not transition.done:
        value += cfg.gamma * soft_state_value(policy, reference, q_target, Context(transition.next_state), cfg.beta)
    return TokenTarget(ctx, token, value, TargetCase.ACTION_BOUNDARY)


def tilted_log_weights(ref: np.ndarray, q: np.ndarray, beta: float) -> np.ndarray:
    """log π̄ + Q/β with the exponent shifted to max 0 and clamped below at -EXP_CLAMP."""
    if not beta > 0:
        raise ToksoftError(f"beta must be > 0, got {beta}")
    with np.errstate(divide="ignore"):
        z = np.log(ref) + np.asarray(q, dtype=np.float64) / beta
    z = z - np.max(z, axis=-1, keepdims=True)
    return np.where(np.isneginf(z), z, np.maximum(z, -EXP_CLAMP))


def optimal_soft_policy_row(ref: np.ndarray, q: np.ndarray, beta: float) -> np.ndarray:
    w = np.exp(tilted_log_weights(ref, q, beta))
    return w / w.sum(axis=-1, keepdims=True)


def optimal_soft_policy(reference: Policy, q: QFunction, ctx: Context, beta: float) -> np.ndarray:
    """π*_Q(·|ctx) ∝ π̄(·|ctx)·exp(Q(ctx, ·)/β)."""
    return optimal_soft_policy_row(reference.probs(ctx), q.q_values(ctx), beta)


def policy_kl_objective(policy: Policy, reference: Policy, q: QFunction, ctx: Context, beta: float) -> float:
    """J_Q(π) = D_KL[π(·|ctx) || π*_Q(·|ctx)]."""
    return kl_divergence(policy.probs(ctx), optimal_soft_policy(reference, q, ctx, beta))


def policy_kl_grad_logits(pi: np.ndarray, target: np.ndarray) -> tuple:
    """KL(π||target) per row and its gradient w.r.t. the logits of π.

    d/dz_k KL = π_k·(log(π_k/target_k) − KL).
    """
    kl = kl_divergence_batch(pi, target)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_ratio = np.where(pi > 0, np.log(np.where(pi > 0, pi, 1.0)) - np.log(target), 0.0)
    return kl, pi * (log_ratio - kl[:, None])


def soft_value_of_optimum(ref: np.ndarray, q: np.ndarray, beta: float) -> float:
    """β·log E_{w~π̄}[exp(Q/β)], the soft value reached by π*_Q."""
    z = np.log(ref) + q / beta
    m = np.max(z)
    return float(beta * (m + np.log(np.sum(np.exp(z - m)))))


def greedy_token(ref: np.ndarray, q: np.ndarray, beta: float) -> int:
    """Token π*_Q concentrates on as β → 0 (argmax of β·log π̄ + Q)."""
    return int(np.argmax(beta * np.log(ref) + q))
