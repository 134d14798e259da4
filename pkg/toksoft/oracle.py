"""Brute-force ground truth over enumerable tabular instances.

Action-level soft backups enumerate every action of a `TabularEnv`; the
token-level side builds the same quantities from per-token backups. The
identity checks compare the two and return residuals for the caller to judge.
All sweeps are synchronous: a new table is computed from the old one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from .core import NonConvergence, ToksoftError, TokenSeq, seeded_rng
from .policy_q import Context, PolicyTable, QTable, ReferencePolicy, action_prob
from .soft_bellman import kl_divergence, optimal_soft_policy_row, soft_state_value
from .token_env import TabularEnv, TabularEnvSpec

logger = logging.getLogger(__name__)


@dataclass
class ActionLevelQ:
    """Q(s, a) for every state id and every enumerated action index."""

    table: np.ndarray

    def __post_init__(self) -> None:
        self.table = np.asarray(self.table, dtype=np.float64)
        if not np.all(np.isfinite(self.table)):
            raise ToksoftError("action-level Q holds non-finite values")

    @classmethod
    def zeros(cls, env: TabularEnv) -> "ActionLevelQ":
        return cls(np.zeros((env.spec.n_states, env.spec.n_actions)))


@dataclass
class SoftSolution:
    q: ActionLevelQ
    policy: np.ndarray
    values: np.ndarray
    deltas: List[float] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.deltas)


def action_distribution(policy, env: TabularEnv) -> np.ndarray:
    """π(a|s) for every state id and enumerated action, from the token policy."""
    actions = env.enumerate_actions()
    out = np.empty((env.spec.n_states, len(actions)))
    for s in range(env.spec.n_states):
        state = env.state_seq(s)
        out[s] = [action_prob(policy, state, a) for a in actions]
    return out


def token_policy_from_actions(pi: np.ndarray, env: TabularEnv) -> PolicyTable:
    """Factor an action distribution into per-token conditionals.

    π(w | s, p) = Σ_{a ⊒ p·w} π(a|s) / Σ_{a ⊒ p} π(a|s), so the product along
    any action gives back pi[s, a]. Prefixes with no mass read as the reference.
    """
    policy = PolicyTable(env.vocab.size, env.reference_probs)
    actions = env.enumerate_actions()
    for s in range(env.spec.n_states):
        state = env.state_seq(s)
        for depth in range(env.max_action_len):
            for p in _prefixes(actions, depth):
                row = np.zeros(env.vocab.size)
                for idx, a in enumerate(actions):
                    if a[:depth] == p:
                        row[a[depth]] += pi[s, idx]
                if row.sum() > 0:
                    policy.set_row(Context(state, p), row / row.sum())
    return policy


def reference_action_distribution(env: TabularEnv) -> np.ndarray:
    reference = ReferencePolicy(env.vocab.size, env.reference_probs)
    return action_distribution(reference, env)


def action_soft_values(q: ActionLevelQ, pi: np.ndarray, ref: np.ndarray, beta: float) -> np.ndarray:
    """V(s) = E_{a~π}[Q(s, a)] − β·KL[π||π̄](s), KL taken over enumerated actions."""
    return np.array([
        float(np.dot(pi[s], q.table[s])) - beta * kl_divergence(pi[s], ref[s])
        for s in range(q.table.shape[0])
    ])


def _bootstrap(env: TabularEnv, values: np.ndarray) -> np.ndarray:
    live = np.array([0.0 if env.is_terminal(s) else 1.0 for s in range(env.spec.n_states)])
    return (values * live)[env.spec.transition_table]


def action_soft_backup(q: ActionLevelQ, pi: np.ndarray, ref: np.ndarray, env: TabularEnv,
                       beta: float, gamma: float) -> ActionLevelQ:
    """Q(s, a) ← r(s, a) + γ·(E_{a'~π}[Q(s', a')] − β·KL[π||π̄](s')), one Jacobi sweep."""
    env.enumerate_actions()
    values = action_soft_values(q, pi, ref, beta)
    return ActionLevelQ(env.spec.reward_table + gamma * _bootstrap(env, values))


def soft_value_iteration(env: TabularEnv, ref: np.ndarray, beta: float, gamma: float,
                         tol: float = 1e-12, max_iter: int = 100_000) -> SoftSolution:
    """Alternate the closed-form policy π* ∝ π̄·exp(Q/β) with soft backups to a fixed point.

    Raises:
        NonConvergence: when the sup-norm change is still >= tol after `max_iter` sweeps.
    """
    env.enumerate_actions()
    q = ActionLevelQ.zeros(env)
    deltas: List[float] = []
    for _ in range(max_iter):
        pi = optimal_soft_policy_row(ref, q.table, beta)
        new_q = action_soft_backup(q, pi, ref, env, beta, gamma)
        delta = float(np.max(np.abs(new_q.table - q.table)))
        deltas.append(delta)
        q = new_q
        if delta < tol:
            pi = optimal_soft_policy_row(ref, q.table, beta)
            logger.debug("soft value iteration converged after %d sweeps", len(deltas))
            return SoftSolution(q, pi, action_soft_values(q, pi, ref, beta), deltas)
    raise NonConvergence(
        f"soft value iteration did not reach tol={tol} in {max_iter} sweeps (last delta {deltas[-1]:.3e})"
    )


# ---------------------------------------------------------------------------
# Token-level side
# ---------------------------------------------------------------------------


def _prefixes(actions: Sequence[TokenSeq], depth: int) -> List[TokenSeq]:
    return sorted({a[:depth] for a in actions if len(a) > depth})


def set_leaf_values(q_tok: QTable, env: TabularEnv, q_act: ActionLevelQ) -> None:
    """Write Q(s, a[:-1], a[-1]) = q_act(s, a) for every state and action."""
    for s in range(env.spec.n_states):
        state = env.state_seq(s)
        for idx, a in enumerate(env.enumerate_actions()):
            q_tok.set(Context(state, a[:-1]), a[-1], float(q_act.table[s, idx]))


def within_action_backup(q_tok: QTable, policy, reference, env: TabularEnv, state: TokenSeq,
                         beta: float, within_discount: float = 1.0) -> None:
    """Fill Q(s, w^{1:j-1}, w^j) = d·(E_{w~π}[Q(s, w^{1:j}, w)] − β·KL(s, w^{1:j})) from j = M−1 down to 1."""
    actions = env.enumerate_actions()
    for depth in range(env.max_action_len - 1, 0, -1):
        for p in _prefixes(actions, depth):
            value = soft_state_value(policy, reference, q_tok, Context(state, p), beta)
            q_tok.set(Context(state, p[:-1]), p[-1], within_discount * value)


def first_token_value(q_tok: QTable, policy, reference, state: TokenSeq, beta: float) -> float:
    return soft_state_value(policy, reference, q_tok, Context(state), beta)


def first_token_values(q_tok: QTable, policy, reference, env: TabularEnv, beta: float) -> np.ndarray:
    return np.array([
        first_token_value(q_tok, policy, reference, env.state_seq(s), beta)
        for s in range(env.spec.n_states)
    ])


def token_q_from_action_q(q_act: ActionLevelQ, policy, reference, env: TabularEnv, beta: float,
                          within_discount: float = 1.0) -> QTable:
    q_tok = QTable(env.vocab.size)
    set_leaf_values(q_tok, env, q_act)
    for s in range(env.spec.n_states):
        within_action_backup(q_tok, policy, reference, env, env.state_seq(s), beta, within_discount)
    return q_tok


def leaf_action_q(q_tok: QTable, env: TabularEnv) -> ActionLevelQ:
    """Read the last-token Q-values back as an action-level table."""
    actions = env.enumerate_actions()
    table = np.empty((env.spec.n_states, len(actions)))
    for s in range(env.spec.n_states):
        state = env.state_seq(s)
        for idx, a in enumerate(actions):
            table[s, idx] = q_tok.q_value(Context(state, a[:-1]), a[-1])
    return ActionLevelQ(table)


def token_soft_backup(q_tok: QTable, policy, reference, env: TabularEnv, beta: float, gamma: float,
                      within_discount: float = 1.0) -> QTable:
    """Per-token soft Bellman backup through whole actions of every state.

    The last token gets r(s, a) + γ·(first-token soft value at s'), zero at
    terminal s'; earlier tokens are filled by `within_action_backup`.
    """
    actions = env.enumerate_actions()
    v_next = first_token_values(q_tok, policy, reference, env, beta)
    boot = _bootstrap(env, v_next)
    new_q = QTable(env.vocab.size)
    for s in range(env.spec.n_states):
        state = env.state_seq(s)
        for idx, a in enumerate(actions):
            value = env.spec.reward_table[s, idx] + gamma * boot[s, idx]
            new_q.set(Context(state, a[:-1]), a[-1], float(value))
        within_action_backup(new_q, policy, reference, env, state, beta, within_discount)
    return new_q


def check_within_action_identity(q_tok: QTable, policy, reference, env: TabularEnv, state: TokenSeq,
                                 beta: float, within_discount: float = 1.0) -> float:
    """|first-token soft value − (E_{a~π}[Q(s, a)] − β·KL(a|s))| at `state`.

    `q_tok` needs its last-token entries set; the within-action backups are run
    here on a copy, so the caller's table is left unchanged. KL(a|s) is summed
    over enumerated actions, independently of the token-level chain rule.
    """
    actions = env.enumerate_actions()
    work = QTable(q_tok.size)
    leaf = np.empty(len(actions))
    for idx, a in enumerate(actions):
        leaf[idx] = q_tok.q_value(Context(state, a[:-1]), a[-1])
        work.set(Context(state, a[:-1]), a[-1], leaf[idx])
    within_action_backup(work, policy, reference, env, state, beta, within_discount)
    lhs = first_token_value(work, policy, reference, state, beta)
    pi = np.array([action_prob(policy, state, a) for a in actions])
    ref = np.array([action_prob(reference, state, a) for a in actions])
    rhs = float(np.dot(pi, leaf)) - beta * kl_divergence(pi, ref)
    return abs(lhs - rhs)


def check_cross_action_identity(token_q: QTable, action_q: ActionLevelQ, env: TabularEnv,
                                policy, reference, beta: float) -> float:
    """Max over states of the gap between token-composed and action-level backups.

    Compares E_{a~π}[Q(s, a)] of both and the first-token soft value against
    the action-level soft value.
    """
    pi = action_distribution(policy, env)
    ref = action_distribution(reference, env)
    composed = leaf_action_q(token_q, env)
    v_tok = first_token_values(token_q, policy, reference, env, beta)
    v_act = action_soft_values(action_q, pi, ref, beta)
    gap_q = np.abs(np.sum(pi * composed.table, axis=1) - np.sum(pi * action_q.table, axis=1))
    gap_v = np.abs(v_tok - v_act)
    return float(max(gap_q.max(), gap_v.max()))


# ---------------------------------------------------------------------------
# Random instances and the identity suite
# ---------------------------------------------------------------------------


@dataclass
class Instance:
    spec: TabularEnvSpec
    env: TabularEnv
    policy: PolicyTable
    reference: ReferencePolicy
    q_act: ActionLevelQ


def random_policy(env: TabularEnv, rng: np.random.Generator) -> PolicyTable:
    """Tabular policy with a Dirichlet(1) row at every reachable context."""
    policy = PolicyTable(env.vocab.size, env.reference_probs)
    actions = env.enumerate_actions()
    for s in range(env.spec.n_states):
        state = env.state_seq(s)
        for depth in range(env.max_action_len):
            for p in _prefixes(actions, depth):
                policy.set_row(Context(state, p), rng.dirichlet(np.ones(env.vocab.size)))
    return policy


def random_instance(rng: np.random.Generator, max_states: int = 5, max_vocab: int = 3,
                    max_action_len: int = 3, q_low: float = -1.0, q_high: float = 1.0) -> Instance:
    spec = TabularEnvSpec.random(
        spec_seed=int(rng.integers(0, 2**31)),
        n_states=int(rng.integers(1, max_states + 1)),
        vocab_size=int(rng.integers(2, max_vocab + 1)),
        action_len=int(rng.integers(1, max_action_len + 1)),
    )
    env = TabularEnv(spec)
    policy = random_policy(env, rng)
    reference = ReferencePolicy(env.vocab.size, env.reference_probs)
    q_act = ActionLevelQ(rng.uniform(q_low, q_high, size=(spec.n_states, spec.n_actions)))
    return Instance(spec, env, policy, reference, q_act)


def run_identity_suite(
    n_instances: int = 100,
    seed: int = 0,
    betas: Sequence[float] = (0.1, 1.0, 10.0),
    gamma: float = 0.9,
    tol: float = 1e-9,
    disc_gamma: float = 0.99,
    witness_margin: float = 1e-3,
    failure_dir: Optional[Union[str, Path]] = None,
) -> Dict[str, Any]:
    """Check both consistency identities on random instances.

    The discounted-within-action variant is run alongside and must break the
    within-action identity by more than `witness_margin` on every instance with
    actions of two or more tokens.

    Returns:
        dict: status, max residuals, the smallest witness residual and the
        paths of any failing specs written to `failure_dir`.
    """
    rng = seeded_rng(seed)
    max_within = max_cross = 0.0
    min_witness = float("inf")
    failures: List[str] = []
    for i in range(n_instances):
        inst = random_instance(rng)
        env = inst.env
        failed = False
        for beta in betas:
            q_tok = token_q_from_action_q(inst.q_act, inst.policy, inst.reference, env, beta)
            for s in range(inst.spec.n_states):
                r = check_within_action_identity(q_tok, inst.policy, inst.reference, env, env.state_seq(s), beta)
                max_within = max(max_within, r)
                failed |= r >= tol
            token_next = token_soft_backup(q_tok, inst.policy, inst.reference, env, beta, gamma)
            pi = action_distribution(inst.policy, env)
            ref = action_distribution(inst.reference, env)
            action_next = action_soft_backup(inst.q_act, pi, ref, env, beta, gamma)
            r = check_cross_action_identity(token_next, action_next, env, inst.policy, inst.reference, beta)
            max_cross = max(max_cross, r)
            failed |= r >= tol
        if inst.spec.action_len >= 2:
            # shifted leaf values keep the inner soft values well away from zero
            witness_q = ActionLevelQ(inst.q_act.table + 3.0)
            q_tok = token_q_from_action_q(witness_q, inst.policy, inst.reference, env, 0.1)
            r = check_within_action_identity(q_tok, inst.policy, inst.reference, env, env.state_seq(0),
                                             0.1, within_discount=disc_gamma)
            min_witness = min(min_witness, r)
            failed |= r <= witness_margin
        if failed:
            logger.warning("instance %d (spec_seed=%d) failed the identity checks", i, inst.spec.spec_seed)
            if failure_dir is not None:
                path = Path(failure_dir) / f"failing_spec_{i}_{inst.spec.spec_seed}.txt"
                path.parent.mkdir(parents=True, exist_ok=True)
                inst.spec.save(path)
                failures.append(str(path))
            else:
                failures.append(f"instance {i} (spec_seed={inst.spec.spec_seed})")
    result = {
        "status": "success" if not failures else "error",
        "instances": n_instances,
        "max_within_residual": max_within,
        "max_cross_residual": max_cross,
        "max_residual": max(max_within, max_cross),
        "min_disc_witness_residual": min_witness,
        "failures": failures,
    }
    if failures:
        result["error_message"] = f"{len(failures)} of {n_instances} instances failed the identity checks"
    return result
