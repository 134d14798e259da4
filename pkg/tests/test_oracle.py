import numpy as np
import pytest

from toksoft.core import ToksoftError, seeded_rng
from toksoft.oracle import (
    ActionLevelQ,
    action_distribution,
    action_soft_backup,
    check_cross_action_identity,
    check_within_action_identity,
    random_instance,
    reference_action_distribution,
    run_identity_suite,
    soft_value_iteration,
    token_policy_from_actions,
    token_q_from_action_q,
    token_soft_backup,
)
from toksoft.policy_q import ReferencePolicy, action_prob
from toksoft.token_env import TabularEnv, TabularEnvSpec

BANDIT_REWARDS = [0.0, 0.5, 0.2, 1.0]
BANDIT_V = float(np.log(np.mean(np.exp(BANDIT_REWARDS))))


@pytest.fixture
def bandit():
    return TabularEnv(TabularEnvSpec.bandit(BANDIT_REWARDS))


def test_one_backup_on_bandit_gives_rewards(bandit):
    ref = reference_action_distribution(bandit)
    q = action_soft_backup(ActionLevelQ.zeros(bandit), ref, ref, bandit, beta=1.0, gamma=0.99)
    np.testing.assert_allclose(q.table[0], BANDIT_REWARDS)


def test_soft_value_iteration_bandit(bandit):
    ref = reference_action_distribution(bandit)
    solution = soft_value_iteration(bandit, ref, beta=1.0, gamma=0.99)
    assert solution.values[0] == pytest.approx(BANDIT_V, abs=1e-6)
    assert BANDIT_V == pytest.approx(0.499013, abs=1e-5)
    assert solution.values[0] == pytest.approx(np.log(np.mean(np.exp(BANDIT_REWARDS))), abs=1e-12)


def test_soft_value_iteration_small_beta(bandit):
    ref = reference_action_distribution(bandit)
    solution = soft_value_iteration(bandit, ref, beta=1e-6, gamma=0.99)
    assert solution.values[0] == pytest.approx(1.0, abs=1e-5)
    assert int(np.argmax(solution.policy[0])) == 3
    assert bandit.enumerate_actions()[3] == (1, 1)


def test_soft_value_iteration_large_beta(bandit):
    ref = reference_action_distribution(bandit)
    solution = soft_value_iteration(bandit, ref, beta=1e6, gamma=0.99)
    np.testing.assert_allclose(solution.policy[0], ref[0], atol=1e-6)


def test_soft_value_iteration_records_deltas():
    env = TabularEnv(TabularEnvSpec.random(2, n_states=4, vocab_size=2, action_len=2))
    solution = soft_value_iteration(env, reference_action_distribution(env), beta=1.0, gamma=0.9)
    assert solution.iterations == len(solution.deltas)
    assert solution.deltas[-1] < 1e-12


@pytest.mark.parametrize("beta", [0.1, 1.0, 10.0])
def test_identities_on_random_instances(beta):
    rng = seeded_rng(5)
    for _ in range(10):
        inst = random_instance(rng)
        env = inst.env
        q_tok = token_q_from_action_q(inst.q_act, inst.policy, inst.reference, env, beta)
        for s in range(inst.spec.n_states):
            r = check_within_action_identity(q_tok, inst.policy, inst.reference, env, env.state_seq(s), beta)
            assert r < 1e-9
        token_next = token_soft_backup(q_tok, inst.policy, inst.reference, env, beta, 0.9)
        pi = action_distribution(inst.policy, env)
        ref = action_distribution(inst.reference, env)
        action_next = action_soft_backup(inst.q_act, pi, ref, env, beta, 0.9)
        assert check_cross_action_identity(token_next, action_next, env, inst.policy, inst.reference, beta) < 1e-9


def test_within_identity_leaves_table_alone():
    inst = random_instance(seeded_rng(6))
    q_tok = token_q_from_action_q(inst.q_act, inst.policy, inst.reference, inst.env, 1.0)
    before = q_tok.as_array()
    check_within_action_identity(q_tok, inst.policy, inst.reference, inst.env, inst.env.state_seq(0), 1.0)
    np.testing.assert_array_equal(q_tok.as_array(), before)


def test_discounted_within_action_breaks_identity():
    spec = TabularEnvSpec.random(8, n_states=3, vocab_size=2, action_len=2)
    env = TabularEnv(spec)
    q_act = ActionLevelQ(np.full((spec.n_states, spec.n_actions), 2.0) + spec.reward_table)
    ref = ReferencePolicy(env.vocab.size, env.reference_probs)
    q_tok = token_q_from_action_q(q_act, ref, ref, env, 0.1)
    assert check_within_action_identity(q_tok, ref, ref, env, env.state_seq(0), 0.1) < 1e-9
    assert check_within_action_identity(q_tok, ref, ref, env, env.state_seq(0), 0.1, within_discount=0.99) > 1e-3


def test_token_policy_from_actions_reproduces_action_probs(bandit):
    rng = seeded_rng(9)
    pi = rng.dirichlet(np.ones(4), size=2)
    policy = token_policy_from_actions(pi, bandit)
    for idx, a in enumerate(bandit.enumerate_actions()):
        assert action_prob(policy, bandit.state_seq(0), a) == pytest.approx(pi[0, idx])


def test_identity_suite_passes():
    result = run_identity_suite(n_instances=100, seed=7)
    assert result["status"] == "success"
    assert result["max_residual"] < 1e-9
    assert result["min_disc_witness_residual"] > 1e-3
    assert result["failures"] == []


def test_identity_suite_writes_failing_specs(tmp_path):
    # a zero tolerance fails every instance
    result = run_identity_suite(n_instances=2, seed=1, tol=0.0, failure_dir=tmp_path)
    assert result["status"] == "error"
    assert len(result["failures"]) == 2
    for path in result["failures"]:
        TabularEnvSpec.load(path)


def test_action_level_q_rejects_non_finite():
    with pytest.raises(ToksoftError):
        ActionLevelQ(np.array([[np.nan]]))
