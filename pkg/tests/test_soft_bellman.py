import numpy as np
import pytest

from toksoft.core import IndexOutOfRange, RunConfig, SupportViolation, Transition, seeded_rng
from toksoft.policy_q import Context, PolicyTable, QTable, ReferencePolicy, softmax
from toksoft.soft_bellman import (
    TargetCase,
    greedy_token,
    kl_divergence,
    optimal_soft_policy,
    optimal_soft_policy_row,
    per_token_target,
    policy_kl_grad_logits,
    policy_kl_objective,
    soft_state_value,
    soft_value_from_rows,
    soft_value_of_optimum,
)


def uniform(size):
    return lambda state, prefix: np.full(size, 1.0 / size)


def test_kl_one_hot_against_uniform():
    assert kl_divergence([1.0, 0.0, 0.0, 0.0], [0.25] * 4) == pytest.approx(1.3862944, abs=1e-7)


def test_kl_support_violation():
    with pytest.raises(SupportViolation):
        kl_divergence([0.5, 0.5], [1.0, 0.0])


def test_kl_is_nonnegative():
    rng = seeded_rng(0)
    for _ in range(1000):
        n = int(rng.integers(2, 6))
        assert kl_divergence(rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))) >= 0.0


def test_soft_state_value_two_tokens():
    assert soft_value_from_rows(np.array([0.8, 0.2]), np.array([0.5, 0.5]), np.array([0.0, 1.0]), 1.0) == \
        pytest.approx(0.007255, abs=1e-6)
    policy = PolicyTable(2, uniform(2))
    ctx = Context((0,))
    policy.set_row(ctx, [0.8, 0.2])
    q = QTable(2)
    q.set(ctx, 1, 1.0)
    assert soft_state_value(policy, ReferencePolicy(2, uniform(2)), q, ctx, 1.0) == pytest.approx(0.007255, abs=1e-6)


def test_optimal_soft_policy_two_tokens():
    np.testing.assert_allclose(
        optimal_soft_policy_row(np.array([0.5, 0.5]), np.array([0.0, 1.0]), 1.0),
        [0.268941, 0.731059],
        atol=1e-6,
    )


def test_policy_kl_objective_uniform_policy():
    ref = ReferencePolicy(2, uniform(2))
    q = QTable(2)
    ctx = Context((0,))
    q.set(ctx, 1, 1.0)
    assert policy_kl_objective(ref, ref, q, ctx, 1.0) == pytest.approx(0.120115, abs=1e-6)
    np.testing.assert_allclose(optimal_soft_policy(ref, q, ctx, 1.0), [0.268941, 0.731059], atol=1e-6)


def test_tilting_invariance():
    rng = seeded_rng(1)
    for _ in range(1000):
        n = int(rng.integers(2, 6))
        ref = rng.dirichlet(np.ones(n))
        q = rng.uniform(-5, 5, size=n)
        beta = float(rng.choice([0.1, 1.0, 10.0]))
        shift = float(rng.uniform(-10, 10))
        np.testing.assert_allclose(
            optimal_soft_policy_row(ref, q + shift, beta), optimal_soft_policy_row(ref, q, beta), rtol=0, atol=1e-12
        )


def test_large_beta_recovers_reference():
    rng = seeded_rng(2)
    for _ in range(1000):
        n = int(rng.integers(2, 6))
        ref = rng.dirichlet(np.ones(n))
        q = rng.uniform(-1, 1, size=n)
        assert np.max(np.abs(optimal_soft_policy_row(ref, q, 1e6) - ref)) < 1e-5


def test_extreme_q_stays_finite():
    row = optimal_soft_policy_row(np.array([0.5, 0.5]), np.array([0.0, 1e4]), 1e-3)
    assert np.all(np.isfinite(row))
    assert row[1] == pytest.approx(1.0)


def test_optimum_attains_log_mean_exp():
    rng = seeded_rng(3)
    for _ in range(100):
        ref = rng.dirichlet(np.ones(4))
        q = rng.uniform(-2, 2, size=4)
        beta = float(rng.uniform(0.1, 5))
        star = optimal_soft_policy_row(ref, q, beta)
        assert soft_value_from_rows(star, ref, q, beta) == pytest.approx(soft_value_of_optimum(ref, q, beta))
        other = rng.dirichlet(np.ones(4))
        assert soft_value_from_rows(other, ref, q, beta) <= soft_value_of_optimum(ref, q, beta) + 1e-12


def test_greedy_token_small_beta():
    assert greedy_token(np.full(4, 0.25), np.array([0.0, 0.5, 0.2, 1.0]), 1e-6) == 3


def test_policy_kl_grad_matches_finite_differences():
    rng = seeded_rng(4)
    h = 1e-5
    for _ in range(50):
        z = rng.normal(size=(1, 4))
        target = rng.dirichlet(np.ones(4))[None, :]
        _, grad = policy_kl_grad_logits(softmax(z), target)
        numeric = np.zeros(4)
        for k in range(4):
            dz = np.zeros((1, 4))
            dz[0, k] = h
            numeric[k] = (kl_divergence(softmax(z + dz)[0], target[0]) - kl_divergence(softmax(z - dz)[0], target[0])) / (2 * h)
        np.testing.assert_allclose(grad[0], numeric, rtol=1e-4, atol=1e-8)


@pytest.fixture
def two_token_setup():
    size = 2
    policy = PolicyTable(size, uniform(size))
    reference = ReferencePolicy(size, uniform(size))
    q = QTable(size)
    return policy, reference, q


def test_terminal_boundary_target_is_reward(two_token_setup):
    policy, reference, q = two_token_setup
    t = Transition((0,), (1,), 0.8, (1,), True)
    target = per_token_target(t, 1, policy, reference, q, RunConfig())
    assert target.target_value == 0.8
    assert target.case is TargetCase.ACTION_BOUNDARY
    assert target.ctx == Context((0,)) and target.token == 1


def test_boundary_target_bootstraps_next_state(two_token_setup):
    policy, reference, q = two_token_setup
    q.set(Context((1,)), 0, 2.0)
    cfg = RunConfig(gamma=0.5, beta=1.0)
    t = Transition((0,), (1,), 0.25, (1,), False)
    # π = π̄ uniform: soft value at (1,) is 1.0
    assert per_token_target(t, 1, policy, reference, q, cfg).target_value == pytest.approx(0.25 + 0.5 * 1.0)


def test_within_action_target_has_no_reward_or_discount(two_token_setup):
    policy, reference, q = two_token_setup
    policy.set_row(Context((0,), (1,)), [0.8, 0.2])
    q.set(Context((0,), (1,)), 1, 1.0)
    cfg = RunConfig(gamma=0.5)
    t = Transition((0,), (1, 0), 5.0, (1,), True)
    target = per_token_target(t, 1, policy, reference, q, cfg)
    assert target.case is TargetCase.WITHIN_ACTION
    assert target.target_value == pytest.approx(0.007255, abs=1e-6)
    discounted = per_token_target(t, 1, policy, reference, q, cfg, within_discount=0.5)
    assert discounted.target_value == pytest.approx(0.5 * target.target_value)


@pytest.mark.parametrize("j", [0, 3])
def test_token_index_out_of_range(two_token_setup, j):
    policy, reference, q = two_token_setup
    t = Transition((0,), (1, 0), 0.0, (1,), True)
    with pytest.raises(IndexOutOfRange):
        per_token_target(t, j, policy, reference, q, RunConfig())
