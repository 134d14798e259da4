import math

import numpy as np
import pytest

from toksoft.core import (
    ActionTooLong,
    Algo,
    ConfigError,
    EnvKind,
    IndexOutOfRange,
    InvalidAction,
    Mode,
    RunConfig,
    ToksoftError,
    Transition,
    UnknownSymbol,
    Vocabulary,
    check_action,
    decode,
    encode,
    seeded_rng,
)


@pytest.fixture
def vocab():
    return Vocabulary(("a", "b", "c", "<eos>"), eos_id=3)


def test_encode_decode(vocab):
    ids = encode(vocab, ["b", "a", "<eos>"])
    assert ids == (1, 0, 3)
    assert decode(vocab, ids) == ["b", "a", "<eos>"]


def test_unknown_symbol(vocab):
    with pytest.raises(UnknownSymbol):
        encode(vocab, ["a", "z"])


def test_duplicate_symbols_rejected():
    with pytest.raises(ConfigError):
        Vocabulary(("a", "a"))


def test_extended_keeps_ids(vocab):
    bigger = vocab.extended(("GOAL",))
    assert bigger.size == 5
    assert bigger.id_of("c") == vocab.id_of("c")
    assert bigger.eos_id == vocab.eos_id


@pytest.mark.parametrize(
    "action, error",
    [
        ((), InvalidAction),
        ((0, 1, 2), ActionTooLong),
        ((0, 7), IndexOutOfRange),
    ],
)
def test_check_action_errors(vocab, action, error):
    with pytest.raises(error):
        check_action(vocab, action, max_len=2)


def test_index_out_of_range_is_an_index_error(vocab):
    with pytest.raises(IndexError):
        vocab.symbol(9)


def test_transition_needs_finite_reward():
    with pytest.raises(ToksoftError):
        Transition((0,), (1,), math.nan, (1,), True)


def test_seeded_rng_is_reproducible():
    a = seeded_rng(42).random(5)
    b = seeded_rng(42).random(5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, seeded_rng(43).random(5))


def test_seeded_rng_uniform_mean():
    mean = seeded_rng(42).random(1_000_000).mean()
    assert 0.499 <= mean <= 0.501


def test_seeded_rng_rejects_negative_seed():
    with pytest.raises(ConfigError):
        seeded_rng(-1)


def test_run_config_defaults():
    cfg = RunConfig()
    assert (cfg.beta, cfg.gamma, cfg.polyak, cfg.lr) == (1.0, 0.99, 0.995, 1e-3)
    assert (cfg.buffer_capacity, cfg.batch_size) == (10_000, 32)
    assert cfg.algo is Algo.ETPO and cfg.env is EnvKind.EXPR and cfg.mode is Mode.TABULAR
    assert cfg.action_len == 6
    assert RunConfig(env="tabular").action_len == 2
    assert RunConfig(max_action_len=3).action_len == 3


@pytest.mark.parametrize(
    "overrides",
    [
        {"beta": 0.0},
        {"gamma": 0.0},
        {"gamma": 1.5},
        {"polyak": 1.0},
        {"lr": -1.0},
        {"batch_size": 64, "buffer_capacity": 32},
        {"algo": "sac"},
        {"env": "tabular", "n_states": 9},
        {"steps": 0},
    ],
)
def test_run_config_validation(overrides):
    with pytest.raises(ConfigError):
        RunConfig(**overrides)


def test_run_config_from_mapping_coerces_strings():
    cfg = RunConfig.from_mapping({"beta": "0.5", "steps": "200", "algo": "PPO_KL", "max_action_len": "3"})
    assert cfg.beta == 0.5
    assert cfg.steps == 200
    assert cfg.algo is Algo.PPO_KL
    assert cfg.max_action_len == 3


def test_run_config_from_mapping_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        RunConfig.from_mapping({"betta": "1.0"})


def test_run_config_mapping_round_trip():
    cfg = RunConfig(beta=0.3, algo=Algo.ETPO_DISC, env=EnvKind.TABULAR, seed=4)
    assert RunConfig.from_mapping(cfg.to_mapping()) == cfg


def test_with_overrides_ignores_none():
    cfg = RunConfig().with_overrides(beta=2.0, gamma=None)
    assert cfg.beta == 2.0
    assert cfg.gamma == 0.99
