"""Shared domain types: vocabulary, token sequences, transitions, run configuration
and the seeded random stream every other module draws from."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, fields, replace
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

# An ordered sequence of vocabulary ids. Tuples keep states and prefixes hashable.
TokenSeq = Tuple[int, ...]


class ToksoftError(Exception):
    """Root of every error raised by the library."""


class UnknownSymbol(ToksoftError):
    pass


class ActionTooLong(ToksoftError):
    pass


class InvalidAction(ToksoftError):
    """Empty actions, or actions an environment cannot index."""


class SpaceTooLarge(ToksoftError):
    pass


class SupportViolation(ToksoftError):
    pass


class NonConvergence(ToksoftError):
    pass


class EmptyBatch(ToksoftError):
    pass


class ConfigError(ToksoftError):
    pass


class IndexOutOfRange(ToksoftError, IndexError):
    pass


class CheckpointError(ToksoftError):
    pass


class EpisodeFinished(ToksoftError):
    """step() called on an environment whose episode already ended."""


class Algo(str, enum.Enum):
    ETPO = "etpo"
    ETPO_DISC = "etpo_disc"
    ETPO_1STEP = "etpo_1step"
    PPO_KL = "ppo_kl"
    ORACLE = "oracle"


class EnvKind(str, enum.Enum):
    TABULAR = "tabular"
    EXPR = "expr"


class Mode(str, enum.Enum):
    TABULAR = "tabular"
    PARAMETRIC = "parametric"


@dataclass(frozen=True)
class Vocabulary:
    """Ordered token symbols with dense ids in [0, size).

    Args:
        tokens (tuple[str, ...]): Printable, unique symbols.
        eos_id (Optional[int]): Id of the end-of-action marker, if any.
    """

    tokens: Tuple[str, ...]
    eos_id: Optional[int] = None

    def __post_init__(self) -> None:
        if not self.tokens:
            raise ConfigError("vocabulary must hold at least one token")
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigError(f"duplicate symbols in vocabulary: {self.tokens}")
        if self.eos_id is not None and not 0 <= self.eos_id < len(self.tokens):
            raise ConfigError(f"eos_id {self.eos_id} outside [0, {len(self.tokens)})")
        object.__setattr__(self, "_ids", {sym: i for i, sym in enumerate(self.tokens)})

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id_of(self, symbol: str) -> int:
        try:
            return self._ids[symbol]  # type: ignore[attr-defined]
        except KeyError:
            raise UnknownSymbol(f"symbol {symbol!r} is not in the vocabulary") from None

    def symbol(self, token_id: int) -> str:
        if not 0 <= token_id < self.size:
            raise IndexOutOfRange(f"token id {token_id} outside [0, {self.size})")
        return self.tokens[token_id]

    def extended(self, extra: Iterable[str]) -> "Vocabulary":
        """Return a vocabulary with `extra` symbols appended; existing ids are kept."""
        return Vocabulary(tuple(self.tokens) + tuple(extra), self.eos_id)


def encode(vocab: Vocabulary, text: Sequence[str]) -> TokenSeq:
    """Map a symbol list to token ids.

    Raises:
        UnknownSymbol: when a symbol is missing from `vocab`.
    """
    return tuple(vocab.id_of(sym) for sym in text)


def decode(vocab: Vocabulary, seq: Sequence[int]) -> List[str]:
    return [vocab.symbol(i) for i in seq]


def check_seq(vocab: Vocabulary, seq: Sequence[int]) -> TokenSeq:
    """Validate ids against `vocab` and return the sequence as a tuple."""
    out = tuple(int(i) for i in seq)
    for i in out:
        if not 0 <= i < vocab.size:
            raise IndexOutOfRange(f"token id {i} outside [0, {vocab.size})")
    return out


def check_action(vocab: Vocabulary, action: Sequence[int], max_len: int) -> TokenSeq:
    """Validate an action-role sequence: ids in range, length in [1, max_len]."""
    seq = check_seq(vocab, action)
    if not seq:
        raise InvalidAction("actions must contain at least one token")
    if len(seq) > max_len:
        raise ActionTooLong(f"action of length {len(seq)} exceeds the limit {max_len}")
    return seq


@dataclass(frozen=True)
class Transition:
    state: TokenSeq
    action: TokenSeq
    reward: float
    next_state: TokenSeq
    done: bool

    def __post_init__(self) -> None:
        if not math.isfinite(self.reward):
            raise ToksoftError(f"transition reward must be finite, got {self.reward}")


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic random stream.

    The generator is numpy's PCG64 seeded directly with `seed`; its output is
    specified bit-for-bit by numpy and does not depend on the platform.

    Args:
        seed (int): Unsigned seed.

    Returns:
        np.random.Generator: A fresh stream owned by the caller.
    """
    if seed < 0:
        raise ConfigError(f"seed must be unsigned, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


_DEFAULT_ACTION_LEN = {EnvKind.EXPR: 6, EnvKind.TABULAR: 2}


@dataclass(frozen=True)
class RunConfig:
    """All hyperparameters of a run plus environment and algorithm selection."""

    beta: float = 1.0
    gamma: float = 0.99
    polyak: float = 0.995
    lr: float = 1e-3
    max_action_len: Optional[int] = None
    max_episode_steps: int = 5
    buffer_capacity: int = 10_000
    batch_size: int = 32
    seed: int = 0
    algo: Algo = Algo.ETPO
    env: EnvKind = EnvKind.EXPR
    mode: Mode = Mode.TABULAR
    steps: int = 1000
    hidden: int = 32
    # tabular environment shape
    n_states: int = 5
    vocab_size: int = 3
    # expression environment
    target: int = 12
    scale: float = 12.0
    # PPO-KL
    clip_eps: float = 0.2
    ppo_epochs: int = 4
    ppo_episodes: int = 4
    value_coef: float = 0.5
    checkpoint_every: int = 0
    checkpoint_dir: Optional[str] = None

    def __post_init__(self) -> None:
        for name, enum_type in (("algo", Algo), ("env", EnvKind), ("mode", Mode)):
            value = getattr(self, name)
            if not isinstance(value, enum_type):
                try:
                    object.__setattr__(self, name, enum_type(str(value).lower()))
                except ValueError:
                    choices = ", ".join(e.value for e in enum_type)
                    raise ConfigError(f"{name}={value!r} is not one of {choices}") from None
        if not self.beta > 0:
            raise ConfigError(f"beta must be > 0, got {self.beta}")
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"gamma must be in (0, 1], got {self.gamma}")
        if not 0 <= self.polyak < 1:
            raise ConfigError(f"polyak must be in [0, 1), got {self.polyak}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        for name in ("max_episode_steps", "buffer_capacity", "batch_size", "steps",
                     "hidden", "n_states", "vocab_size", "ppo_epochs", "ppo_episodes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.max_action_len is not None and self.max_action_len < 1:
            raise ConfigError(f"max_action_len must be positive, got {self.max_action_len}")
        if self.batch_size > self.buffer_capacity:
            raise ConfigError(
                f"batch_size ({self.batch_size}) exceeds buffer_capacity ({self.buffer_capacity})"
            )
        if self.seed < 0:
            raise ConfigError(f"seed must be unsigned, got {self.seed}")
        if not self.scale > 0:
            raise ConfigError(f"scale must be > 0, got {self.scale}")
        if not 0 < self.clip_eps < 1:
            raise ConfigError(f"clip_eps must be in (0, 1), got {self.clip_eps}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if self.env is EnvKind.TABULAR:
            if self.n_states > 8 or self.vocab_size > 4 or self.action_len > 3:
                raise ConfigError("tabular env needs n_states <= 8, vocab_size <= 4, action length <= 3")

    @property
    def action_len(self) -> int:
        """The action length limit L, resolved against the environment default."""
        if self.max_action_len is not None:
            return self.max_action_len
        return _DEFAULT_ACTION_LEN[self.env]

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    @classmethod
    def from_mapping(cls, values: Dict[str, Any]) -> "RunConfig":
        """Build a config from string values (config files, CLI); unknown keys fail."""
        known = {f.name: f for f in fields(cls)}
        kwargs: Dict[str, Any] = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            if raw is None or raw == "":
                continue
            kwargs[key] = _coerce(key, raw, cls.__dataclass_fields__[key].default)
        return cls(**kwargs)

    def to_mapping(self) -> Dict[str, Any]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = value.value if isinstance(value, enum.Enum) else value
        return out


def _coerce(key: str, raw: Any, default: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    try:
        if key in ("max_action_len",):
            return int(raw)
        if key == "checkpoint_dir":
            return raw
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes")
        if isinstance(default, enum.Enum):
            return raw.strip().lower()
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw
