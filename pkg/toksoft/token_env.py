"""Language-augmented MDPs: states and actions are token sequences.

Two environments share the `TokenEnv` interface:

- `TabularEnv`: a small random MDP whose action space can be enumerated, used
  to check learned values against brute-force ground truth.
- `ExprEnv`: expression synthesis. The agent writes a single-digit infix
  expression; a parseable one ends the episode with a closeness score in [0, 1],
  an unparseable one costs -1.0 and yields a reflection state carrying the
  failed attempt plus an error-code token.
"""

from __future__ import annotations

import abc
import itertools
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple, Union

import numpy as np

from .core import (
    ConfigError,
    EpisodeFinished,
    InvalidAction,
    SpaceTooLarge,
    ToksoftError,
    TokenSeq,
    Vocabulary,
    check_action,
    encode,
    seeded_rng,
)

logger = logging.getLogger(__name__)

ENUMERATION_LIMIT = 10**6
TERMINAL: TokenSeq = ()


class TokenEnv(abc.ABC):
    """Interface shared by every environment.

    `vocab` is the action vocabulary policies emit over. `state_vocab` extends it
    with symbols that only ever appear in states; action ids coincide in both.
    """

    vocab: Vocabulary
    state_vocab: Vocabulary
    max_action_len: int
    max_episode_steps: int

    @abc.abstractmethod
    def reset(self) -> TokenSeq:
        ...

    @abc.abstractmethod
    def step(self, action: Sequence[int]) -> Tuple[TokenSeq, float, bool]:
        ...

    @abc.abstractmethod
    def enumerate_actions(self) -> List[TokenSeq]:
        ...

    @abc.abstractmethod
    def reference_probs(self, state: TokenSeq, prefix: TokenSeq) -> np.ndarray:
        """Frozen reference distribution over the next action token."""

    @property
    @abc.abstractmethod
    def max_state_len(self) -> int:
        """Longest state this environment can produce."""

    def with_step_limit(self, max_episode_steps: int) -> "TokenEnv":
        env = self._copy()
        env.max_episode_steps = max_episode_steps
        return env

    @abc.abstractmethod
    def _copy(self) -> "TokenEnv":
        ...


def _check_enumerable(vocab_size: int, length: int) -> None:
    if vocab_size ** length > ENUMERATION_LIMIT:
        raise SpaceTooLarge(
            f"{vocab_size}^{length} actions exceed the enumeration limit {ENUMERATION_LIMIT}"
        )


# ---------------------------------------------------------------------------
# Tabular MDP
# ---------------------------------------------------------------------------


@dataclass
class TabularEnvSpec:
    """Tables of a fully enumerable MDP.

    `reward_table[s, a]` and `transition_table[s, a]` are indexed by state id and
    by the index of the action in lexicographic enumeration order.
    """

    n_states: int
    vocab_size: int
    action_len: int
    reward_table: np.ndarray
    transition_table: np.ndarray
    terminal_states: FrozenSet[int] = field(default_factory=frozenset)
    spec_seed: int = 0

    def __post_init__(self) -> None:
        if not 1 <= self.n_states <= 8:
            raise ConfigError(f"n_states must be in [1, 8], got {self.n_states}")
        if not 1 <= self.vocab_size <= 4:
            raise ConfigError(f"vocab_size must be in [1, 4], got {self.vocab_size}")
        if not 1 <= self.action_len <= 3:
            raise ConfigError(f"action_len must be in [1, 3], got {self.action_len}")
        self.reward_table = np.asarray(self.reward_table, dtype=np.float64)
        self.transition_table = np.asarray(self.transition_table, dtype=np.int64)
        self.terminal_states = frozenset(int(s) for s in self.terminal_states)
        shape = (self.n_states, self.n_actions)
        if self.reward_table.shape != shape or self.transition_table.shape != shape:
            raise ConfigError(f"tables must have shape {shape}")
        if not np.all(np.isfinite(self.reward_table)):
            raise ConfigError("reward table holds non-finite values")
        if self.transition_table.min() < 0 or self.transition_table.max() >= self.n_states:
            raise ConfigError("transition table points outside the state range")
        if 0 in self.terminal_states:
            raise ConfigError("the start state 0 cannot be terminal")

    @property
    def n_actions(self) -> int:
        return self.vocab_size ** self.action_len

    @classmethod
    def random(
        cls,
        spec_seed: int,
        n_states: int = 5,
        vocab_size: int = 3,
        action_len: int = 2,
        terminal_prob: float = 0.3,
    ) -> "TabularEnvSpec":
        """Draw rewards uniformly from [-1, 1] and next states uniformly over states."""
        rng = seeded_rng(spec_seed)
        n_actions = vocab_size ** action_len
        rewards = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
        transitions = rng.integers(0, n_states, size=(n_states, n_actions))
        terminal = frozenset(
            s for s in range(1, n_states) if rng.uniform() < terminal_prob
        )
        return cls(n_states, vocab_size, action_len, rewards, transitions, terminal, spec_seed)

    @classmethod
    def bandit(cls, rewards: Sequence[float], vocab_size: int = 2, action_len: int = 2) -> "TabularEnvSpec":
        """One decision state whose every action ends the episode in an absorbing state 1."""
        rewards = np.asarray(rewards, dtype=np.float64)
        n_actions = vocab_size ** action_len
        if rewards.shape != (n_actions,):
            raise ConfigError(f"bandit needs {n_actions} rewards, got {rewards.shape}")
        reward_table = np.vstack([rewards, np.zeros(n_actions)])
        transition_table = np.ones((2, n_actions), dtype=np.int64)
        return cls(2, vocab_size, action_len, reward_table, transition_table, frozenset({1}))

    def to_text(self) -> str:
        """Serialise to the plain-text key=value spec format.

        Layout: a version comment, scalar keys, then one `reward.<s>.<a>` and
        one `next.<s>.<a>` line per table entry. Floats use repr() so replayed
        instances are bit-identical.
        """
        lines = [
            "# toksoft tabular spec v1",
            f"n_states={self.n_states}",
            f"vocab_size={self.vocab_size}",
            f"action_len={self.action_len}",
            f"spec_seed={self.spec_seed}",
            "terminal_states=" + ",".join(str(s) for s in sorted(self.terminal_states)),
        ]
        for s in range(self.n_states):
            for a in range(self.n_actions):
                lines.append(f"reward.{s}.{a}={float(self.reward_table[s, a])!r}")
                lines.append(f"next.{s}.{a}={int(self.transition_table[s, a])}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TabularEnvSpec":
        values: Dict[str, str] = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"malformed spec line: {raw!r}")
            values[key.strip()] = value.strip()
        try:
            n_states = int(values["n_states"])
            vocab_size = int(values["vocab_size"])
            action_len = int(values["action_len"])
            n_actions = vocab_size ** action_len
            rewards = np.zeros((n_states, n_actions))
            transitions = np.zeros((n_states, n_actions), dtype=np.int64)
            for s in range(n_states):
                for a in range(n_actions):
                    rewards[s, a] = float(values[f"reward.{s}.{a}"])
                    transitions[s, a] = int(values[f"next.{s}.{a}"])
            terminal_field = values.get("terminal_states", "")
            terminal = frozenset(int(t) for t in terminal_field.split(",") if t)
            spec_seed = int(values.get("spec_seed", "0"))
        except KeyError as e:
            raise ConfigError(f"spec file is missing key {e.args[0]!r}") from None
        except ValueError as e:
            raise ConfigError(f"bad value in spec file: {e}") from None
        return cls(n_states, vocab_size, action_len, rewards, transitions, terminal, spec_seed)

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        try:
            path.write_text(self.to_text())
        except OSError as e:
            raise ToksoftError(f"cannot write spec file {path}: {e}") from e

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TabularEnvSpec":
        path = Path(path)
        try:
            return cls.from_text(path.read_text())
        except OSError as e:
            raise ToksoftError(f"cannot read spec file {path}: {e}") from e


class TabularEnv(TokenEnv):
    """Random tabular MDP with token-sequence states and fixed-length actions.

    A state id is written as its base-|V| digits (fixed width), so states are
    ordinary token sequences over the same vocabulary.
    """

    def __init__(self, spec: TabularEnvSpec, max_episode_steps: int = 5):
        self.spec = spec
        self.vocab = Vocabulary(tuple(f"t{i}" for i in range(spec.vocab_size)))
        self.state_vocab = self.vocab
        self.max_action_len = spec.action_len
        self.max_episode_steps = max_episode_steps
        self._width = spec.n_states if spec.vocab_size == 1 else 1
        while spec.vocab_size > 1 and spec.vocab_size ** self._width < spec.n_states:
            self._width += 1
        self._state = 0
        self._t = 0
        self._done = False
        self._reference = np.full(spec.vocab_size, 1.0 / spec.vocab_size)

    @property
    def max_state_len(self) -> int:
        return self._width

    def _copy(self) -> "TabularEnv":
        return TabularEnv(self.spec, self.max_episode_steps)

    def state_seq(self, state_id: int) -> TokenSeq:
        if self.spec.vocab_size == 1:
            return (0,) * (state_id + 1)
        digits = []
        n = state_id
        for _ in range(self._width):
            digits.append(n % self.spec.vocab_size)
            n //= self.spec.vocab_size
        return tuple(reversed(digits))

    def state_id(self, seq: TokenSeq) -> int:
        if self.spec.vocab_size == 1:
            return len(seq) - 1
        n = 0
        for d in seq:
            n = n * self.spec.vocab_size + d
        return n

    def action_index(self, action: Sequence[int]) -> int:
        action = check_action(self.vocab, action, self.max_action_len)
        if len(action) != self.spec.action_len:
            raise InvalidAction(
                f"tabular actions have length {self.spec.action_len}, got {len(action)}"
            )
        idx = 0
        for w in action:
            idx = idx * self.spec.vocab_size + w
        return idx

    def is_terminal(self, state_id: int) -> bool:
        return state_id in self.spec.terminal_states

    def reset(self) -> TokenSeq:
        self._state = 0
        self._t = 0
        self._done = False
        return self.state_seq(0)

    def step(self, action: Sequence[int]) -> Tuple[TokenSeq, float, bool]:
        if self._done:
            raise EpisodeFinished("episode is over; call reset()")
        a = self.action_index(action)
        reward = float(self.spec.reward_table[self._state, a])
        nxt = int(self.spec.transition_table[self._state, a])
        self._t += 1
        self._state = nxt
        self._done = self.is_terminal(nxt) or self._t >= self.max_episode_steps
        return self.state_seq(nxt), reward, self._done

    def enumerate_actions(self) -> List[TokenSeq]:
        _check_enumerable(self.spec.vocab_size, self.spec.action_len)
        return [
            tuple(a)
            for a in itertools.product(range(self.spec.vocab_size), repeat=self.spec.action_len)
        ]

    def reference_probs(self, state: TokenSeq, prefix: TokenSeq) -> np.ndarray:
        return self._reference.copy()


# ---------------------------------------------------------------------------
# Expression synthesis
# ---------------------------------------------------------------------------

DIGITS = tuple(str(d) for d in range(10))
OPERATORS = ("+", "-", "*")
EOS = "<eos>"
GOAL = "GOAL"
SEP = "|"
ERROR_CODES = ("E_EMPTY", "E_LEAD_OP", "E_TRAIL_OP", "E_ADJ_OP", "E_ADJ_DIGIT")

REFERENCE_LEGAL_MASS = 0.9


class ParseError(ToksoftError):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def expression_vocab() -> Vocabulary:
    return Vocabulary(DIGITS + OPERATORS + (EOS,), eos_id=len(DIGITS) + len(OPERATORS))


def evaluate_expression(symbols: Sequence[str]) -> int:
    """Evaluate single-digit infix strictly left to right, all operators equal.

    Raises:
        ParseError: with one of `ERROR_CODES` as `code`.
    """
    if not symbols:
        raise ParseError("E_EMPTY", "empty expression")
    if symbols[0] in OPERATORS:
        raise ParseError("E_LEAD_OP", "expression starts with an operator")
    for prev, cur in zip(symbols, symbols[1:]):
        if prev in OPERATORS and cur in OPERATORS:
            raise ParseError("E_ADJ_OP", f"adjacent operators {prev}{cur}")
        if prev in DIGITS and cur in DIGITS:
            raise ParseError("E_ADJ_DIGIT", f"adjacent digits {prev}{cur}")
    if symbols[-1] in OPERATORS:
        raise ParseError("E_TRAIL_OP", "expression ends with an operator")
    value = int(symbols[0])
    for op, digit in zip(symbols[1::2], symbols[2::2]):
        if op == "+":
            value += int(digit)
        elif op == "-":
            value -= int(digit)
        else:
            value *= int(digit)
    return value


class ExprEnv(TokenEnv):
    """Write an expression that evaluates to `target`.

    Reward is max(0, 1 - |value - target| / scale) for a parseable expression
    (episode ends), -1.0 otherwise. After a failure the next state is
    `GOAL <target digits> | <failed action> | <error code>`; only the most
    recent failure is kept.
    """

    def __init__(self, target: int = 12, scale: float = 12.0, max_action_len: int = 6, max_episode_steps: int = 5):
        if scale <= 0:
            raise ConfigError(f"scale must be positive, got {scale}")
        self.target = int(target)
        self.scale = float(scale)
        self.vocab = expression_vocab()
        self.state_vocab = self.vocab.extended((GOAL, SEP) + ERROR_CODES)
        self.max_action_len = max_action_len
        self.max_episode_steps = max_episode_steps
        self._prompt = encode(self.state_vocab, [GOAL] + list(str(self.target)))
        self._state: TokenSeq = self._prompt
        self._t = 0
        self._done = False
        self._digit_ids = frozenset(self.vocab.id_of(d) for d in DIGITS)
        self._op_ids = frozenset(self.vocab.id_of(o) for o in OPERATORS)

    @property
    def prompt(self) -> TokenSeq:
        return self._prompt

    @property
    def max_state_len(self) -> int:
        return len(self._prompt) + self.max_action_len + 3

    def _copy(self) -> "ExprEnv":
        return ExprEnv(self.target, self.scale, self.max_action_len, self.max_episode_steps)

    def reset(self) -> TokenSeq:
        self._state = self._prompt
        self._t = 0
        self._done = False
        return self._state

    def _truncate(self, action: TokenSeq) -> TokenSeq:
        eos = self.vocab.eos_id
        if eos in action:
            return action[: action.index(eos)]
        return action

    def score(self, action: Sequence[int]) -> Tuple[float, Optional[str]]:
        """Reward of an action and its parse error code (None when parseable)."""
        body = self._truncate(tuple(action))
        try:
            value = evaluate_expression([self.vocab.symbol(i) for i in body])
        except ParseError as e:
            return -1.0, e.code
        return max(0.0, 1.0 - abs(value - self.target) / self.scale), None

    def step(self, action: Sequence[int]) -> Tuple[TokenSeq, float, bool]:
        if self._done:
            raise EpisodeFinished("episode is over; call reset()")
        action = check_action(self.vocab, action, self.max_action_len)
        reward, code = self.score(action)
        self._t += 1
        if code is None:
            self._done = True
            self._state = TERMINAL
            return TERMINAL, reward, True
        sep = self.state_vocab.id_of(SEP)
        self._state = (
            self._prompt + (sep,) + self._truncate(action) + (sep, self.state_vocab.id_of(code))
        )
        self._done = self._t >= self.max_episode_steps
        logger.debug("step %d failed with %s", self._t, code)
        return self._state, reward, self._done

    def enumerate_actions(self) -> List[TokenSeq]:
        """All actions: EOS may only appear last; shorter-than-L actions must end in EOS."""
        _check_enumerable(self.vocab.size, self.max_action_len)
        eos = self.vocab.eos_id
        body_ids = [i for i in range(self.vocab.size) if i != eos]
        actions = []
        for length in range(1, self.max_action_len + 1):
            for body in itertools.product(body_ids, repeat=length - 1):
                actions.append(tuple(body) + (eos,))
            for body in itertools.product(body_ids, repeat=length):
                if length == self.max_action_len:
                    actions.append(tuple(body))
        return sorted(actions)

    def reference_probs(self, state: TokenSeq, prefix: TokenSeq) -> np.ndarray:
        return _grammar_prior(self.vocab.size, self.vocab.eos_id, self.max_action_len,
                              self._digit_ids, self._op_ids, tuple(prefix[-1:]), len(prefix)).copy()

    def legal_next(self, prefix: TokenSeq) -> FrozenSet[int]:
        return _legal_next(self.vocab.eos_id, self.max_action_len, self._digit_ids,
                           self._op_ids, tuple(prefix[-1:]), len(prefix))


def _legal_next(eos: int, max_len: int, digits: FrozenSet[int], ops: FrozenSet[int],
                last: TokenSeq, depth: int) -> FrozenSet[int]:
    if not last or last[0] in ops:
        return digits
    # after a digit: an operator continues, EOS closes; the final slot only closes
    if depth >= max_len - 1:
        return frozenset({eos})
    return ops | {eos}


@lru_cache(maxsize=None)
def _grammar_prior(size: int, eos: int, max_len: int, digits: FrozenSet[int],
                   ops: FrozenSet[int], last: TokenSeq, depth: int) -> np.ndarray:
    legal = _legal_next(eos, max_len, digits, ops, last, depth)
    probs = np.empty(size)
    n_illegal = size - len(legal)
    legal_mass = REFERENCE_LEGAL_MASS if n_illegal else 1.0
    for i in range(size):
        if i in legal:
            probs[i] = legal_mass / len(legal)
        else:
            probs[i] = (1.0 - REFERENCE_LEGAL_MASS) / n_illegal
    probs.flags.writeable = False
    return probs
