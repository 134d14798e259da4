"""Next-token policies and token-level soft Q-functions.

Tabular forms store one row per Context (probabilities for policies, Q-values
for Q tables). Parametric forms are a one-hidden-layer tanh network over a
fixed-length one-hot encoding of the Context, with hand-written reverse-mode
gradients.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Iterator, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from .core import TokenSeq, ToksoftError

logger = logging.getLogger(__name__)

PriorFn = Callable[[TokenSeq, TokenSeq], np.ndarray]


@dataclass(frozen=True)
class Context:
    """A state and the tokens already emitted within the current action."""

    state: TokenSeq
    prefix: TokenSeq = ()

    def extend(self, token: int) -> "Context":
        return Context(self.state, self.prefix + (int(token),))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def draw(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Draw one index from `probs`."""
    return int(rng.choice(len(probs), p=probs))


class Policy(Protocol):
    size: int

    def probs(self, ctx: Context) -> np.ndarray:
        ...

    def probs_batch(self, ctxs: Sequence[Context]) -> np.ndarray:
        ...


# ---------------------------------------------------------------------------
# Tabular
# ---------------------------------------------------------------------------


class ReferencePolicy:
    """Frozen reference policy: a pure view over the environment's prior."""

    def __init__(self, size: int, prior: PriorFn):
        self.size = size
        self._prior = prior

    def probs(self, ctx: Context) -> np.ndarray:
        return self._prior(ctx.state, ctx.prefix)

    def probs_batch(self, ctxs: Sequence[Context]) -> np.ndarray:
        return np.stack([self.probs(c) for c in ctxs])

    def log_probs_batch(self, ctxs: Sequence[Context]) -> np.ndarray:
        return np.log(self.probs_batch(ctxs))


class PolicyTable:
    """Conditional next-token distribution with one stored row per seen Context.

    Unseen contexts read as the prior row; a row is only stored once written.
    """

    def __init__(self, size: int, prior: PriorFn):
        self.size = size
        self._prior = prior
        self._rows: Dict[Context, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._rows)

    def contexts(self) -> Iterator[Context]:
        return iter(self._rows)

    def probs(self, ctx: Context) -> np.ndarray:
        row = self._rows.get(ctx)
        if row is None:
            return self._prior(ctx.state, ctx.prefix)
        return row

    def probs_batch(self, ctxs: Sequence[Context]) -> np.ndarray:
        return np.stack([self.probs(c) for c in ctxs])

    def set_row(self, ctx: Context, row: np.ndarray) -> None:
        row = np.array(row, dtype=np.float64)
        if row.shape != (self.size,) or np.any(row < 0) or abs(row.sum() - 1.0) > 1e-9:
            raise ToksoftError(f"invalid probability row for {ctx}: {row}")
        row /= row.sum()
        row.flags.writeable = False
        self._rows[ctx] = row

    def apply_logit_grads(self, ctxs: Sequence[Context], dlogits: np.ndarray, lr: float) -> None:
        """Gradient step on per-context logits log(row); rows with zero gradient stay untouched."""
        grads: Dict[Context, np.ndarray] = {}
        for ctx, g in zip(ctxs, dlogits):
            if ctx in grads:
                grads[ctx] = grads[ctx] + g
            else:
                grads[ctx] = np.asarray(g, dtype=np.float64)
        for ctx, g in grads.items():
            if not np.any(g):
                continue
            logits = np.log(np.maximum(self.probs(ctx), 1e-300)) - lr * g
            self.set_row(ctx, softmax(logits))


class ContextIndex:
    """Row numbering shared by an online Q table and its target copy."""

    def __init__(self) -> None:
        self._rows: Dict[Context, int] = {}

    def __len__(self) -> int:
        return len(self._rows)

    def get(self, ctx: Context) -> Optional[int]:
        return self._rows.get(ctx)

    def add(self, ctx: Context) -> int:
        idx = self._rows.get(ctx)
        if idx is None:
            idx = self._rows[ctx] = len(self._rows)
        return idx

    def items(self) -> Iterable[Tuple[Context, int]]:
        return self._rows.items()


class QTable:
    """Token-level soft Q-values Q(ctx, w); unseen entries are 0."""

    def __init__(self, size: int, index: Optional[ContextIndex] = None):
        self.size = size
        self.index = index if index is not None else ContextIndex()
        self._values = np.zeros((16, size))

    def _grow(self, n: int) -> None:
        if n > len(self._values):
            cap = max(n, 2 * len(self._values))
            grown = np.zeros((cap, self.size))
            grown[: len(self._values)] = self._values
            self._values = grown

    def spawn_target(self) -> "QTable":
        """A copy sharing this table's context numbering."""
        target = QTable(self.size, self.index)
        target._values = self._values.copy()
        return target

    def contexts(self) -> Iterator[Context]:
        return (ctx for ctx, _ in self.index.items())

    def q_values(self, ctx: Context) -> np.ndarray:
        idx = self.index.get(ctx)
        if idx is None or idx >= len(self._values):
            return np.zeros(self.size)
        return self._values[idx].copy()

    def q_values_batch(self, ctxs: Sequence[Context]) -> np.ndarray:
        return np.stack([self.q_values(c) for c in ctxs])

    def q_value(self, ctx: Context, token: int) -> float:
        return float(self.q_values(ctx)[token])

    def set(self, ctx: Context, token: int, value: float) -> None:
        if not np.isfinite(value):
            raise ToksoftError(f"Q-value for {ctx}, {token} must be finite, got {value}")
        idx = self.index.add(ctx)
        self._grow(idx + 1)
        self._values[idx, token] = value

    def set_row(self, ctx: Context, row: np.ndarray) -> None:
        idx = self.index.add(ctx)
        self._grow(idx + 1)
        self._values[idx] = row

    def as_array(self) -> np.ndarray:
        n = len(self.index)
        self._grow(n)
        return self._values[:n].copy()

    def max_abs_diff(self, other: "QTable") -> float:
        if other.index is self.index:
            a, b = self.as_array(), other.as_array()
            return float(np.max(np.abs(a - b))) if len(a) else 0.0
        keys = set(self.contexts()) | set(other.contexts())
        return max((float(np.max(np.abs(self.q_values(k) - other.q_values(k)))) for k in keys), default=0.0)


# ---------------------------------------------------------------------------
# Parametric
# ---------------------------------------------------------------------------


class ContextEncoder:
    """Fixed-length positional one-hot encoding of a Context.

    The state occupies `max_state_len` slots over `state_vocab_size + 1`
    symbols (the extra one is padding), the prefix `max_prefix_len` slots over
    `vocab_size + 1`. States longer than the window keep their last tokens.
    """

    def __init__(self, state_vocab_size: int, vocab_size: int, max_state_len: int, max_prefix_len: int):
        self.state_vocab_size = state_vocab_size
        self.vocab_size = vocab_size
        self.max_state_len = max_state_len
        self.max_prefix_len = max(max_prefix_len, 0)
        self._state_width = state_vocab_size + 1
        self._prefix_width = vocab_size + 1
        self.dim = max_state_len * self._state_width + self.max_prefix_len * self._prefix_width

    def encode(self, ctx: Context) -> np.ndarray:
        x = np.zeros(self.dim)
        state = ctx.state[-self.max_state_len:] if self.max_state_len else ()
        for pos in range(self.max_state_len):
            tok = state[pos] if pos < len(state) else self.state_vocab_size
            x[pos * self._state_width + tok] = 1.0
        offset = self.max_state_len * self._state_width
        for pos in range(self.max_prefix_len):
            tok = ctx.prefix[pos] if pos < len(ctx.prefix) else self.vocab_size
            x[offset + pos * self._prefix_width + tok] = 1.0
        return x

    def encode_batch(self, ctxs: Sequence[Context]) -> np.ndarray:
        return np.stack([self.encode(c) for c in ctxs]) if ctxs else np.zeros((0, self.dim))


class ParametricNet:
    """tanh MLP with one hidden layer; parameters live in one flat vector.

    Layout of `params`: W1 (in x hidden), b1 (hidden), W2 (hidden x out), b2 (out).
    """

    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng: Optional[np.random.Generator] = None,
                 zero_output: bool = True):
        self.in_dim, self.hidden, self.out_dim = in_dim, hidden, out_dim
        self.params = np.zeros(in_dim * hidden + hidden + hidden * out_dim + out_dim)
        if rng is not None:
            self.W1[...] = rng.normal(0.0, 1.0 / np.sqrt(max(in_dim, 1)), size=(in_dim, hidden))
            if not zero_output:
                self.W2[...] = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, out_dim))
        self._cache: Optional[Tuple[np.ndarray, np.ndarray]] = None

    def _slice(self, start: int, shape: Tuple[int, ...]) -> np.ndarray:
        n = int(np.prod(shape))
        return self.params[start:start + n].reshape(shape)

    @property
    def W1(self) -> np.ndarray:
        return self._slice(0, (self.in_dim, self.hidden))

    @property
    def b1(self) -> np.ndarray:
        return self._slice(self.in_dim * self.hidden, (self.hidden,))

    @property
    def W2(self) -> np.ndarray:
        return self._slice(self.in_dim * self.hidden + self.hidden, (self.hidden, self.out_dim))

    @property
    def b2(self) -> np.ndarray:
        return self._slice(self.in_dim * self.hidden + self.hidden + self.hidden * self.out_dim, (self.out_dim,))

    def copy(self) -> "ParametricNet":
        twin = ParametricNet(self.in_dim, self.hidden, self.out_dim)
        twin.params = self.params.copy()
        return twin

    def forward(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        H = np.tanh(X @ self.W1 + self.b1)
        self._cache = (X, H)
        return H @ self.W2 + self.b2

    def backward(self, dout: np.ndarray) -> np.ndarray:
        """Gradient of <dout, outputs> w.r.t. `params` for the last forward batch."""
        if self._cache is None:
            raise ToksoftError("backward() needs a cached forward pass")
        X, H = self._cache
        dout = np.atleast_2d(dout)
        if dout.shape != (X.shape[0], self.out_dim):
            raise ToksoftError(f"output gradient shape {dout.shape} does not match batch {(X.shape[0], self.out_dim)}")
        dW2 = H.T @ dout
        db2 = dout.sum(axis=0)
        dA = (dout @ self.W2.T) * (1.0 - H * H)
        dW1 = X.T @ dA
        db1 = dA.sum(axis=0)
        return np.concatenate([dW1.ravel(), db1, dW2.ravel(), db2])

    def sgd_step(self, grad: np.ndarray, lr: float) -> None:
        self.params -= lr * grad


def net_backward(net: ParametricNet, dout: np.ndarray) -> np.ndarray:
    return net.backward(dout)


class ParametricPolicy:
    """π_φ(·|ctx) = softmax(log π̄(·|ctx) + net(ctx)); equals π̄ while the output layer is zero."""

    def __init__(self, net: ParametricNet, encoder: ContextEncoder, prior: Optional[PriorFn] = None):
        self.net = net
        self.encoder = encoder
        self.size = net.out_dim
        self._prior = prior

    def _offset(self, ctxs: Sequence[Context]) -> np.ndarray:
        if self._prior is None:
            return np.zeros((len(ctxs), self.size))
        return np.log(np.stack([self._prior(c.state, c.prefix) for c in ctxs]))

    def logits_batch(self, ctxs: Sequence[Context]) -> np.ndarray:
        return self.net.forward(self.encoder.encode_batch(ctxs)) + self._offset(ctxs)

    def probs(self, ctx: Context) -> np.ndarray:
        return self.probs_batch([ctx])[0]

    def probs_batch(self, ctxs: Sequence[Context]) -> np.ndarray:
        return softmax(self.logits_batch(ctxs))

    def apply_logit_grads(self, ctxs: Sequence[Context], dlogits: np.ndarray, lr: float) -> None:
        self.logits_batch(ctxs)
        self.net.sgd_step(self.net.backward(dlogits), lr)


class ParametricQ:
    def __init__(self, net: ParametricNet, encoder: ContextEncoder):
        self.net = net
        self.encoder = encoder
        self.size = net.out_dim

    def spawn_target(self) -> "ParametricQ":
        return ParametricQ(self.net.copy(), self.encoder)

    def q_values(self, ctx: Context) -> np.ndarray:
        return self.q_values_batch([ctx])[0]

    def q_values_batch(self, ctxs: Sequence[Context]) -> np.ndarray:
        return self.net.forward(self.encoder.encode_batch(ctxs))

    def q_value(self, ctx: Context, token: int) -> float:
        return float(self.q_values(ctx)[token])


QFunction = Union[QTable, ParametricQ]


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def policy_probs(policy: Policy, ctx: Context) -> np.ndarray:
    return policy.probs(ctx)


def q_values(q: QFunction, ctx: Context) -> np.ndarray:
    return q.q_values(ctx)


def q_value(q: QFunction, ctx: Context, token: int) -> float:
    return q.q_value(ctx, token)


def action_prob(policy: Policy, state: TokenSeq, action: TokenSeq) -> float:
    """π(a|s) as the product of per-token conditionals."""
    return float(np.prod(_picked(policy, state, action)))


def action_log_prob(policy: Policy, state: TokenSeq, action: TokenSeq) -> float:
    with np.errstate(divide="ignore"):
        return float(np.sum(np.log(_picked(policy, state, action))))


def _picked(policy: Policy, state: TokenSeq, action: TokenSeq) -> np.ndarray:
    if not action:
        raise ToksoftError("actions must contain at least one token")
    ctxs = [Context(state, tuple(action[:j])) for j in range(len(action))]
    rows = policy.probs_batch(ctxs)
    return rows[np.arange(len(action)), list(action)]


def sample_action(policy: Policy, state: TokenSeq, rng: np.random.Generator,
                  max_len: int, eos_id: Optional[int] = None) -> TokenSeq:
    """Draw tokens one at a time until EOS or `max_len` tokens."""
    ctx = Context(state)
    for _ in range(max_len):
        token = draw(policy.probs(ctx), rng)
        ctx = ctx.extend(token)
        if eos_id is not None and token == eos_id:
            break
    return ctx.prefix


def polyak_update(target: Union[QTable, ParametricQ, ParametricNet],
                  online: Union[QTable, ParametricQ, ParametricNet], lam: float) -> None:
    """target ← lam·target + (1 − lam)·online, in place."""
    if not 0.0 <= lam <= 1.0:
        raise ToksoftError(f"polyak coefficient must be in [0, 1], got {lam}")
    if isinstance(target, ParametricQ) and isinstance(online, ParametricQ):
        target, online = target.net, online.net
    if isinstance(target, ParametricNet) and isinstance(online, ParametricNet):
        if target.params.shape != online.params.shape:
            raise ToksoftError("polyak_update needs nets of the same shape")
        target.params[...] = lam * target.params + (1.0 - lam) * online.params
        return
    if isinstance(target, QTable) and isinstance(online, QTable):
        if target.index is online.index:
            n = len(target.index)
            target._grow(n)
            online._grow(n)
            target._values[:n] = lam * target._values[:n] + (1.0 - lam) * online._values[:n]
            return
        for ctx in set(target.contexts()) | set(online.contexts()):
            target.set_row(ctx, lam * target.q_values(ctx) + (1.0 - lam) * online.q_values(ctx))
        return
    raise ToksoftError(f"cannot polyak-average {type(target).__name__} with {type(online).__name__}")
