"""Root trainer: builds the environment and training state for a RunConfig and
delegates the run to the sub-agent that owns the algorithm.

- etpo: ETPO, ETPO_DISC (within-action targets discounted by γ), ETPO_1STEP
  (episodes capped at one step)
- ppo_kl: action-level PPO with a KL-shaped reward
- ORACLE is handled here: soft value iteration on the enumerated tabular MDP,
  then rollouts of the optimal policy for comparison curves.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
from tqdm import tqdm

from .checkpoint import load_checkpoint, save_checkpoint
from .core import Algo, ConfigError, EnvKind, Mode, RunConfig, seeded_rng
from .metrics import MetricsLog
from .oracle import first_token_values, reference_action_distribution, soft_value_iteration, token_policy_from_actions
from .policy_q import ContextEncoder, ParametricNet, ParametricPolicy, ParametricQ, PolicyTable, QTable, ReferencePolicy
from .rollout import ReplayBuffer, TrainState, collect
from .sub_agents.etpo.agent import etpo_update, exact_sweep
from .sub_agents.ppo_kl.agent import make_baseline, ppo_kl_update, rollout_episodes
from .token_env import ExprEnv, TabularEnv, TabularEnvSpec, TokenEnv

logger = logging.getLogger(__name__)

# the tabular MDP is fixed across seeds so that seeds only vary the learner
TABULAR_SPEC_SEED = 0


def make_env(cfg: RunConfig) -> TokenEnv:
    if cfg.env is EnvKind.TABULAR:
        spec = TabularEnvSpec.random(TABULAR_SPEC_SEED, cfg.n_states, cfg.vocab_size, cfg.action_len)
        return TabularEnv(spec, cfg.max_episode_steps)
    return ExprEnv(cfg.target, cfg.scale, cfg.action_len, cfg.max_episode_steps)


def init_train_state(cfg: RunConfig, env: TokenEnv) -> TrainState:
    """Fresh state with π = π̄ and Q = 0 for the configured mode."""
    rng = seeded_rng(cfg.seed)
    size = env.vocab.size
    reference = ReferencePolicy(size, env.reference_probs)
    if cfg.mode is Mode.TABULAR:
        policy = PolicyTable(size, env.reference_probs)
        q_online = QTable(size)
    else:
        encoder = ContextEncoder(env.state_vocab.size, size, env.max_state_len, env.max_action_len)
        policy = ParametricPolicy(ParametricNet(encoder.dim, cfg.hidden, size, rng), encoder, env.reference_probs)
        q_online = ParametricQ(ParametricNet(encoder.dim, cfg.hidden, size, rng), encoder)
    state = TrainState(
        cfg=cfg,
        env=env,
        policy=policy,
        reference=reference,
        buffer=ReplayBuffer(cfg.buffer_capacity),
        rng=rng,
    )
    if cfg.algo is Algo.PPO_KL:
        state.baseline = make_baseline(cfg, env, rng)
    else:
        state.q_online = q_online
        state.q_target = q_online.spawn_target()
    return state


def fixed_point_gap(spec: TabularEnvSpec, beta: float, gamma: float = 0.5, within_discount: float = 1.0,
                    tol: float = 1e-11) -> float:
    """Sup-norm gap between tabular ETPO's converged first-token soft values and
    the action-level soft optimum, over the non-terminal states of `spec`."""
    env = TabularEnv(spec)
    cfg = RunConfig(beta=beta, gamma=gamma, polyak=0.0, env=EnvKind.TABULAR, mode=Mode.TABULAR,
                    n_states=spec.n_states, vocab_size=spec.vocab_size, max_action_len=spec.action_len,
                    batch_size=1, buffer_capacity=1)
    state = init_train_state(cfg, env)
    exact_sweep(state, env, within_discount, tol=tol)
    solution = soft_value_iteration(env, reference_action_distribution(env), beta, gamma)
    v_tok = first_token_values(state.q_online, state.policy, state.reference, env, beta)
    live = [s for s in range(spec.n_states) if not env.is_terminal(s)]
    return float(np.max(np.abs(v_tok[live] - solution.values[live])))


def _components(state: TrainState) -> Dict[str, Any]:
    parts = {"policy": state.policy, "q_online": state.q_online, "q_target": state.q_target,
             "baseline": state.baseline}
    return {name: obj for name, obj in parts.items() if obj is not None}


def save_train_state(state: TrainState, path: Union[str, Path]) -> Path:
    meta = {"env_steps": state.env_steps, "algo": state.cfg.algo.value, "seed": state.cfg.seed}
    return save_checkpoint(path, state.env.vocab, _components(state), meta)


def load_train_state(state: TrainState, path: Union[str, Path]) -> TrainState:
    """Restore learned tables/parameters into `state`; env_steps comes from the checkpoint."""
    meta = load_checkpoint(path, state.env.vocab, _components(state))
    state.env_steps = int(meta.get("env_steps", state.env_steps))
    return state


class _Checkpointer:
    def __init__(self, cfg: RunConfig):
        self.every = cfg.checkpoint_every
        self.dir = Path(cfg.checkpoint_dir or ".")
        self._last = 0

    def __call__(self, state: TrainState) -> None:
        if not self.every or state.env_steps // self.every <= self._last // self.every:
            return
        self._last = state.env_steps
        name = f"{state.cfg.algo.value}_seed{state.cfg.seed}_step{state.env_steps}.npz"
        save_train_state(state, self.dir / name)


def _run_etpo(state: TrainState, within_discount: float, bar: tqdm, checkpoint: _Checkpointer) -> None:
    cfg = state.cfg
    while state.env_steps < cfg.steps:
        collect(state, 1)
        if len(state.buffer) >= cfg.batch_size:
            batch = state.buffer.sample(cfg.batch_size, state.rng, now=state.env_steps)
            q_loss, policy_kl, _ = etpo_update(state, batch, within_discount)
            state.metrics.annotate_last(q_loss, policy_kl)
            logger.debug("mean age of sampled transitions: %.1f env steps", state.buffer.last_sample_age)
        bar.update(1)
        checkpoint(state)


def _run_ppo_kl(state: TrainState, bar: tqdm, checkpoint: _Checkpointer) -> None:
    cfg = state.cfg
    while state.env_steps < cfg.steps:
        before = state.env_steps
        episodes = rollout_episodes(state, cfg.ppo_episodes, cfg.steps)
        policy_loss, value_loss, _ = ppo_kl_update(state, episodes)
        # value loss goes in the q_loss column, surrogate loss in policy_kl
        state.metrics.annotate_last(value_loss, policy_loss)
        bar.update(state.env_steps - before)
        checkpoint(state)


def _run_oracle(state: TrainState, bar: tqdm) -> None:
    env = state.env
    if not isinstance(env, TabularEnv):
        raise ConfigError("the oracle algorithm needs the tabular environment")
    ref = reference_action_distribution(env)
    solution = soft_value_iteration(env, ref, state.cfg.beta, state.cfg.gamma)
    logger.info("oracle solved in %d sweeps; V*(s0)=%.6f", solution.iterations, solution.values[0])
    state.policy = token_policy_from_actions(solution.policy, env)
    while state.env_steps < state.cfg.steps:
        collect(state, 1)
        bar.update(1)


def run_training(cfg: RunConfig, env: Optional[TokenEnv] = None, progress: bool = False) -> MetricsLog:
    """Train `cfg.algo` for `cfg.steps` env steps and return the per-step metrics.

    Args:
        cfg (RunConfig): Hyperparameters, algorithm and environment.
        env (TokenEnv, optional): Environment to use instead of the one `cfg` describes.
        progress (bool): Show a tqdm bar over env steps.

    Returns:
        MetricsLog: One row per env step.
    """
    if cfg.algo is Algo.ORACLE and cfg.mode is not Mode.TABULAR:
        raise ConfigError("the oracle algorithm only runs in tabular mode")
    env = env if env is not None else make_env(cfg)
    if cfg.algo is Algo.ETPO_1STEP:
        env = env.with_step_limit(1)
    state = init_train_state(cfg, env)
    logger.info("training %s on %s (%s mode) for %d steps, seed %d",
                cfg.algo.value, cfg.env.value, cfg.mode.value, cfg.steps, cfg.seed)
    checkpoint = _Checkpointer(cfg)
    with tqdm(total=cfg.steps, disable=not progress, desc=cfg.algo.value, unit="step") as bar:
        if cfg.algo is Algo.PPO_KL:
            _run_ppo_kl(state, bar, checkpoint)
        elif cfg.algo is Algo.ORACLE:
            _run_oracle(state, bar)
        else:
            within_discount = cfg.gamma if cfg.algo is Algo.ETPO_DISC else 1.0
            _run_etpo(state, within_discount, bar, checkpoint)
    logger.info("finished %s seed %d: best_reward=%.4f", cfg.algo.value, cfg.seed, state.metrics.best_reward)
    return state.metrics
