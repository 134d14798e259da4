"""Per-env-step metrics, their CSV form, and the mean ± std summary across runs."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import astuple, dataclass, field
from pathlib import Path
from typing import List, Mapping, Sequence, Union

import pandas as pd

from .core import ToksoftError

logger = logging.getLogger(__name__)

HEADER = ("env_step", "episode_reward", "best_reward", "avg_batch_reward", "q_loss", "policy_kl", "kl_to_ref")


@dataclass
class MetricsRow:
    env_step: int
    episode_reward: float
    best_reward: float
    avg_batch_reward: float
    q_loss: float = math.nan
    policy_kl: float = math.nan
    kl_to_ref: float = math.nan


@dataclass
class MetricsLog:
    """Rows ordered by env_step; best_reward is the running max of episode_reward.

    `episode_reward` holds the reward received at that env step, i.e. the
    reward of the action explored there.
    """

    rows: List[MetricsRow] = field(default_factory=list)
    episode_lengths: List[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def best_reward(self) -> float:
        return self.rows[-1].best_reward if self.rows else -math.inf

    def record(self, env_step: int, reward: float, avg_batch_reward: float, kl_to_ref: float = math.nan) -> MetricsRow:
        if self.rows and env_step <= self.rows[-1].env_step:
            raise ToksoftError(f"env_step {env_step} is not after {self.rows[-1].env_step}")
        best = max(self.best_reward, reward)
        row = MetricsRow(env_step, reward, best, avg_batch_reward, kl_to_ref=kl_to_ref)
        self.rows.append(row)
        return row

    def annotate_last(self, q_loss: float, policy_kl: float) -> None:
        if self.rows:
            self.rows[-1].q_loss = q_loss
            self.rows[-1].policy_kl = policy_kl

    def column(self, name: str) -> List[float]:
        return [getattr(r, name) for r in self.rows]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([astuple(r) for r in self.rows], columns=list(HEADER))


def _fmt(value: float) -> str:
    return f"{value:.9g}"


def write_metrics(log: MetricsLog, path: Union[str, Path]) -> None:
    """Write the fixed-header CSV; reals carry 9 significant digits."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(HEADER)
            for r in log.rows:
                writer.writerow([str(r.env_step)] + [_fmt(v) for v in astuple(r)[1:]])
    except OSError as e:
        raise ToksoftError(f"cannot write metrics to {path}: {e}") from e


def read_metrics(path: Union[str, Path]) -> MetricsLog:
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader, ()))
            if header != HEADER:
                raise ToksoftError(f"{path} has header {header}, expected {HEADER}")
            rows = [MetricsRow(int(rec[0]), *(float(v) for v in rec[1:])) for rec in reader if rec]
    except OSError as e:
        raise ToksoftError(f"cannot read metrics from {path}: {e}") from e
    except ValueError as e:
        raise ToksoftError(f"malformed metrics row in {path}: {e}") from e
    return MetricsLog(rows)


def final_window_mean(log: MetricsLog, name: str, window: int = 100) -> float:
    values = log.column(name)[-window:]
    return sum(values) / len(values) if values else math.nan


def aggregate(runs: Mapping[str, Sequence[MetricsLog]]) -> pd.DataFrame:
    """Mean ± sample std (n−1) of the final best_reward for each group of runs.

    A group with a single run reports std 0.0 with `single_run` set.
    """
    records = []
    for group in sorted(runs):
        finals = pd.Series([log.best_reward for log in runs[group]], dtype="float64")
        if finals.empty:
            raise ToksoftError(f"no runs for {group!r}")
        single = len(finals) == 1
        records.append({
            "group": group,
            "n_runs": len(finals),
            "mean_best_reward": float(finals.mean()),
            "std_best_reward": 0.0 if single else float(finals.std(ddof=1)),
            "single_run": single,
        })
    return pd.DataFrame.from_records(records, columns=["group", "n_runs", "mean_best_reward", "std_best_reward", "single_run"])


def format_summary(summary: pd.DataFrame) -> str:
    """Render the summary as a plain-text `group  n  mean ± std` table."""
    lines = [f"{'group':<28} {'n':>3}  best_reward"]
    for rec in summary.itertuples(index=False):
        flag = "  (single run)" if rec.single_run else ""
        lines.append(f"{rec.group:<28} {rec.n_runs:>3}  {rec.mean_best_reward:.4f} ± {rec.std_best_reward:.4f}{flag}")
    return "\n".join(lines) + "\n"
