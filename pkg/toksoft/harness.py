"""Command-line entry point: train, verify, sweep and report.

Each subcommand returns a result dict with `status` "success" or "error" (and
an `error_message` on error); `main` prints it and maps it to an exit code.
"""

from __future__ import annotations

import argparse
import logging
import re
import sys
from concurrent.futures import ProcessPoolExecutor, as_completed
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import psutil
from dotenv import dotenv_values
from tqdm import tqdm

from .agent import fixed_point_gap, run_training
from .core import Algo, ConfigError, RunConfig, ToksoftError
from .metrics import aggregate, format_summary, read_metrics, write_metrics
from .oracle import run_identity_suite
from .token_env import TabularEnvSpec
from .tools.tools import configure_logging, resolve_out_dir, run_stamp

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_VERIFY = 2

SUMMARY_FILE = "summary.txt"

# CLI flag -> RunConfig field
_FLAG_FIELDS = {
    "env": "env",
    "algo": "algo",
    "beta": "beta",
    "gamma": "gamma",
    "polyak": "polyak",
    "lr": "lr",
    "seed": "seed",
    "steps": "steps",
    "batch": "batch_size",
    "buffer": "buffer_capacity",
    "mode": "mode",
    "max_action_len": "max_action_len",
}

_RUN_FILE = re.compile(r"^(?P<group>.+)_seed(?P<seed>\d+)\.csv$")


def load_config_file(path: Optional[str]) -> Dict[str, str]:
    """Flat key=value file with `#` comments; blank values are dropped."""
    if not path:
        return {}
    if not Path(path).is_file():
        raise ConfigError(f"config file not found: {path}")
    return {k: v for k, v in dotenv_values(path, interpolate=False).items() if v not in (None, "")}


def build_config(args: argparse.Namespace, **extra: Any) -> RunConfig:
    """File values first, then any CLI flag that was given."""
    values: Dict[str, Any] = dict(load_config_file(getattr(args, "config", None)))
    for flag, key in _FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            values[key] = value
    values.update({k: v for k, v in extra.items() if v is not None})
    return RunConfig.from_mapping(values)


def run_name(cfg: RunConfig) -> str:
    return f"{cfg.algo.value}_beta{cfg.beta:g}_seed{cfg.seed}"


def train(args: argparse.Namespace) -> dict:
    cfg = build_config(args)
    stamp = run_stamp()
    out = Path(args.out) if args.out else resolve_out_dir(args.out_dir) / f"{run_name(cfg)}.csv"
    log = run_training(cfg, progress=not args.quiet and sys.stderr.isatty())
    write_metrics(log, out)
    return {
        "status": "success",
        "started_at": stamp["started_at"],
        "metrics_path": str(out),
        "rows": len(log),
        "best_reward": log.best_reward,
    }


def verify(args: argparse.Namespace) -> dict:
    """Identity suite on random instances, then the tabular fixed-point check."""
    out_dir = resolve_out_dir(args.out_dir)
    result = run_identity_suite(n_instances=args.instances, seed=args.seed, failure_dir=out_dir / "failing_specs")
    gaps = []
    for i in range(args.fixed_point):
        spec = TabularEnvSpec.random(args.seed + i, n_states=4, vocab_size=2, action_len=2)
        for beta in (0.1, 1.0, 10.0):
            gaps.append(fixed_point_gap(spec, beta, gamma=0.5))
    result["max_fixed_point_gap"] = max(gaps, default=0.0)
    if result["max_fixed_point_gap"] >= args.fixed_point_tol:
        result["status"] = "error"
        result["error_message"] = (
            f"tabular ETPO fixed point is {result['max_fixed_point_gap']:.3e} away from the soft optimum"
        )
    if result["status"] == "success":
        logger.info("verification passed on %d instances", args.instances)
    else:
        logger.warning("verification failed: %s", result["error_message"])
    return result


def _sweep_job(cfg_values: Mapping[str, Any], path: str) -> str:
    log = run_training(RunConfig.from_mapping(dict(cfg_values)))
    write_metrics(log, path)
    return path


def _csv_list(raw: str, cast=str) -> List[Any]:
    return [cast(x.strip()) for x in raw.split(",") if x.strip()]


def sweep(args: argparse.Namespace) -> dict:
    """Every (algo, β, seed) combination as an independent job, then the summary table."""
    base = build_config(args)
    out_dir = resolve_out_dir(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        algos = [Algo(a.lower()) for a in _csv_list(args.algos)]
        betas = _csv_list(args.betas, float) if args.betas else [base.beta]
    except ValueError as e:
        raise ConfigError(f"bad sweep grid: {e}") from None
    jobs = []
    for algo in algos:
        for beta in betas:
            for seed in range(args.seeds):
                cfg = base.with_overrides(algo=algo, beta=beta, seed=base.seed + seed)
                jobs.append((cfg.to_mapping(), str(out_dir / f"{run_name(cfg)}.csv")))

    workers = args.workers or psutil.cpu_count(logical=False) or 1
    logger.info("sweep of %d jobs on %d workers into %s", len(jobs), workers, out_dir)
    paths = []
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        futures = [pool.submit(_sweep_job, values, path) for values, path in jobs]
        for fut in tqdm(as_completed(futures), total=len(futures), disable=args.quiet, desc="sweep", unit="run"):
            paths.append(fut.result())
            logger.info("finished %s", paths[-1])
    summary = summarize_dir(out_dir)
    return {"status": "success", "runs": len(paths), "summary_path": summary["summary_path"], "table": summary["table"]}


def summarize_dir(out_dir: Path) -> dict:
    """Group `<group>_seed<n>.csv` files by group, aggregate and write summary.txt."""
    runs: Dict[str, list] = {}
    for path in sorted(Path(out_dir).glob("*.csv")):
        m = _RUN_FILE.match(path.name)
        group = m.group("group") if m else path.stem
        runs.setdefault(group, []).append(read_metrics(path))
    if not runs:
        return {"status": "error", "error_message": f"no metrics CSVs in {out_dir}"}
    table = format_summary(aggregate(runs))
    summary_path = Path(out_dir) / SUMMARY_FILE
    summary_path.write_text(table)
    return {"status": "success", "summary_path": str(summary_path), "table": table}


def report(args: argparse.Namespace) -> dict:
    return summarize_dir(resolve_out_dir(args.out_dir))


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--env", choices=["tabular", "expr"])
    p.add_argument("--algo", choices=[a.value for a in Algo])
    p.add_argument("--mode", choices=["tabular", "parametric"])
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--polyak", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--buffer", type=int)
    p.add_argument("--max-action-len", dest="max_action_len", type=int)
    p.add_argument("--out-dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="toksoft", description="Token-level soft RL for language actions")
    parser.add_argument("--log-level", default="INFO")
    parser.add_argument("--quiet", action="store_true", help="no progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training job and write its metrics CSV")
    _add_run_flags(p)
    p.add_argument("--out", help="metrics CSV path")
    p.set_defaults(func=train)

    p = sub.add_parser("verify", help="check the soft Bellman identities against brute force")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fixed-point", dest="fixed_point", type=int, default=3,
                   help="random MDPs for the tabular ETPO fixed-point check")
    p.add_argument("--fixed-point-tol", dest="fixed_point_tol", type=float, default=1e-6)
    p.add_argument("--out-dir")
    p.set_defaults(func=verify)

    p = sub.add_parser("sweep", help="multi-seed, multi-beta grid of training jobs")
    _add_run_flags(p)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--algos", default="etpo,ppo_kl")
    p.add_argument("--betas", help="comma-separated beta values")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=sweep)

    p = sub.add_parser("report", help="aggregate CSVs in a directory into summary.txt")
    p.add_argument("--out-dir")
    p.set_defaults(func=report)
    return parser


def _print_result(command: str, result: dict) -> None:
    if command == "verify":
        verdict = "PASS" if result["status"] == "success" else "FAIL"
        print(f"{verdict} max_residual={result['max_residual']:.3e} "
              f"fixed_point_gap={result['max_fixed_point_gap']:.3e} "
              f"witness={result['min_disc_witness_residual']:.3e}")
        for failure in result.get("failures", []):
            print(f"  failing instance: {failure}")
    elif result["status"] == "success" and "table" in result:
        print(result["table"], end="")
    elif result["status"] == "success":
        print(f"wrote {result['metrics_path']} ({result['rows']} rows, best_reward={result['best_reward']:.4f})")
    else:
        print(f"error: {result['error_message']}", file=sys.stderr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    try:
        result = args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ToksoftError as e:
        logger.error("%s failed: %s", args.command, e)
        return EXIT_CONFIG
    _print_result(args.command, result)
    if result["status"] == "success":
        return EXIT_OK
    return EXIT_VERIFY if args.command == "verify" else EXIT_CONFIG
