"""Runs independent seeds on a worker pool and summarises their regrets."""
from __future__ import annotations

import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from scipy.stats import wilcoxon

import coco_config as config_lib
import coco_harness as harness
import coco_utils as utils


class SeedResult:
    """Object to hold the outcome of one seeded run."""

    def __init__(
        self,
        seed: int,
        policy: str,
        result: Optional[harness.SimulationResult] = None,
        exception: Optional[str] = None,
        runtime: float = 0.0,
    ):
        self.seed: int = seed
        self.policy: str = policy
        self.result: Optional[harness.SimulationResult] = result
        self.exception: Optional[str] = exception
        self.runtime: float = runtime

    @property
    def ok(self) -> bool:
        return self.exception is None

    @property
    def final_bayes_regret(self) -> float:
        series = harness.bayes_regret_series(self.result.ledger)
        return float(series[-1]) if series.size else 0.0

    @property
    def final_multi_task_regret(self) -> float:
        series = harness.multi_task_regret_series(self.result.ledger, self.result.oracle_ledger)
        return float(series[-1]) if series.size else 0.0


def _run_one(config: config_lib.SimConfig) -> SeedResult:
    start = time.perf_counter()
    try:
        result = harness.run_simulation(config)
    except Exception:  # pylint: disable=broad-except
        message = traceback.format_exc(chain=True)
        utils.log_error(f"seed {config.seed} ({config.policy}) failed:\r\n{message}")
        return SeedResult(config.seed, config.policy, exception=message)
    runtime = time.perf_counter() - start
    utils.log_always(f"seed {config.seed} ({config.policy}) finished in {runtime:.1f}s")
    return SeedResult(config.seed, config.policy, result, runtime=runtime)


def run_seeds(
    config: config_lib.SimConfig,
    seeds: Sequence[int],
    policies: Optional[Sequence[str]] = None,
    max_workers: Optional[int] = None,
) -> List[SeedResult]:
    """Every (policy, seed) pair, returned in input order whatever finishes first."""
    policies = list(policies or [config.policy])
    jobs = [
        config_lib.apply_overrides(config, policy=policy, seed=seed)
        for policy in policies
        for seed in seeds
    ]
    workers = max_workers or utils.get_max_workers()
    with ThreadPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_run_one, jobs))


def _mean_sd(values: Sequence[float]) -> Dict[str, float]:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return {"mean": float("nan"), "sd": float("nan")}
    sd = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
    return {"mean": float(np.mean(values)), "sd": sd}


def paired_wilcoxon_less(first: Sequence[float], second: Sequence[float]) -> float:
    """One-sided p-value for `first` < `second`; nan when every pair ties."""
    differences = np.asarray(first, dtype=float) - np.asarray(second, dtype=float)
    if differences.size == 0 or np.all(differences == 0.0):
        return float("nan")
    return float(wilcoxon(first, second, alternative="less").pvalue)


def _diagnostics(results: Sequence[SeedResult]) -> Dict[str, float]:
    snapshots = [s for r in results for s in r.result.trajectory.rounds if s.updates]
    if not snapshots:
        return {}
    rates = [s.acceptance_rate for s in snapshots if np.isfinite(s.acceptance_rate)]
    best = [s.best_arm_prob for s in snapshots if np.isfinite(s.best_arm_prob)]
    return {
        "mean_round_ess": float(np.mean([s.ess for s in snapshots])),
        "mean_acceptance_rate": float(np.mean(rates)) if rates else float("nan"),
        "total_rejuvenations": int(sum(s.rejuvenations for s in snapshots)),
        "mean_best_arm_prob": float(np.mean(best)) if best else float("nan"),
    }


def summarize(
    config: config_lib.SimConfig, results: Sequence[SeedResult], reference: str = "ind_ts"
) -> Dict[str, Any]:
    """Config echo, seeds, per-policy final regrets and paired comparisons."""
    by_policy: Dict[str, List[SeedResult]] = {}
    for item in results:
        by_policy.setdefault(item.policy, []).append(item)

    policies: Dict[str, Any] = {}
    for policy, items in by_policy.items():
        done = [r for r in items if r.ok]
        entry: Dict[str, Any] = {
            "seeds": [r.seed for r in done],
            "failed_seeds": [r.seed for r in items if not r.ok],
            "final_bayes_regret": _mean_sd([r.final_bayes_regret for r in done]),
            "final_multi_task_regret": _mean_sd([r.final_multi_task_regret for r in done]),
            "runtime_seconds": float(sum(r.runtime for r in done)),
            "diagnostics": _diagnostics(done),
        }
        evaluated = [r for r in done if r.result.evaluations]
        if evaluated:
            first = [r.result.evaluations[0][1] for r in evaluated]
            last = [r.result.evaluations[-1][1] for r in evaluated]
            entry["first_eval_regret"] = _mean_sd(first)
            entry["last_eval_regret"] = _mean_sd(last)
            entry["p_last_eval_below_first"] = paired_wilcoxon_less(last, first)
        policies[policy] = entry

    baseline = {r.seed: r for r in by_policy.get(reference, []) if r.ok}
    for policy, items in by_policy.items():
        if policy == reference or not baseline:
            continue
        paired = [(r, baseline[r.seed]) for r in items if r.ok and r.seed in baseline]
        policies[policy][f"p_mtr_below_{reference}"] = paired_wilcoxon_less(
            [a.final_multi_task_regret for a, _ in paired],
            [b.final_multi_task_regret for _, b in paired],
        )

    return {
        "config": config_lib.config_to_dict(config),
        "seeds": sorted({r.seed for r in results}),
        "update_every": config.update_every,
        "policies": policies,
    }


def failed(results: Sequence[SeedResult]) -> List[SeedResult]:
    return [r for r in results if not r.ok]
