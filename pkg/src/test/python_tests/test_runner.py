"""
Tests for multi-seed runs and their summary.
"""
import math

import numpy as np
from hamcrest import assert_that, has_entries, has_key, is_, is_not, less_than

import coco_config as config_lib
import coco_harness as harness
import coco_runner as runner

from .sim_test_client import defaults


def _config(**overrides):
    return config_lib.structure_config(defaults.tiny_document(**overrides))


def test_run_seeds_keeps_input_order():
    """Results come back in (policy, seed) order whatever the pool does."""
    results = runner.run_seeds(
        _config(), [2, 0, 1], policies=["ind_ts", "oracle_ts"], max_workers=4
    )
    expected = [(policy, seed) for policy in ("ind_ts", "oracle_ts") for seed in (2, 0, 1)]
    assert_that([(r.policy, r.seed) for r in results], is_(expected))
    assert_that(all(r.ok for r in results), is_(True))
    assert_that(runner.failed(results), is_([]))


def test_parallel_and_serial_runs_agree():
    """Worker count does not change any trajectory."""
    serial = runner.run_seeds(_config(policy="npm_ts"), [0, 1, 2], max_workers=1)
    parallel = runner.run_seeds(_config(policy="npm_ts"), [0, 1, 2], max_workers=3)
    for first, second in zip(serial, parallel):
        assert_that(first.result.trajectory.rows, is_(second.result.trajectory.rows))


def test_final_regrets_match_series():
    """Final regrets are the last entries of the cumulative series."""
    (item,) = runner.run_seeds(_config(policy="ind_ts"), [0])
    ledger = item.result.ledger
    assert_that(item.final_bayes_regret, is_(float(harness.bayes_regret_series(ledger)[-1])))
    assert_that(
        item.final_multi_task_regret,
        is_(float(harness.multi_task_regret_series(ledger, item.result.oracle_ledger)[-1])),
    )


def test_failures_are_captured(monkeypatch):
    """A failing seed is recorded with its traceback instead of aborting the batch."""

    def _boom(config):
        if config.seed == 1:
            raise RuntimeError("seed one exploded")
        return harness.SimulationResult(
            harness.Trajectory(), harness.RegretLedger(), harness.RegretLedger(), []
        )

    monkeypatch.setattr(harness, "run_simulation", _boom)
    results = runner.run_seeds(_config(), [0, 1, 2], max_workers=2)
    assert_that([r.ok for r in results], is_([True, False, True]))
    assert_that("seed one exploded" in results[1].exception, is_(True))
    assert_that([r.seed for r in runner.failed(results)], is_([1]))


def test_paired_wilcoxon_less():
    """Clearly smaller values give a small p-value; all ties give nan."""
    first = np.arange(10, dtype=float)
    assert_that(runner.paired_wilcoxon_less(first, first + 1.0), less_than(0.01))
    assert_that(math.isnan(runner.paired_wilcoxon_less(first, first)), is_(True))
    assert_that(math.isnan(runner.paired_wilcoxon_less([], [])), is_(True))


def test_summarize():
    """The summary echoes the config and compares every policy to Ind-TS."""
    config = _config()
    results = runner.run_seeds(config, [0, 1, 2], policies=config_lib.POLICIES)
    summary = runner.summarize(config, results)
    assert_that(summary["seeds"], is_([0, 1, 2]))
    assert_that(summary["update_every"], is_(1))
    assert_that(summary["config"], has_entries({"policy": "npm_ts"}))
    policies = summary["policies"]
    assert_that(sorted(policies), is_(sorted(config_lib.POLICIES)))
    for name, entry in policies.items():
        assert_that(entry["seeds"], is_([0, 1, 2]))
        assert_that(entry, has_key("final_multi_task_regret"))
        assert_that(entry, has_key("last_eval_regret"))
        if name == "ind_ts":
            assert_that(entry, is_not(has_key("p_mtr_below_ind_ts")))
        else:
            assert_that(entry, has_key("p_mtr_below_ind_ts"))
    assert_that(policies["npm_ts"]["diagnostics"], has_key("mean_round_ess"))
    best = policies["npm_ts"]["diagnostics"]["mean_best_arm_prob"]
    assert_that(0.0 <= best <= 1.0 + 1e-12, is_(True))
    assert_that(policies["ind_ts"]["diagnostics"], is_({}))
