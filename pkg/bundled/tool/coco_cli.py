"""Command line entry point: `run`, `evaluate` and `validate`."""
from __future__ import annotations

import argparse
import json
import math
import os
import pathlib
import sys
import traceback
from typing import Any, List, Optional, Sequence


# **********************************************************
# Update sys.path before importing any bundled libraries.
# **********************************************************
def update_sys_path(path_to_add: str, strategy: str) -> None:
    """Add given path to `sys.path`."""
    if path_to_add not in sys.path and os.path.isdir(path_to_add):
        if strategy == "useBundled":
            sys.path.insert(0, path_to_add)
        elif strategy == "fromEnvironment":
            sys.path.append(path_to_add)


# Ensure that we can import bundled libraries.
update_sys_path(
    os.fspath(pathlib.Path(__file__).parent.parent / "libs"),
    os.getenv("COCO_IMPORT_STRATEGY", "useBundled"),
)

# pylint: disable=wrong-import-position,import-error
import coco_config as config_lib
import coco_harness as harness
import coco_kernel_basis as kernel_basis
import coco_runner as runner
import coco_utils as utils

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coco",
        description="Multi-task bandit simulator with a nonparametric meta-prior.",
    )
    parser.add_argument("--log-level", default=None, help="overrides COCO_LOG_LEVEL")
    commands = parser.add_subparsers(dest="command", required=True)

    def _common(sub: argparse.ArgumentParser, with_policy: bool) -> None:
        sub.add_argument("--config", required=True, help="path to a JSON config")
        sub.add_argument("--seeds", default=None, help="seed range A..B (inclusive)")
        sub.add_argument("--out", default="results", help="output directory")
        sub.add_argument("--update-every", type=int, default=None, dest="update_every")
        if with_policy:
            sub.add_argument("--policy", choices=config_lib.POLICIES, default=None)

    _common(commands.add_parser("run", help="run one policy over a seed range"), True)
    _common(
        commands.add_parser("evaluate", help="run every policy and compare their regrets"),
        False,
    )
    validate = commands.add_parser("validate", help="check a config without running it")
    validate.add_argument("--config", required=True)
    return parser


def _json_ready(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _json_ready(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_ready(v) for v in value]
    return value


def _write_summary(out: pathlib.Path, summary: dict) -> None:
    text = json.dumps(_json_ready(summary), indent=4, ensure_ascii=False, allow_nan=False)
    (out / "summary.json").write_text(text + "\n", encoding="utf-8")


def _write_seed_outputs(directory: pathlib.Path, item: runner.SeedResult) -> None:
    seed_dir = directory / f"seed_{item.seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    harness.write_trajectory_csv(seed_dir / "trajectory.csv", item.result.trajectory)
    harness.write_eval_csv(seed_dir / "eval.csv", item.result.evaluations)


def _seeds(args, config: config_lib.SimConfig) -> List[int]:
    return utils.parse_seed_range(args.seeds) if args.seeds else [config.seed]


def _load(args) -> config_lib.SimConfig:
    config = config_lib.load_config(args.config)
    return config_lib.apply_overrides(
        config, policy=getattr(args, "policy", None), update_every=args.update_every
    )


def _report(results: Sequence[runner.SeedResult]) -> int:
    broken = runner.failed(results)
    for item in broken:
        utils.log_error(f"seed {item.seed} ({item.policy}) failed")
    return EXIT_RUNTIME if broken else EXIT_OK


def _cmd_run(args) -> int:
    config = _load(args)
    utils.log_to_output(
        f"Config used for run:\r\n{json.dumps(config_lib.config_to_dict(config), indent=4, ensure_ascii=False)}\r\n"
    )
    results = runner.run_seeds(config, _seeds(args, config))
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for item in results:
        if item.ok:
            _write_seed_outputs(out, item)
    _write_summary(out, runner.summarize(config, results))
    return _report(results)


def _cmd_evaluate(args) -> int:
    config = _load(args)
    results = runner.run_seeds(config, _seeds(args, config), policies=config_lib.POLICIES)
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for item in results:
        if item.ok:
            _write_seed_outputs(out / item.policy, item)
    _write_summary(out, runner.summarize(config, results))
    return _report(results)


def _cmd_validate(args) -> int:
    config = config_lib.load_config(args.config)
    grid = kernel_basis.build_grid(config.grid)
    utils.CONSOLE.print(
        f"{args.config}: OK ({config.environment.name}, policy {config.policy}, "
        f"{grid.n_points} grid points, {config.n_users} users)",
        markup=False,
        highlight=False,
    )
    return EXIT_OK


COMMANDS = {"run": _cmd_run, "evaluate": _cmd_evaluate, "validate": _cmd_validate}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    utils.configure_logging(args.log_level)
    try:
        return COMMANDS[args.command](args)
    except utils.ConfigurationError as exc:
        where = f" [{exc.field}]" if exc.field else ""
        utils.log_error(f"configuration error{where}: {exc}")
        return EXIT_USAGE
    except Exception:  # pylint: disable=broad-except
        utils.log_error(traceback.format_exc(chain=True))
        return EXIT_RUNTIME


# *****************************************************
# Start the simulator.
# *****************************************************
if __name__ == "__main__":
    sys.exit(main())
