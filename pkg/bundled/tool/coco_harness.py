"""Multi-task bandit simulation: recruitment, round-robin service, posterior
updates, the paired oracle run, regret ledgers and the fixed evaluation batch."""
from __future__ import annotations

import csv
import functools
import pathlib
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import attrs
import numpy as np

import coco_acquisition as acquisition
import coco_config as config_lib
import coco_environments as environments
import coco_kernel_basis as kernel_basis
import coco_logdensity as logdensity
import coco_smc as smc
import coco_utils as utils

TRAJECTORY_HEADER = (
    "t",
    "user_id",
    "arm",
    "reward",
    "regret_expected",
    "regret_realized",
    "mtr_expected",
)
EVAL_HEADER = ("round", "avg_cum_bayes_regret")

Selector = Callable[[logdensity.UserRecord, np.random.Generator], int]

_STEP_ERRORS = (
    utils.NumericalError,
    utils.EvidenceCollapseError,
    utils.DegenerateConditionalError,
    utils.InvalidInputError,
)


@attrs.frozen
class StepRecord:
    t: int
    user_id: int
    arm: int
    reward: float
    best_mean: float
    arm_mean: float

    @property
    def regret_expected(self) -> float:
        return self.best_mean - self.arm_mean

    @property
    def regret_realized(self) -> float:
        return self.best_mean - self.reward


@attrs.define
class RegretLedger:
    records: List[StepRecord] = attrs.field(factory=list)

    def append(self, record: StepRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def schedule(self) -> List[Tuple[int, int]]:
        return [(r.t, r.user_id) for r in self.records]


@attrs.frozen
class TrajectoryRow:
    t: int
    user_id: int
    arm: int
    reward: float
    regret_expected: float
    regret_realized: float
    mtr_expected: float


@attrs.frozen
class RoundSnapshot:
    round_index: int
    n_active: int
    ess: float = float("nan")
    acceptance_rate: float = float("nan")
    rejuvenations: int = 0
    updates: int = 0
    # Mean mixture probability of each served user's true best arm.
    best_arm_prob: float = float("nan")


@attrs.define
class Trajectory:
    rows: List[TrajectoryRow] = attrs.field(factory=list)
    rounds: List[RoundSnapshot] = attrs.field(factory=list)
    metadata: Dict[str, object] = attrs.field(factory=dict)


@attrs.frozen(eq=False)
class SimulationResult:
    trajectory: Trajectory
    ledger: RegretLedger
    oracle_ledger: RegretLedger
    evaluations: List[Tuple[int, float]]
    posterior: Optional[smc.MetaPosterior] = None


@attrs.define(eq=False)
class _User:
    task: environments.Task
    record: logdensity.UserRecord
    oracle_record: logdensity.UserRecord
    pending: int = 0


# **********************************************************
# Regret.
# **********************************************************
def bayes_regret_series(ledger: RegretLedger, realized: bool = False) -> np.ndarray:
    """Cumulative gap to each step's best arm."""
    increments = [r.regret_realized if realized else r.regret_expected for r in ledger.records]
    return np.cumsum(np.asarray(increments, dtype=float))


def multi_task_regret_series(ledger: RegretLedger, oracle_ledger: RegretLedger) -> np.ndarray:
    """Cumulative gap to the oracle-prior TS run on the same schedule."""
    if ledger.schedule != oracle_ledger.schedule:
        raise utils.PairingError(
            f"ledgers differ in schedule ({len(ledger)} vs {len(oracle_ledger)} steps)"
        )
    increments = [o.arm_mean - r.arm_mean for r, o in zip(ledger.records, oracle_ledger.records)]
    return np.cumsum(np.asarray(increments, dtype=float))


# **********************************************************
# Setup.
# **********************************************************
@functools.lru_cache(maxsize=8)
def _cached_basis(
    grid_spec: kernel_basis.GridSpec,
    kernel: kernel_basis.KernelParams,
    truncation: int,
    method: str,
) -> kernel_basis.KLBasis:
    grid = kernel_basis.build_grid(grid_spec)
    return kernel_basis.compute_kl_basis(grid, kernel, truncation, method=method)


def build_basis(config: config_lib.SimConfig) -> kernel_basis.KLBasis:
    """KL basis for the configured grid; computed once per process and shared."""
    return _cached_basis(config.grid, config.kernel, config.truncation, config.kl_method)


@attrs.frozen(eq=False)
class _Streams:
    tasks: np.random.Generator
    noise_seed: np.random.SeedSequence
    policy: np.random.Generator
    oracle_policy: np.random.Generator
    smc: np.random.SeedSequence
    evaluation: np.random.SeedSequence
    environment: np.random.Generator
    oracle_seed: int


def _spawn_streams(seed: int) -> _Streams:
    tasks, noise, policy, oracle_policy, smc_seq, evaluation, env, oracle = (
        np.random.SeedSequence(seed).spawn(8)
    )
    return _Streams(
        tasks=np.random.default_rng(tasks),
        noise_seed=noise,
        policy=np.random.default_rng(policy),
        oracle_policy=np.random.default_rng(oracle_policy),
        smc=smc_seq,
        evaluation=evaluation,
        environment=np.random.default_rng(env),
        oracle_seed=int(oracle.generate_state(1)[0]),
    )


def make_selector(
    policy: str,
    config: config_lib.SimConfig,
    grid: kernel_basis.Grid,
    env: environments.Environment,
    posterior: Optional[smc.MetaPosterior] = None,
) -> Selector:
    noise = config.noise
    if policy == "npm_ts":
        return lambda user, rng: acquisition.npm_ts_select(posterior, user, rng, noise)
    if policy == "gids":
        return lambda user, rng: acquisition.gids_select(posterior, user, config.gids, rng, noise)
    if policy == "ind_ts":
        return lambda user, rng: acquisition.ind_ts_select(user, grid, noise, rng)
    if policy == "oracle_ts":
        return lambda user, rng: acquisition.oracle_ts_select(
            env.oracle_for_context(grid, user.context_index), user, grid, noise, rng
        )
    raise utils.ConfigurationError(f"unknown policy {policy!r}", field="policy")


# **********************************************************
# Evaluation.
# **********************************************************
def draw_evaluation_batch(
    env: environments.Environment, size: int, rng: np.random.Generator
) -> List[environments.Task]:
    return [env.sample_task(rng) for _ in range(size)]


def evaluate_batch(
    select: Selector,
    tasks: Sequence[environments.Task],
    grid: kernel_basis.Grid,
    config: config_lib.SimConfig,
    rng: np.random.Generator,
) -> float:
    """Average cumulative Bayes regret of fresh users served for a fixed number of
    rounds; user histories grow but the meta-posterior is left untouched."""
    total = 0.0
    noise = config.noise
    for index, task in enumerate(tasks):
        user = logdensity.UserRecord(-(index + 1), task.x_obs, grid.snap_context(task.x_obs))
        for _ in range(config.evaluation.rounds):
            arm = select(user, rng)
            reward = environments.observe_reward(task, arm, noise, rng)
            total += task.best_mean - float(task.mu[arm])
            user.history = user.history.append(arm, reward)
    return total / len(tasks)


# **********************************************************
# Simulation.
# **********************************************************
def _recruit(
    env: environments.Environment,
    grid: kernel_basis.Grid,
    count: int,
    first_id: int,
    rng: np.random.Generator,
) -> List[_User]:
    users = []
    for user_id in range(first_id, first_id + count):
        task = env.sample_task(rng)
        context_index = grid.snap_context(task.x_obs)
        users.append(
            _User(
                task,
                logdensity.UserRecord(user_id, task.x_obs, context_index),
                logdensity.UserRecord(user_id, task.x_obs, context_index),
            )
        )
    return users


def _serve(
    record: logdensity.UserRecord,
    task: environments.Task,
    select: Selector,
    policy_rng: np.random.Generator,
    noise_rng: np.random.Generator,
    noise: logdensity.NoiseModel,
    t: int,
    horizon: int,
) -> StepRecord:
    arm = select(record, policy_rng)
    reward = environments.observe_reward(task, arm, noise, noise_rng)
    record.history = record.history.append(arm, reward)
    record.counter += 1
    record.active = record.counter < horizon
    return StepRecord(t, record.user_id, arm, reward, task.best_mean, float(task.mu[arm]))


def _absorb(
    posterior: smc.MetaPosterior,
    users: Sequence[_User],
    config: config_lib.SimConfig,
) -> None:
    observations = [
        smc.Observation(u.record.context_index, u.record.history, u.pending)
        for u in users
        if u.pending
    ]
    if not observations:
        return
    dataset = [
        smc.UserData(u.record.context_index, u.record.history)
        for u in users
        if len(u.record.history)
    ]
    smc.smc_update(posterior, observations, dataset, config.smc, config.noise)
    for user in users:
        user.pending = 0


def _best_arm_prob(
    posterior: Optional[smc.MetaPosterior], users: Sequence[_User], noise: logdensity.NoiseModel
) -> float:
    if posterior is None or not users:
        return float("nan")
    probs = [
        acquisition.marginal_best_arm_distribution(posterior, u.record, noise).probs[
            u.task.best_arm
        ]
        for u in users
    ]
    return float(np.mean(probs))


def _round_snapshot(
    round_index: int,
    n_active: int,
    diagnostics: Sequence[smc.UpdateDiagnostics],
    best_arm_prob: float = float("nan"),
) -> RoundSnapshot:
    if not diagnostics:
        return RoundSnapshot(round_index, n_active, best_arm_prob=best_arm_prob)
    rates = [d.acceptance_rate for d in diagnostics if np.isfinite(d.acceptance_rate)]
    return RoundSnapshot(
        round_index,
        n_active,
        ess=float(diagnostics[-1].ess_after),
        acceptance_rate=float(np.mean(rates)) if rates else float("nan"),
        rejuvenations=sum(d.rejuvenations for d in diagnostics),
        updates=len(diagnostics),
        best_arm_prob=best_arm_prob,
    )


def run_simulation(config: config_lib.SimConfig) -> SimulationResult:
    """One seeded run of the configured policy alongside the oracle-prior run.

    Both runs see the same users, contexts, means and reward noise; each keeps its
    own histories and selection stream.
    """
    streams = _spawn_streams(config.seed)
    env = environments.make_environment(
        config.environment.name,
        streams.environment,
        aligned=config.environment.aligned,
        oracle_seed=streams.oracle_seed,
    )
    basis = build_basis(config)
    grid = basis.grid
    noise = config.noise
    posterior = None
    if config.policy in config_lib.PARTICLE_POLICIES:
        posterior = smc.init_posterior(basis, config.smc, streams.smc)
    select = make_selector(config.policy, config, grid, env, posterior)
    select_oracle = make_selector("oracle_ts", config, grid, env)
    eval_policy = "npm_ts" if posterior is not None else config.policy
    select_eval = make_selector(eval_policy, config, grid, env, posterior)
    eval_tasks = draw_evaluation_batch(env, config.evaluation.batch_size, streams.tasks)
    noise_rng = np.random.default_rng(streams.noise_seed)
    oracle_noise_rng = np.random.default_rng(streams.noise_seed)

    trajectory = Trajectory(
        metadata={
            "seed": config.seed,
            "policy": config.policy,
            "environment": config.environment.name,
            "update_every": config.update_every,
            "literal_update_schedule": config.update_every == 1,
        }
    )
    ledger, oracle_ledger = RegretLedger(), RegretLedger()
    evaluations: List[Tuple[int, float]] = []

    def _evaluate(round_index: int) -> None:
        every = config.evaluation.every
        if every <= 0 or round_index % every:
            return
        rng = np.random.default_rng(streams.evaluation)
        value = evaluate_batch(select_eval, eval_tasks, grid, config, rng)
        evaluations.append((round_index, value))
        utils.log_to_output(f"seed {config.seed} round {round_index}: eval regret {value:.4f}")

    users = _recruit(env, grid, config.batch_size, 0, streams.tasks)
    recruited_rounds = 1
    t = 0
    round_index = 0
    _evaluate(0)
    while any(u.record.active for u in users):
        round_index += 1
        n_diagnostics = len(posterior.diagnostics) if posterior is not None else 0
        active = [u for u in users if u.record.active]
        for user in active:
            t += 1
            try:
                if posterior is not None and sum(u.pending for u in users) >= config.update_every:
                    _absorb(posterior, users, config)
                step = _serve(
                    user.record, user.task, select, streams.policy, noise_rng, noise,
                    t, config.user_horizon,
                )
                oracle_step = _serve(
                    user.oracle_record, user.task, select_oracle, streams.oracle_policy,
                    oracle_noise_rng, noise, t, config.user_horizon,
                )
            except _STEP_ERRORS as exc:
                raise utils.SimulationError(str(exc), t, user.record.user_id) from exc
            user.pending += 1
            ledger.append(step)
            oracle_ledger.append(oracle_step)
            trajectory.rows.append(
                TrajectoryRow(
                    t, step.user_id, step.arm, step.reward, step.regret_expected,
                    step.regret_realized, oracle_step.arm_mean - step.arm_mean,
                )
            )
        if posterior is not None:
            try:
                _absorb(posterior, users, config)
            except _STEP_ERRORS as exc:
                raise utils.SimulationError(str(exc), t, active[-1].record.user_id) from exc
        snapshot = _round_snapshot(
            round_index,
            len(active),
            posterior.diagnostics[n_diagnostics:] if posterior is not None else [],
            _best_arm_prob(posterior, active, noise),
        )
        trajectory.rounds.append(snapshot)
        utils.log_to_output(
            f"seed {config.seed} round {round_index}: {snapshot.n_active} users served, "
            f"ESS {snapshot.ess:.1f}, acceptance {snapshot.acceptance_rate:.2f}"
        )
        if recruited_rounds < config.recruitment_rounds:
            users.extend(_recruit(env, grid, config.batch_size, len(users), streams.tasks))
            recruited_rounds += 1
        _evaluate(round_index)
    return SimulationResult(trajectory, ledger, oracle_ledger, evaluations, posterior)


# **********************************************************
# Output.
# **********************************************************
def write_trajectory_csv(path: pathlib.Path, trajectory: Trajectory) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(TRAJECTORY_HEADER)
        for row in trajectory.rows:
            writer.writerow(utils.format_row(attrs.astuple(row)))


def write_eval_csv(path: pathlib.Path, evaluations: Sequence[Tuple[int, float]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(EVAL_HEADER)
        for round_index, value in evaluations:
            writer.writerow(utils.format_row((round_index, float(value))))
