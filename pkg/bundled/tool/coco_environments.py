"""Synthetic task generators, the reward model and discretised oracle conditionals.

Policies never see a `Task`: the harness hands them a `UserRecord` holding the
observed context and rewards only.
"""
from __future__ import annotations

from typing import Any, Dict, Mapping, Optional, Sequence, Tuple, Union

import attrs
import numpy as np
from scipy.special import expit, softmax
from scipy.stats import norm

import coco_kernel_basis as kernel_basis
import coco_logdensity as logdensity
import coco_utils as utils

ENVIRONMENTS = ("mog", "partial_linear", "lmm")
# Observed context coordinates per environment.
CONTEXT_DIMS = {"mog": 1, "partial_linear": 1, "lmm": 1}
ORACLE_SAMPLES = 10_000


def _as_matrix(value) -> np.ndarray:
    matrix = np.asarray(value, dtype=float)
    matrix.setflags(write=False)
    return matrix


def _as_range(value) -> Tuple[float, float]:
    low, high = (float(v) for v in value)
    return low, high


@attrs.frozen(eq=False)
class MoGEnvParams:
    means: np.ndarray = attrs.field(
        factory=lambda: [[1.8, 1.0, -1.0], [1.0, 1.9, -1.8]], converter=_as_matrix
    )
    std_intercept: float = 0.2
    std_slope: float = 0.1
    context_range: Tuple[float, float] = attrs.field(default=(-1.0, 1.0), converter=_as_range)

    def __attrs_post_init__(self):
        for x in self.context_range:
            if not self.std(x) > 0:
                raise utils.ConfigurationError(
                    f"component std must be positive over the context range, got {self.std(x)} at {x}",
                    field="environment.std_intercept",
                )

    def std(self, x: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
        return self.std_intercept + self.std_slope * x

    def mixing(self, x: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
        """Probability of the first component."""
        return expit(x)


@attrs.frozen(eq=False)
class PartialLinearEnvParams:
    weights: np.ndarray = attrs.field(
        factory=lambda: [
            [0.6, 0.1, 1.0, -0.9],
            [0.3, 0.3, -1.0, 0.9],
            [0.1, -0.2, -0.3, 0.1],
        ],
        converter=_as_matrix,
    )
    latent_mean: float = 0.5
    latent_std: float = 0.1
    context_range: Tuple[float, float] = attrs.field(default=(-1.0, 1.0), converter=_as_range)

    def __attrs_post_init__(self):
        if self.weights.shape != (3, 4):
            raise utils.ConfigurationError(
                f"weight matrix must be 3x4, got {self.weights.shape}", field="environment.weights"
            )


@attrs.frozen(eq=False)
class LMMEnvParams:
    slopes: np.ndarray = attrs.field(factory=lambda: [0.9, -1.1, 0.2], converter=_as_matrix)
    theta_mean: np.ndarray = attrs.field(factory=lambda: [1.0, 1.0], converter=_as_matrix)
    theta_variance: float = 0.25
    effect_std: float = 0.05
    context_range: Tuple[float, float] = attrs.field(default=(-1.0, 1.0), converter=_as_range)

    def __attrs_post_init__(self):
        if not (self.theta_variance > 0 and self.effect_std > 0):
            raise utils.ConfigurationError(
                "LMM covariance parameters must be positive", field="environment.theta_variance"
            )


EnvParams = Union[MoGEnvParams, PartialLinearEnvParams, LMMEnvParams]


@attrs.frozen(eq=False)
class Task:
    """One user's bandit instance; `latent` is kept for diagnostics only."""

    mu: np.ndarray = attrs.field(converter=_as_matrix)
    x_obs: Tuple[float, ...] = attrs.field(converter=lambda v: tuple(float(x) for x in v))
    latent: Mapping[str, Any] = attrs.field(factory=dict)

    @property
    def best_arm(self) -> int:
        return int(np.argmax(self.mu))

    @property
    def best_mean(self) -> float:
        return float(np.max(self.mu))


# **********************************************************
# Generators.
# **********************************************************
def _uniform_context(context_range: Tuple[float, float], rng: np.random.Generator) -> float:
    return float(rng.uniform(*context_range))


def _mog_means(
    params: MoGEnvParams, x: float, rng: np.random.Generator, size: Optional[int] = None
) -> Tuple[np.ndarray, np.ndarray]:
    count = 1 if size is None else size
    first = rng.uniform(size=count) < params.mixing(x)
    component = np.where(first, 0, 1)
    mu = params.means[component] + params.std(x) * rng.standard_normal((count, params.means.shape[1]))
    return mu, component


def mog_sample_task(params: MoGEnvParams, rng: np.random.Generator) -> Task:
    x = _uniform_context(params.context_range, rng)
    mu, component = _mog_means(params, x, rng)
    return Task(mu[0], (x,), {"component": int(component[0])})


def _partial_linear_means(
    params: PartialLinearEnvParams, x_o: float, rng: np.random.Generator, size: Optional[int] = None
) -> Tuple[np.ndarray, np.ndarray]:
    count = 1 if size is None else size
    x_c = params.latent_mean + params.latent_std * rng.standard_normal(count)
    x_d = (rng.uniform(size=count) < expit(x_o)).astype(float)
    features = np.column_stack([np.full(count, x_o), x_c, x_d, np.ones(count)])
    return features @ params.weights.T, features


def partial_linear_sample_task(params: PartialLinearEnvParams, rng: np.random.Generator) -> Task:
    x_o = _uniform_context(params.context_range, rng)
    mu, features = _partial_linear_means(params, x_o, rng)
    return Task(mu[0], (x_o,), {"x_c": float(features[0, 1]), "x_d": int(features[0, 2])})


def lmm_sample_population(
    params: LMMEnvParams, aligned: bool, rng: np.random.Generator
) -> np.ndarray:
    """The run-level fixed effect theta."""
    mean = params.theta_mean
    if not aligned:
        mean = mean if rng.uniform() < 0.5 else -mean
    return mean + np.sqrt(params.theta_variance) * rng.standard_normal(mean.shape[0])


def _lmm_means(
    params: LMMEnvParams,
    theta: np.ndarray,
    x: float,
    rng: np.random.Generator,
    size: Optional[int] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    count = 1 if size is None else size
    effects = params.effect_std * rng.standard_normal((count, params.slopes.shape[0]))
    fixed = params.slopes * x * theta[0] + theta[1]
    return fixed[None, :] + effects, effects


def lmm_sample_task(params: LMMEnvParams, theta: np.ndarray, rng: np.random.Generator) -> Task:
    x = _uniform_context(params.context_range, rng)
    mu, effects = _lmm_means(params, np.asarray(theta, dtype=float), x, rng)
    return Task(mu[0], (x,), {"effects": effects[0].tolist()})


def observe_reward(
    task: Task, arm: int, noise: logdensity.NoiseModel, rng: np.random.Generator
) -> float:
    if not 0 <= arm < task.mu.shape[0]:
        raise utils.InvalidInputError(f"arm {arm} out of range")
    return float(task.mu[arm] + noise.sigma * rng.standard_normal())


# **********************************************************
# Oracle conditionals.
# **********************************************************
def _mog_conditional(params: MoGEnvParams, x: float, grid: kernel_basis.Grid) -> np.ndarray:
    # Each component is normalised on the grid before mixing.
    mixing = params.mixing(x)
    probs = np.zeros(grid.n_mu_points)
    for weight, mean in zip((mixing, 1.0 - mixing), params.means):
        log_density = norm.logpdf(grid.mu_points, mean[None, :], params.std(x)).sum(axis=1)
        probs += weight * softmax(log_density)
    return probs


def _histogram_conditional(mu_draws: np.ndarray, grid: kernel_basis.Grid) -> np.ndarray:
    counts = np.bincount(grid.snap_mu(mu_draws), minlength=grid.n_mu_points)
    return counts / counts.sum()


@attrs.define(eq=False)
class Environment:
    """A task generator for one simulation run (LMM carries its run-level theta)."""

    kind: str
    params: EnvParams
    theta: Optional[np.ndarray] = None
    oracle_seed: int = 0
    oracle_samples: int = ORACLE_SAMPLES
    _oracle_cache: Dict[Tuple[int, int], logdensity.ConditionalDensity] = attrs.field(
        factory=dict, init=False
    )

    @property
    def context_range(self) -> Tuple[float, float]:
        return self.params.context_range

    def sample_task(self, rng: np.random.Generator) -> Task:
        if self.kind == "mog":
            return mog_sample_task(self.params, rng)
        if self.kind == "partial_linear":
            return partial_linear_sample_task(self.params, rng)
        return lmm_sample_task(self.params, self.theta, rng)

    def conditional_at(
        self, x_obs: float, grid: kernel_basis.Grid, rng: np.random.Generator
    ) -> np.ndarray:
        if self.kind == "mog":
            return _mog_conditional(self.params, x_obs, grid)
        if self.kind == "partial_linear":
            mu, _ = _partial_linear_means(self.params, x_obs, rng, self.oracle_samples)
        else:
            mu, _ = _lmm_means(self.params, self.theta, x_obs, rng, self.oracle_samples)
        return _histogram_conditional(mu, grid)

    def oracle_for_context(
        self, grid: kernel_basis.Grid, context_index: int
    ) -> logdensity.ConditionalDensity:
        """True conditional at the grid context, cached per context index."""
        key = (id(grid), context_index)
        if key not in self._oracle_cache:
            rng = np.random.default_rng([self.oracle_seed, context_index])
            x_obs = float(grid.context_points[context_index][0])
            self._oracle_cache[key] = logdensity.ConditionalDensity(
                self.conditional_at(x_obs, grid, rng), context_index
            )
        return self._oracle_cache[key]


def oracle_conditional(
    env: Environment,
    x_obs: Union[float, Sequence[float]],
    grid: kernel_basis.Grid,
    rng: np.random.Generator,
) -> logdensity.ConditionalDensity:
    """Discretised P*(mu | x_obs) on the mu-subgrid of the nearest grid context."""
    x = float(np.atleast_1d(x_obs)[0])
    low, high = env.context_range
    if not low <= x <= high:
        raise utils.InvalidInputError(f"context {x} outside environment range [{low}, {high}]")
    return logdensity.ConditionalDensity(env.conditional_at(x, grid, rng), grid.snap_context(x))


def make_environment(
    name: str,
    rng: np.random.Generator,
    aligned: bool = True,
    params: Optional[EnvParams] = None,
    oracle_seed: int = 0,
) -> Environment:
    if name == "mog":
        return Environment(name, params or MoGEnvParams(), oracle_seed=oracle_seed)
    if name == "partial_linear":
        return Environment(name, params or PartialLinearEnvParams(), oracle_seed=oracle_seed)
    if name == "lmm":
        params = params or LMMEnvParams()
        theta = lmm_sample_population(params, aligned, rng)
        utils.log_to_output(f"LMM run-level theta: {theta.tolist()}")
        return Environment(name, params, theta=theta, oracle_seed=oracle_seed)
    raise utils.ConfigurationError(
        f"unknown environment {name!r}; expected one of {', '.join(ENVIRONMENTS)}",
        field="environment.name",
    )


@attrs.frozen
class RecruitmentPreset:
    recruitment_rounds: int
    batch_size: int
    user_horizon: int


# Recruitment schedule used for each environment in the reported experiments.
RECRUITMENT_PRESETS: Dict[str, RecruitmentPreset] = {
    "mog": RecruitmentPreset(30, 5, 5),
    "partial_linear": RecruitmentPreset(30, 5, 5),
    "lmm_aligned": RecruitmentPreset(1, 50, 5),
    "lmm_misaligned": RecruitmentPreset(20, 5, 5),
}


def recruitment_preset(name: str, aligned: bool = True) -> RecruitmentPreset:
    if name == "lmm":
        name = "lmm_aligned" if aligned else "lmm_misaligned"
    if name not in RECRUITMENT_PRESETS:
        raise utils.ConfigurationError(
            f"no recruitment preset {name!r}; expected one of {', '.join(RECRUITMENT_PRESETS)}",
            field="recruitment",
        )
    return RECRUITMENT_PRESETS[name]
