"""Arm selection: Thompson sampling under the particle meta-posterior (NPM-TS),
global information-directed sampling (GIDS), and the independent and oracle
Thompson-sampling baselines."""
from __future__ import annotations

from typing import Optional, Sequence, Tuple

import attrs
import numpy as np
from scipy.special import softmax
from scipy.stats import entropy, norm

import coco_kernel_basis as kernel_basis
import coco_logdensity as logdensity
import coco_smc as smc
import coco_utils as utils

SIMPLEX_TOL = 1e-10
REWARD_GRID_SPAN = 3.0
RATIO_TIE_TOL = 1e-12


def _as_simplex(value) -> np.ndarray:
    probs = np.asarray(value, dtype=float)
    if probs.ndim != 1 or np.any(probs < -SIMPLEX_TOL) or abs(probs.sum() - 1.0) > SIMPLEX_TOL:
        raise utils.InvalidInputError(f"not a probability vector: {probs}")
    probs = np.clip(probs, 0.0, None)
    probs.setflags(write=False)
    return probs


@attrs.frozen(eq=False)
class ArmDistribution:
    probs: np.ndarray = attrs.field(converter=_as_simplex)

    def sample(self, rng: np.random.Generator) -> int:
        return int(rng.choice(self.probs.shape[0], p=self.probs / self.probs.sum()))


def _positive(_instance, attribute, value):
    if not value > 0:
        raise utils.ConfigurationError(
            f"{attribute.name} must be positive, got {value}", field=f"gids.{attribute.name}"
        )


def _optional_reward_grid(value) -> Optional[Tuple[float, ...]]:
    if value is None:
        return None
    return tuple(float(v) for v in value)


def _non_empty(_instance, attribute, value):
    if value is not None and len(value) == 0:
        raise utils.ConfigurationError("reward_grid must not be empty", field="gids.reward_grid")


@attrs.frozen
class GIDSConfig:
    """`reward_grid` of None means `n_reward_points` values spanning the mu range +- 3 sigma."""

    reward_grid: Optional[Tuple[float, ...]] = attrs.field(
        default=None, converter=_optional_reward_grid, validator=_non_empty
    )
    n_reward_points: int = attrs.field(default=21, validator=_positive)
    ratio_epsilon: float = attrs.field(default=1e-8, validator=_positive)
    eg_steps: int = attrs.field(default=200, validator=_positive)
    eg_learning_rate: float = attrs.field(default=0.5, validator=_positive)

    def rewards(self, grid: kernel_basis.Grid, noise: logdensity.NoiseModel) -> np.ndarray:
        if self.reward_grid is not None:
            return np.asarray(self.reward_grid)
        low, high = grid.spec.mu_range
        span = REWARD_GRID_SPAN * noise.sigma
        return np.linspace(low - span, high + span, self.n_reward_points)


# **********************************************************
# Thompson sampling.
# **********************************************************
def arm_optimality_probs(
    posterior_over_mu: logdensity.ConditionalDensity, grid: kernel_basis.Grid
) -> ArmDistribution:
    """Probability mass of the grid points on which each arm is best."""
    probs = np.bincount(grid.best_arm, weights=posterior_over_mu.probs, minlength=grid.n_arms)
    return ArmDistribution(probs / probs.sum())


def _particle_conditional(
    posterior: smc.MetaPosterior,
    user: logdensity.UserRecord,
    particle: int,
    noise: logdensity.NoiseModel,
) -> logdensity.ConditionalDensity:
    f_slice = posterior.log_density_slices(user.context_index)[particle]
    cond = logdensity.conditional_from_log_density(f_slice, user.context_index)
    g = logdensity.history_point_likelihoods(posterior.grid, user.history, noise)
    return logdensity.condition_on_history(cond, g)


def _sampled_conditional(
    posterior: smc.MetaPosterior,
    user: logdensity.UserRecord,
    rng: np.random.Generator,
    noise: logdensity.NoiseModel,
) -> Tuple[Optional[int], Optional[logdensity.ConditionalDensity]]:
    """Draws a particle; on a degenerate conditional walks the rest by weight."""
    sampled = int(rng.choice(posterior.n_particles, p=posterior.weights))
    by_weight = np.argsort(-posterior.weights, kind="stable")
    for particle in [sampled] + [int(p) for p in by_weight if p != sampled]:
        try:
            return particle, _particle_conditional(posterior, user, particle, noise)
        except utils.DegenerateConditionalError:
            utils.log_to_output(f"Particle {particle} degenerate for user {user.user_id}")
    utils.log_warning(
        f"No particle gives a usable conditional for user {user.user_id}; choosing uniformly"
    )
    return None, None


def npm_ts_select(
    posterior: smc.MetaPosterior,
    user: logdensity.UserRecord,
    rng: np.random.Generator,
    noise: logdensity.NoiseModel = logdensity.NoiseModel(),
) -> int:
    _, cond = _sampled_conditional(posterior, user, rng, noise)
    if cond is None:
        return int(rng.integers(posterior.grid.n_arms))
    return arm_optimality_probs(cond, posterior.grid).sample(rng)


def marginal_best_arm_distribution(
    posterior: smc.MetaPosterior,
    user: logdensity.UserRecord,
    noise: logdensity.NoiseModel = logdensity.NoiseModel(),
) -> ArmDistribution:
    """Best-arm probabilities averaged over all particles (diagnostic)."""
    log_g = logdensity.history_log_likelihoods(posterior.grid, user.history, noise)
    probs = logdensity.posterior_probs(posterior.log_density_slices(user.context_index), log_g)
    mixture = logdensity.ConditionalDensity(posterior.weights @ probs, user.context_index)
    return arm_optimality_probs(mixture, posterior.grid)


def ind_ts_select(
    user: logdensity.UserRecord,
    grid: kernel_basis.Grid,
    noise: logdensity.NoiseModel,
    rng: np.random.Generator,
) -> int:
    """TS with a uniform prior over the mu-subgrid and the user's own history only."""
    log_g = logdensity.history_log_likelihoods(grid, user.history, noise)
    cond = logdensity.ConditionalDensity(softmax(log_g), user.context_index)
    return arm_optimality_probs(cond, grid).sample(rng)


def oracle_ts_select(
    oracle: logdensity.ConditionalDensity,
    user: logdensity.UserRecord,
    grid: kernel_basis.Grid,
    noise: logdensity.NoiseModel,
    rng: np.random.Generator,
) -> int:
    """TS with the true discretised conditional as prior."""
    log_g = logdensity.history_log_likelihoods(grid, user.history, noise)
    with np.errstate(divide="ignore"):
        logits = np.log(oracle.probs) + log_g
    cond = logdensity.ConditionalDensity(softmax(logits), oracle.context_index)
    return arm_optimality_probs(cond, grid).sample(rng)


# **********************************************************
# Information-directed sampling.
# **********************************************************
def gids_per_arm_regret(
    posterior_over_mu: logdensity.ConditionalDensity, grid: kernel_basis.Grid
) -> np.ndarray:
    """Expected gap to the pointwise best arm, per arm."""
    gaps = grid.mu_points.max(axis=1, keepdims=True) - grid.mu_points
    return np.maximum(posterior_over_mu.probs @ gaps, 0.0)


def _user_particle_densities(
    posterior: smc.MetaPosterior,
    user: logdensity.UserRecord,
    noise: logdensity.NoiseModel,
) -> np.ndarray:
    log_g = logdensity.history_log_likelihoods(posterior.grid, user.history, noise)
    return logdensity.posterior_probs(posterior.log_density_slices(user.context_index), log_g)


def _information_gain(
    weights: np.ndarray,
    densities: np.ndarray,
    mu_arm: np.ndarray,
    rewards: np.ndarray,
    sigma: float,
    particle: int,
) -> float:
    # likelihoods[s, r]: predictive density of reward r under particle s.
    likelihoods = densities @ norm.pdf(rewards[None, :], mu_arm[:, None], sigma)
    predictive = likelihoods[particle]
    total = predictive.sum()
    if not total > 0.0:
        return 0.0
    predictive = predictive / total
    updated = weights[:, None] * likelihoods
    mass = updated.sum(axis=0)
    # Rewards no particle can explain leave the weights unchanged.
    updated = np.where(mass[None, :] > 0.0, updated, weights[:, None])
    prior_entropy = entropy(weights)
    expected_entropy = float(predictive @ entropy(updated, axis=0))
    return max(prior_entropy - expected_entropy, 0.0)


def gids_per_arm_eig(
    posterior: smc.MetaPosterior,
    user: logdensity.UserRecord,
    arm: int,
    config: GIDSConfig,
    particle: int,
    noise: logdensity.NoiseModel = logdensity.NoiseModel(),
) -> float:
    """Expected drop in particle-weight entropy (nats) from pulling `arm`,
    with reward outcomes weighted by the sampled particle's predictive."""
    if not 0 <= arm < posterior.grid.n_arms:
        raise utils.InvalidInputError(f"arm {arm} out of range")
    densities = _user_particle_densities(posterior, user, noise)
    return _information_gain(
        posterior.weights,
        densities,
        posterior.grid.mu_points[:, arm],
        config.rewards(posterior.grid, noise),
        noise.sigma,
        particle,
    )


def _ratio_objective(policy: np.ndarray, delta: np.ndarray, eig: np.ndarray, eps: float) -> float:
    return float((policy @ delta) ** 2 / (policy @ eig + eps))


def _two_arm_policies(delta: np.ndarray, eig: np.ndarray, eps: float):
    """Minimisers of the ratio restricted to each pair of arms.

    On a pair the ratio is (a q + b)^2 / (c q + d), whose only interior
    stationary point is q = b / a - 2 d / c."""
    n_arms = delta.shape[0]
    for i in range(n_arms):
        for j in range(i + 1, n_arms):
            a, b = delta[i] - delta[j], delta[j]
            c, d = eig[i] - eig[j], eig[j] + eps
            weights = [0.0, 1.0]
            if a != 0.0 and c != 0.0:
                weights.append(float(np.clip(b / a - 2.0 * d / c, 0.0, 1.0)))
            for q in weights:
                policy = np.zeros(n_arms)
                policy[i], policy[j] = q, 1.0 - q
                yield policy


def gids_policy(
    delta: Sequence[float], eig: Sequence[float], config: GIDSConfig = GIDSConfig()
) -> ArmDistribution:
    """Minimises (pi.delta)^2 / (pi.eig + eps) over the simplex by exponentiated
    gradient from the uniform policy, then keeps the best two-arm policy if lower."""
    delta = np.asarray(delta, dtype=float)
    eig = np.asarray(eig, dtype=float)
    if np.any(delta < 0.0) or np.any(eig < 0.0):
        raise utils.InvalidInputError("regrets and information gains must be non-negative")
    n_arms = delta.shape[0]
    zero_regret = np.flatnonzero(delta == 0.0)
    if zero_regret.size:
        chosen = zero_regret[np.argmax(eig[zero_regret])]
        return ArmDistribution(np.eye(n_arms)[chosen])

    eps = config.ratio_epsilon
    policy = np.full(n_arms, 1.0 / n_arms)
    best, best_value = policy, _ratio_objective(policy, delta, eig, eps)
    for _ in range(config.eg_steps):
        regret = policy @ delta
        info = policy @ eig + eps
        grad = 2.0 * regret * delta / info - regret**2 * eig / info**2
        with np.errstate(divide="ignore"):
            policy = softmax(np.log(policy) - config.eg_learning_rate * grad)
        value = _ratio_objective(policy, delta, eig, eps)
        if value < best_value:
            best, best_value = policy, value
    # Some minimiser is supported on at most two arms.
    for candidate in _two_arm_policies(delta, eig, eps):
        value = _ratio_objective(candidate, delta, eig, eps)
        if value < best_value * (1.0 - RATIO_TIE_TOL):
            best, best_value = candidate, value
    return ArmDistribution(best)


def gids_select(
    posterior: smc.MetaPosterior,
    user: logdensity.UserRecord,
    config: GIDSConfig,
    rng: np.random.Generator,
    noise: logdensity.NoiseModel = logdensity.NoiseModel(),
) -> int:
    particle, cond = _sampled_conditional(posterior, user, rng, noise)
    grid = posterior.grid
    if cond is None:
        return int(rng.integers(grid.n_arms))
    delta = gids_per_arm_regret(cond, grid)
    densities = _user_particle_densities(posterior, user, noise)
    rewards = config.rewards(grid, noise)
    eig = np.array(
        [
            _information_gain(
                posterior.weights, densities, grid.mu_points[:, arm], rewards, noise.sigma, particle
            )
            for arm in range(grid.n_arms)
        ]
    )
    return gids_policy(delta, eig, config).sample(rng)
