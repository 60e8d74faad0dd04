"""Particle approximation of the meta-posterior over log-densities.

Each particle is a KL coefficient vector xi; its log-density on the grid is
``basis.scaled_vectors @ xi``. New observations reweight the particles by their
evidence increment; when the effective sample size drops, particles are
resampled systematically and moved with MALA against the (tempered) posterior
over all accumulated user histories.
"""
from __future__ import annotations

from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import attrs
import numpy as np
from scipy.optimize import bisect
from scipy.special import logsumexp, softmax

import coco_kernel_basis as kernel_basis
import coco_logdensity as logdensity
import coco_utils as utils

TargetFn = Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]]

# Adapted Langevin steps stay within this factor of the configured one.
STEP_ADAPTATION_RANGE = 1e3


def _in_unit_interval(_instance, attribute, value):
    if not 0.0 < value < 1.0:
        raise utils.ConfigurationError(
            f"{attribute.name} must lie in (0, 1), got {value}", field=f"smc.{attribute.name}"
        )


def _at_least_one(_instance, attribute, value):
    if value < 1:
        raise utils.ConfigurationError(
            f"{attribute.name} must be >= 1, got {value}", field=f"smc.{attribute.name}"
        )


def _positive(_instance, attribute, value):
    if not value > 0:
        raise utils.ConfigurationError(
            f"{attribute.name} must be positive, got {value}", field=f"smc.{attribute.name}"
        )


def _non_negative(_instance, attribute, value):
    if value < 0:
        raise utils.ConfigurationError(
            f"{attribute.name} must be >= 0, got {value}", field=f"smc.{attribute.name}"
        )


@attrs.frozen
class SMCConfig:
    n_particles: int = attrs.field(default=200, validator=_at_least_one)
    ess_threshold: float = attrs.field(default=0.5, validator=_in_unit_interval)
    langevin_step: float = attrs.field(default=0.05, validator=_positive)
    n_max: int = attrs.field(default=5, validator=_at_least_one)
    mcmc_steps: int = attrs.field(default=5, validator=_at_least_one)
    temper_target: float = attrs.field(default=0.5, validator=_in_unit_interval)
    collapse_sweeps: int = attrs.field(default=20, validator=_at_least_one)
    # Force a resample/rejuvenation pass every k-th update; 0 disables.
    resample_every: int = attrs.field(default=5, validator=_non_negative)
    # Rescale the Langevin step after every MALA sweep towards target_acceptance.
    adapt_step: bool = True
    target_acceptance: float = attrs.field(default=0.574, validator=_in_unit_interval)


@attrs.frozen(eq=False)
class UserData:
    """One user's contribution to the target: weight * log P(history | context)."""

    context_index: int
    history: logdensity.History
    weight: float = 1.0


@attrs.frozen(eq=False)
class Observation:
    """A user whose last `n_new` history entries have not been absorbed yet."""

    context_index: int
    history: logdensity.History
    n_new: int = 1

    @property
    def previous(self) -> logdensity.History:
        return self.history.head(len(self.history) - self.n_new)


@attrs.define
class UpdateDiagnostics:
    ess_before: float = 0.0
    ess_after: float = 0.0
    stages: int = 0
    rejuvenations: int = 0
    acceptance_rate: float = float("nan")
    langevin_step: float = float("nan")
    beta: float = 1.0
    collapsed: bool = False


class LogDensityCache:
    """Per-context log-density slices of every particle, recomputed lazily."""

    def __init__(self, basis: kernel_basis.KLBasis):
        self._basis = basis
        self._values: Dict[int, np.ndarray] = {}
        self._stale: Dict[int, np.ndarray] = {}

    def slices(self, particles: np.ndarray, context_index: int) -> np.ndarray:
        if context_index not in self._values:
            self._values[context_index] = kernel_basis.eval_particles(
                particles, self._basis, context_index
            )
            self._stale[context_index] = np.zeros(particles.shape[0], dtype=bool)
        stale = self._stale[context_index]
        if stale.any():
            self._values[context_index][stale] = kernel_basis.eval_particles(
                particles[stale], self._basis, context_index
            )
            stale[:] = False
        return self._values[context_index]

    def invalidate(self, rows: np.ndarray) -> None:
        for stale in self._stale.values():
            stale |= rows

    def take(self, indices: np.ndarray) -> None:
        for key in self._values:
            self._values[key] = self._values[key][indices]
            self._stale[key] = self._stale[key][indices]

    def clear(self) -> None:
        self._values.clear()
        self._stale.clear()


@attrs.define(eq=False)
class MetaPosterior:
    particles: np.ndarray
    weights: np.ndarray
    basis: kernel_basis.KLBasis
    rng: np.random.Generator
    cache: LogDensityCache
    n_updates: int = 0
    # Current MALA step; None until the first rejuvenation.
    langevin_step: Optional[float] = None
    last_ancestors: Optional[np.ndarray] = None
    diagnostics: List[UpdateDiagnostics] = attrs.field(factory=list)

    @property
    def n_particles(self) -> int:
        return self.particles.shape[0]

    @property
    def grid(self) -> kernel_basis.Grid:
        return self.basis.grid

    def log_density_slices(self, context_index: int) -> np.ndarray:
        return self.cache.slices(self.particles, context_index)


def init_posterior(
    basis: kernel_basis.KLBasis, config: SMCConfig, seed: Union[int, np.random.SeedSequence]
) -> MetaPosterior:
    """N standard-normal coefficient vectors with uniform weights."""
    rng = np.random.default_rng(seed)
    particles = rng.standard_normal((config.n_particles, basis.n_components))
    weights = np.full(config.n_particles, 1.0 / config.n_particles)
    return MetaPosterior(particles, weights, basis, rng, LogDensityCache(basis))


# **********************************************************
# Weights.
# **********************************************************
def effective_sample_size(weights: np.ndarray) -> float:
    return float(1.0 / np.sum(np.square(weights)))


def reweight(posterior: MetaPosterior, per_particle_likelihoods: np.ndarray) -> MetaPosterior:
    """w <- normalize(w * likelihood)."""
    likelihoods = np.asarray(per_particle_likelihoods, dtype=float)
    if np.any(likelihoods < 0.0):
        raise utils.InvalidInputError("likelihoods must be non-negative")
    updated = posterior.weights * likelihoods
    total = updated.sum()
    if not (np.isfinite(total) and total > 0.0):
        raise utils.EvidenceCollapseError("all particle likelihoods are zero")
    posterior.weights = updated / total
    return posterior


def _tempered(log_likelihoods: np.ndarray, delta: float) -> np.ndarray:
    if delta == 0.0:
        return np.zeros_like(log_likelihoods)
    return delta * log_likelihoods


def reweight_log(posterior: MetaPosterior, log_likelihoods: np.ndarray) -> MetaPosterior:
    """`reweight` in log space, for increments that underflow as plain numbers."""
    log_likelihoods = np.where(np.isnan(log_likelihoods), -np.inf, log_likelihoods)
    with np.errstate(divide="ignore"):
        log_weights = np.log(posterior.weights) + log_likelihoods
    if not np.any(np.isfinite(log_weights)):
        raise utils.EvidenceCollapseError("all particle log-likelihoods are -inf")
    posterior.weights = softmax(log_weights)
    return posterior


def systematic_resample_indices(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Ancestor indices from one uniform offset and stride 1/N."""
    count = weights.shape[0]
    positions = (rng.uniform() + np.arange(count)) / count
    cumulative = np.cumsum(weights)
    cumulative[-1] = 1.0
    return np.minimum(np.searchsorted(cumulative, positions, side="right"), count - 1)


def systematic_resample(
    posterior: MetaPosterior, rng: Optional[np.random.Generator] = None
) -> MetaPosterior:
    indices = systematic_resample_indices(posterior.weights, rng or posterior.rng)
    posterior.particles = posterior.particles[indices]
    posterior.weights = np.full(posterior.n_particles, 1.0 / posterior.n_particles)
    posterior.cache.take(indices)
    posterior.last_ancestors = indices
    return posterior


# **********************************************************
# Target.
# **********************************************************
class _PreparedDataset:
    """Log point likelihoods of every weighted history, grouped by context."""

    def __init__(
        self,
        dataset: Sequence[UserData],
        grid: kernel_basis.Grid,
        noise: logdensity.NoiseModel,
    ):
        self.groups: Dict[int, List[Tuple[float, np.ndarray]]] = {}
        for entry in dataset:
            if len(entry.history) == 0 or entry.weight == 0.0:
                continue
            log_g = logdensity.history_log_likelihoods(grid, entry.history, noise)
            self.groups.setdefault(entry.context_index, []).append((entry.weight, log_g))


def _batch_log_target_and_grad(
    particles: np.ndarray,
    basis: kernel_basis.KLBasis,
    prepared: _PreparedDataset,
    beta: float,
) -> Tuple[np.ndarray, np.ndarray]:
    log_target = -0.5 * np.sum(np.square(particles), axis=1)
    grad = -particles.copy()
    if beta == 0.0:
        return log_target, grad
    for context_index in sorted(prepared.groups):
        vectors = basis.context_vectors(context_index)
        f_slices = particles @ vectors.T
        log_norm = logsumexp(f_slices, axis=1)
        prior = np.exp(f_slices - log_norm[:, None])
        posterior_mass = np.zeros_like(f_slices)
        total_weight = 0.0
        for weight, log_g in prepared.groups[context_index]:
            shifted = f_slices + log_g[None, :]
            log_joint = logsumexp(shifted, axis=1)
            log_target += beta * weight * (log_joint - log_norm)
            posterior_mass += weight * np.exp(shifted - log_joint[:, None])
            total_weight += weight
        # d/dxi log P(H | x) = A^T (posterior - prior) for f = A xi.
        grad += beta * (posterior_mass - total_weight * prior) @ vectors
    return log_target, grad


def make_target(
    basis: kernel_basis.KLBasis,
    dataset: Sequence[UserData],
    noise: logdensity.NoiseModel,
    beta: float = 1.0,
) -> TargetFn:
    """Batched log pi_beta and gradient over rows of a particle matrix."""
    prepared = _PreparedDataset(dataset, basis.grid, noise)

    def _target(particles: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return _batch_log_target_and_grad(np.atleast_2d(particles), basis, prepared, beta)

    return _target


def log_target_and_grad(
    xi: np.ndarray,
    basis: kernel_basis.KLBasis,
    dataset: Sequence[UserData],
    noise: logdensity.NoiseModel = logdensity.NoiseModel(),
    beta: float = 1.0,
) -> Tuple[float, np.ndarray]:
    """log pi(xi) = -|xi|^2/2 + beta * sum_users log P(H_u | x_u), up to a constant."""
    log_target, grad = make_target(basis, dataset, noise, beta)(np.asarray(xi, dtype=float))
    return float(log_target[0]), grad[0]


# **********************************************************
# MALA.
# **********************************************************
def mala_log_acceptance_ratio(
    xi: np.ndarray,
    proposal: np.ndarray,
    log_target: np.ndarray,
    grad: np.ndarray,
    log_target_proposal: np.ndarray,
    grad_proposal: np.ndarray,
    step: float,
) -> np.ndarray:
    """log of pi(xi') q(xi | xi') / (pi(xi) q(xi' | xi)) for the Langevin proposal."""
    forward = proposal - xi - 0.5 * step * grad
    backward = xi - proposal - 0.5 * step * grad_proposal
    log_q_ratio = (np.sum(forward**2, axis=-1) - np.sum(backward**2, axis=-1)) / (2.0 * step)
    return log_target_proposal - log_target + log_q_ratio


def _mala_transition(
    particles: np.ndarray,
    log_target: np.ndarray,
    grad: np.ndarray,
    target: TargetFn,
    step: float,
    rng: np.random.Generator,
):
    noise = rng.standard_normal(particles.shape)
    proposal = particles + 0.5 * step * grad + np.sqrt(step) * noise
    log_target_proposal, grad_proposal = target(proposal)
    log_alpha = mala_log_acceptance_ratio(
        particles, proposal, log_target, grad, log_target_proposal, grad_proposal, step
    )
    log_alpha = np.where(np.isfinite(log_alpha), log_alpha, -np.inf)
    accepted = np.log(rng.uniform(size=particles.shape[0])) < log_alpha
    return (
        np.where(accepted[:, None], proposal, particles),
        accepted,
        np.where(accepted, log_target_proposal, log_target),
        np.where(accepted[:, None], grad_proposal, grad),
    )


def mala_step(
    xi: np.ndarray, target: TargetFn, step: float, rng: np.random.Generator
) -> Tuple[np.ndarray, Union[bool, np.ndarray]]:
    """One MALA move; `xi` may be one vector or a stack of independent chains.

    `target` maps an (n, M) array to (log pi, grad log pi) row by row.
    """
    if not step > 0:
        raise utils.InvalidInputError(f"Langevin step must be positive, got {step}")
    xi = np.asarray(xi, dtype=float)
    batch = np.atleast_2d(xi)
    log_target, grad = target(batch)
    moved, accepted, _, _ = _mala_transition(batch, log_target, grad, target, step, rng)
    if xi.ndim == 1:
        return moved[0], bool(accepted[0])
    return moved, accepted


def adapted_step(step: float, acceptance: float, config: SMCConfig) -> float:
    """Next MALA step after a sweep with the given population acceptance rate."""
    if not config.adapt_step:
        return step
    scaled = step * float(np.exp(acceptance - config.target_acceptance))
    low = config.langevin_step / STEP_ADAPTATION_RANGE
    high = config.langevin_step * STEP_ADAPTATION_RANGE
    return float(np.clip(scaled, low, high))


def _rejuvenate(posterior: MetaPosterior, target: TargetFn, config: SMCConfig) -> float:
    # The step is fixed within a sweep and adapts between sweeps.
    step = posterior.langevin_step or config.langevin_step
    particles = posterior.particles
    log_target, grad = target(particles)
    moved = np.zeros(particles.shape[0], dtype=bool)
    accepted_total = 0
    for _ in range(config.mcmc_steps):
        particles, accepted, log_target, grad = _mala_transition(
            particles, log_target, grad, target, step, posterior.rng
        )
        moved |= accepted
        accepted_total += int(accepted.sum())
        step = adapted_step(step, float(accepted.mean()), config)
    posterior.particles = particles
    posterior.langevin_step = step
    posterior.cache.invalidate(moved)
    return accepted_total / (config.mcmc_steps * particles.shape[0])


# **********************************************************
# Tempering.
# **********************************************************
def adaptive_beta_schedule(
    posterior: MetaPosterior,
    incremental_loglik: np.ndarray,
    temper_target: float,
    beta_prev: float = 0.0,
) -> float:
    """Next inverse temperature: the ESS after reweighting by
    exp((beta - beta_prev) * loglik) hits temper_target * N, or 1 if it never drops
    that low."""
    if not 0.0 <= beta_prev < 1.0:
        raise utils.InvalidInputError(f"beta_prev must lie in [0, 1), got {beta_prev}")
    loglik = np.where(np.isnan(incremental_loglik), -np.inf, incremental_loglik)
    with np.errstate(divide="ignore"):
        log_weights = np.log(posterior.weights)
    goal = temper_target * posterior.n_particles

    def _ess_gap(beta: float) -> float:
        weights = softmax(log_weights + _tempered(loglik, beta - beta_prev))
        return effective_sample_size(weights) - goal

    if _ess_gap(1.0) >= 0.0 or _ess_gap(beta_prev) <= 0.0:
        return 1.0
    return float(bisect(_ess_gap, beta_prev, 1.0, xtol=1e-12))


# **********************************************************
# Update.
# **********************************************************
def incremental_log_likelihoods(
    posterior: MetaPosterior,
    observations: Sequence[Observation],
    noise: logdensity.NoiseModel,
) -> np.ndarray:
    """Per-particle log P(new rewards | context, earlier history), summed over users."""
    total = np.zeros(posterior.n_particles)
    for obs in observations:
        f_slices = posterior.log_density_slices(obs.context_index)
        full = logdensity.history_log_likelihoods(posterior.grid, obs.history, noise)
        previous = logdensity.history_log_likelihoods(posterior.grid, obs.previous, noise)
        total += logdensity.log_evidences(f_slices, full) - logdensity.log_evidences(
            f_slices, previous
        )
    return total


def _tempered_dataset(
    dataset: Sequence[UserData], observations: Sequence[Observation], beta: float
) -> List[UserData]:
    # Newest rewards enter with exponent beta: beta*log P(full) + (1-beta)*log P(previous).
    entries = list(dataset)
    if beta < 1.0:
        for obs in observations:
            entries.append(UserData(obs.context_index, obs.history, beta - 1.0))
            entries.append(UserData(obs.context_index, obs.previous, 1.0 - beta))
    return entries


def _recover_from_collapse(
    posterior: MetaPosterior,
    dataset: Sequence[UserData],
    config: SMCConfig,
    noise: logdensity.NoiseModel,
) -> UpdateDiagnostics:
    """Tempered restart from the prior over the full dataset."""
    utils.log_warning("Evidence collapse: restarting particles from the prior with tempering")
    posterior.particles = posterior.rng.standard_normal(posterior.particles.shape)
    posterior.weights = np.full(posterior.n_particles, 1.0 / posterior.n_particles)
    posterior.cache.clear()
    full = _PreparedDataset(dataset, posterior.grid, noise)
    diagnostics = UpdateDiagnostics(collapsed=True, beta=0.0)
    beta = 0.0
    for sweep in range(config.collapse_sweeps):
        loglik, _ = _batch_log_target_and_grad(posterior.particles, posterior.basis, full, 1.0)
        loglik += 0.5 * np.sum(np.square(posterior.particles), axis=1)
        next_beta = (
            1.0
            if sweep == config.collapse_sweeps - 1
            else adaptive_beta_schedule(posterior, loglik, config.temper_target, beta)
        )
        reweight_log(posterior, _tempered(loglik, next_beta - beta))
        beta = next_beta
        systematic_resample(posterior)
        diagnostics.acceptance_rate = _rejuvenate(
            posterior, make_target(posterior.basis, dataset, noise, beta), config
        )
        diagnostics.rejuvenations += 1
        if beta >= 1.0:
            break
    diagnostics.beta = beta
    diagnostics.langevin_step = posterior.langevin_step
    loglik, _ = _batch_log_target_and_grad(posterior.particles, posterior.basis, full, 1.0)
    if not np.any(np.isfinite(loglik)):
        raise utils.EvidenceCollapseError(
            f"evidence collapsed again after {diagnostics.rejuvenations} tempered sweeps"
        )
    return diagnostics


def smc_update(
    posterior: MetaPosterior,
    observations: Union[Observation, Sequence[Observation]],
    dataset: Sequence[UserData],
    config: SMCConfig,
    noise: logdensity.NoiseModel = logdensity.NoiseModel(),
) -> MetaPosterior:
    """Absorbs new rewards into the particle approximation.

    `dataset` holds every user's full history, new rewards included. The repeat
    loop runs at most `n_max` stages; each stage raises the exponent of the new
    evidence to the next adaptive beta (the last stage forces beta = 1), and any
    stage that leaves beta < 1 or ESS < tau N resamples and rejuvenates. The
    increments are re-evaluated at the moved particles before the next stage.
    """
    if isinstance(observations, Observation):
        observations = [observations]
    observations = [obs for obs in observations if obs.n_new > 0]
    posterior.n_updates += 1
    diagnostics = UpdateDiagnostics(ess_before=effective_sample_size(posterior.weights))
    loglik = incremental_log_likelihoods(posterior, observations, noise)
    forced = config.resample_every > 0 and posterior.n_updates % config.resample_every == 0
    threshold = config.ess_threshold * posterior.n_particles
    acceptance: List[float] = []
    beta = 0.0
    for stage in range(config.n_max):
        next_beta = (
            1.0
            if stage == config.n_max - 1
            else adaptive_beta_schedule(posterior, loglik, config.temper_target, beta)
        )
        try:
            reweight_log(posterior, _tempered(loglik, next_beta - beta))
        except utils.EvidenceCollapseError:
            diagnostics = _recover_from_collapse(posterior, dataset, config, noise)
            diagnostics.ess_after = effective_sample_size(posterior.weights)
            posterior.diagnostics.append(diagnostics)
            return posterior
        beta = next_beta
        diagnostics.stages = stage + 1
        if beta >= 1.0 and not forced and effective_sample_size(posterior.weights) >= threshold:
            break
        systematic_resample(posterior)
        target = make_target(
            posterior.basis, _tempered_dataset(dataset, observations, beta), noise
        )
        acceptance.append(_rejuvenate(posterior, target, config))
        diagnostics.rejuvenations += 1
        forced = False
        if beta >= 1.0:
            break
        loglik = incremental_log_likelihoods(posterior, observations, noise)
    diagnostics.beta = beta
    diagnostics.ess_after = effective_sample_size(posterior.weights)
    if acceptance:
        diagnostics.acceptance_rate = float(np.mean(acceptance))
        diagnostics.langevin_step = posterior.langevin_step
    posterior.diagnostics.append(diagnostics)
    utils.log_to_output(
        f"SMC update {posterior.n_updates}: ESS {diagnostics.ess_before:.1f} -> "
        f"{diagnostics.ess_after:.1f}, stages={diagnostics.stages}, "
        f"rejuvenations={diagnostics.rejuvenations}"
    )
    return posterior


def predictive_mean(
    posterior: MetaPosterior,
    context_index: int,
    history: logdensity.History,
    noise: logdensity.NoiseModel = logdensity.NoiseModel(),
) -> np.ndarray:
    """Posterior mean of the arm means under the particle mixture."""
    log_g = logdensity.history_log_likelihoods(posterior.grid, history, noise)
    f_slices = posterior.log_density_slices(context_index)
    probs = logdensity.posterior_probs(f_slices, log_g)
    return posterior.weights @ probs @ posterior.grid.mu_points
