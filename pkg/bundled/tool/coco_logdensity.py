"""Discrete densities on the grid: softmax normalisation, conditioning on an
observed context and on a user's reward history, and history evidence.

Gaussian likelihood products are accumulated in log space; point likelihoods
carry their max shift so evidence can be reported either absolutely or as a log.
"""
from __future__ import annotations

from typing import Iterable, Optional, Sequence, Tuple

import attrs
import numpy as np
from scipy.special import logsumexp, softmax
from scipy.stats import norm

import coco_kernel_basis as kernel_basis
import coco_utils as utils

SIMPLEX_TOL = 1e-10


def _as_probs(value) -> np.ndarray:
    probs = np.asarray(value, dtype=float)
    probs.setflags(write=False)
    return probs


@attrs.frozen(eq=False)
class JointDensity:
    """Normalised density over all L grid points."""

    probs: np.ndarray = attrs.field(converter=_as_probs)


@attrs.frozen(eq=False)
class ConditionalDensity:
    """Normalised density over the mu-subgrid of one context."""

    probs: np.ndarray = attrs.field(converter=_as_probs)
    context_index: int = 0


def _positive_sigma(_instance, _attribute, value):
    if not value > 0:
        raise utils.ConfigurationError(f"noise sigma must be positive, got {value}", field="noise_sigma")


@attrs.frozen
class NoiseModel:
    sigma: float = attrs.field(default=0.1, converter=float, validator=_positive_sigma)

    @property
    def variance(self) -> float:
        return self.sigma**2


@attrs.frozen(eq=False)
class History:
    """Ordered (arm, reward) observations of one user."""

    arms: Tuple[int, ...] = attrs.field(default=(), converter=lambda v: tuple(int(a) for a in v))
    rewards: Tuple[float, ...] = attrs.field(
        default=(), converter=lambda v: tuple(float(r) for r in v)
    )

    def __attrs_post_init__(self):
        if len(self.arms) != len(self.rewards):
            raise utils.InvalidInputError("history arms and rewards differ in length")

    @classmethod
    def from_pairs(cls, pairs: Iterable[Tuple[int, float]]) -> "History":
        pairs = list(pairs)
        return cls([a for a, _ in pairs], [r for _, r in pairs])

    def __len__(self) -> int:
        return len(self.arms)

    def append(self, arm: int, reward: float) -> "History":
        return History(self.arms + (int(arm),), self.rewards + (float(reward),))

    def concat(self, other: "History") -> "History":
        return History(self.arms + other.arms, self.rewards + other.rewards)

    def head(self, length: int) -> "History":
        return History(self.arms[:length], self.rewards[:length])


@attrs.define
class UserRecord:
    """What a policy may see about a user: observed context and own history."""

    user_id: int
    x_obs: Tuple[float, ...]
    context_index: int
    history: History = attrs.field(factory=History)
    counter: int = 0
    active: bool = True


@attrs.frozen(eq=False)
class PointLikelihoods:
    """Per mu-grid-point history likelihoods g, stored as log values.

    `scaled` is exp(log_values - shift) with shift = max(log_values), so the
    absolute values are exp(shift) * scaled.
    """

    log_values: np.ndarray
    shift: float

    @property
    def scaled(self) -> np.ndarray:
        return np.exp(self.log_values - self.shift)

    @property
    def values(self) -> np.ndarray:
        return np.exp(self.log_values)


def normalize_on_grid(f_values: Sequence[float]) -> JointDensity:
    """Softmax of the log-density values over the grid."""
    f_values = np.asarray(f_values, dtype=float)
    if not np.all(np.isfinite(f_values)):
        raise utils.InvalidInputError("log-density values must be finite")
    return JointDensity(softmax(f_values))


def condition_on_context(
    joint: JointDensity, grid: kernel_basis.Grid, context_index: int
) -> ConditionalDensity:
    """Restricts the joint to one context's mu-subgrid and renormalises."""
    if not 0 <= context_index < grid.n_contexts:
        raise IndexError(f"context index {context_index} out of range")
    block = joint.probs[grid.mu_slice(context_index)]
    mass = block.sum()
    if not mass > 0.0:
        raise utils.DegenerateConditionalError(
            f"context {context_index} carries no probability mass"
        )
    return ConditionalDensity(block / mass, context_index)


def conditional_from_log_density(
    f_slice: np.ndarray, context_index: int = 0
) -> ConditionalDensity:
    """Conditional on a context straight from that context's slice of f."""
    f_slice = np.asarray(f_slice, dtype=float)
    if not np.all(np.isfinite(f_slice)):
        raise utils.DegenerateConditionalError("log-density slice is not finite")
    return ConditionalDensity(softmax(f_slice), context_index)


def history_log_likelihoods(
    grid: kernel_basis.Grid, history: History, noise: NoiseModel
) -> np.ndarray:
    """log g over the mu-subgrid: sum of Gaussian log-densities of the history."""
    if len(history) == 0:
        return np.zeros(grid.n_mu_points)
    arms = np.asarray(history.arms)
    if arms.min() < 0 or arms.max() >= grid.n_arms:
        raise utils.InvalidInputError(f"history arm out of range [0, {grid.n_arms})")
    rewards = np.asarray(history.rewards)
    return norm.logpdf(rewards[None, :], grid.mu_points[:, arms], noise.sigma).sum(axis=1)


def history_point_likelihoods(
    grid: kernel_basis.Grid, history: History, noise: NoiseModel
) -> PointLikelihoods:
    """g_l = prod over the history of N(r; mu_{l,a}, sigma^2), kept in log space."""
    log_values = history_log_likelihoods(grid, history, noise)
    return PointLikelihoods(log_values, float(np.max(log_values)))


def log_marginal_likelihood(cond: ConditionalDensity, g: PointLikelihoods) -> float:
    """log sum_l cond_l g_l; -inf when the evidence is zero."""
    if cond.probs.shape != g.log_values.shape:
        raise utils.InvalidInputError("density and likelihood lengths differ")
    total = float(np.dot(cond.probs, g.scaled))
    return g.shift + np.log(total) if total > 0.0 else -np.inf


def marginal_likelihood(cond: ConditionalDensity, g: PointLikelihoods) -> float:
    """Grid-sum evidence sum_l cond_l g_l of the history under the conditional."""
    return float(np.exp(log_marginal_likelihood(cond, g)))


def condition_on_history(cond: ConditionalDensity, g: PointLikelihoods) -> ConditionalDensity:
    """Bayes' rule on the grid: posterior_l proportional to cond_l g_l."""
    if cond.probs.shape != g.log_values.shape:
        raise utils.InvalidInputError("density and likelihood lengths differ")
    weighted = cond.probs * g.scaled
    total = weighted.sum()
    if not total > 0.0:
        raise utils.DegenerateConditionalError("history has zero evidence under the density")
    return ConditionalDensity(weighted / total, cond.context_index)


# **********************************************************
# Vectorised forms over a stack of particles.
# **********************************************************
def log_evidences(f_slices: np.ndarray, log_g: np.ndarray) -> np.ndarray:
    """log P(H | x) for each row of log-density slices (particles x mu-points)."""
    f_slices = np.atleast_2d(f_slices)
    return logsumexp(f_slices + log_g[None, :], axis=1) - logsumexp(f_slices, axis=1)


def posterior_probs(f_slices: np.ndarray, log_g: Optional[np.ndarray] = None) -> np.ndarray:
    """History-conditioned densities for each row of log-density slices."""
    f_slices = np.atleast_2d(f_slices)
    logits = f_slices if log_g is None else f_slices + log_g[None, :]
    return softmax(logits, axis=1)
