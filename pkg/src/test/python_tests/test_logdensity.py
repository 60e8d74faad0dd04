"""
Tests for grid densities, conditioning and history evidence.
"""
import numpy as np
import pytest
from hamcrest import assert_that, close_to, greater_than, is_

import coco_kernel_basis as kernel_basis
import coco_logdensity as logdensity
import coco_utils as utils

NOISE = logdensity.NoiseModel(0.1)


def _grid(n_arms=1, mu_points=2, mu_range=(0.0, 1.0), context_points=()):
    spec = kernel_basis.GridSpec(
        n_arms=n_arms,
        mu_range=mu_range,
        mu_points_per_dim=mu_points,
        context_ranges=tuple((-1.0, 1.0) for _ in context_points),
        context_points_per_dim=context_points,
    )
    return kernel_basis.build_grid(spec)


def test_normalize_on_grid():
    """Softmax is shift invariant and returns a simplex."""
    f = np.array([0.0, 1.0, -2.0, 3.5])
    joint = logdensity.normalize_on_grid(f)
    assert_that(joint.probs.sum(), close_to(1.0, 1e-12))
    np.testing.assert_allclose(logdensity.normalize_on_grid(f + 100.0).probs, joint.probs)
    np.testing.assert_allclose(logdensity.normalize_on_grid(np.zeros(4)).probs, 0.25)


def test_normalize_on_grid_large_values():
    """Values around 1e3 stay finite."""
    joint = logdensity.normalize_on_grid([1000.0, 999.0, 1001.0])
    assert_that(bool(np.all(np.isfinite(joint.probs))), is_(True))


def test_normalize_on_grid_rejects_non_finite():
    """NaN or infinite values are invalid input."""
    with pytest.raises(utils.InvalidInputError):
        logdensity.normalize_on_grid([0.0, np.nan])
    with pytest.raises(utils.InvalidInputError):
        logdensity.normalize_on_grid([0.0, np.inf])


def test_condition_on_context_matches_slice_softmax():
    """Conditioning the joint on a context equals the softmax of that slice of f."""
    grid = _grid(n_arms=2, mu_points=3, context_points=(4,))
    f = np.random.default_rng(2).normal(size=grid.n_points)
    joint = logdensity.normalize_on_grid(f)
    for context in range(grid.n_contexts):
        cond = logdensity.condition_on_context(joint, grid, context)
        direct = logdensity.conditional_from_log_density(f[grid.mu_slice(context)], context)
        np.testing.assert_allclose(cond.probs, direct.probs, rtol=1e-12)
        assert_that(cond.probs.sum(), close_to(1.0, 1e-10))


def test_condition_on_context_zero_mass():
    """A context slice with no mass is degenerate."""
    grid = _grid(n_arms=1, mu_points=2, context_points=(2,))
    joint = logdensity.JointDensity(np.array([0.5, 0.5, 0.0, 0.0]))
    with pytest.raises(utils.DegenerateConditionalError):
        logdensity.condition_on_context(joint, grid, 1)
    with pytest.raises(IndexError):
        logdensity.condition_on_context(joint, grid, 2)


def test_single_observation_likelihood():
    """One observation at the grid mean gives 1 / (sigma sqrt(2 pi))."""
    grid = _grid(mu_range=(0.0, 1.0))
    history = logdensity.History.from_pairs([(0, 0.0)])
    g = logdensity.history_point_likelihoods(grid, history, NOISE)
    assert_that(g.values[0], close_to(3.98942280401, 1e-9))
    assert_that(g.scaled[0], close_to(1.0, 1e-15))


def test_likelihood_ratio_two_observations():
    """g(0) / g(1) for rewards 0.2 and 0.1 matches the hand product."""
    grid = _grid(mu_range=(0.0, 1.0))
    history = logdensity.History.from_pairs([(0, 0.2), (0, 0.1)])
    g = logdensity.history_point_likelihoods(grid, history, NOISE)
    expected = np.exp((-(0.04 + 0.01) + (0.64 + 0.81)) / (2 * 0.01))
    assert_that(g.log_values[0] - g.log_values[1], close_to(np.log(expected), 1e-9))


def test_empty_history_likelihood_is_one():
    """No observations give g = 1 everywhere."""
    grid = _grid(n_arms=2, mu_points=3)
    g = logdensity.history_point_likelihoods(grid, logdensity.History(), NOISE)
    np.testing.assert_allclose(g.values, 1.0)


def test_history_arm_out_of_range():
    """Arms outside [0, K) are rejected."""
    grid = _grid(n_arms=2, mu_points=3)
    with pytest.raises(utils.InvalidInputError):
        logdensity.history_point_likelihoods(grid, logdensity.History.from_pairs([(2, 0.0)]), NOISE)


def test_history_append_and_head():
    """History values are immutable and extend by copy."""
    history = logdensity.History.from_pairs([(0, 1.0)])
    longer = history.append(1, 2.0)
    assert_that(len(history), is_(1))
    assert_that(len(longer), is_(2))
    assert_that(longer.head(1).rewards, is_((1.0,)))
    with pytest.raises(utils.InvalidInputError):
        logdensity.History((0, 1), (0.5,))


def test_marginal_likelihood_two_points():
    """Uniform conditional on {0, 1}, one reward at 0: evidence is the mean pdf."""
    grid = _grid(mu_range=(0.0, 1.0))
    cond = logdensity.ConditionalDensity(np.array([0.5, 0.5]))
    g = logdensity.history_point_likelihoods(grid, logdensity.History.from_pairs([(0, 0.0)]), NOISE)
    expected = 0.5 * (3.98942280401 + 3.98942280401 * np.exp(-50.0))
    assert_that(logdensity.marginal_likelihood(cond, g), close_to(expected, 1e-9))


def test_marginal_likelihood_of_empty_history_is_one():
    """An empty history has evidence 1."""
    grid = _grid(n_arms=2, mu_points=3)
    cond = logdensity.ConditionalDensity(np.full(9, 1.0 / 9.0))
    g = logdensity.history_point_likelihoods(grid, logdensity.History(), NOISE)
    assert_that(logdensity.marginal_likelihood(cond, g), close_to(1.0, 1e-12))


def test_log_marginal_likelihood_does_not_underflow():
    """Far-away rewards still give a finite log evidence."""
    grid = _grid(mu_range=(0.0, 1.0))
    cond = logdensity.ConditionalDensity(np.array([0.5, 0.5]))
    history = logdensity.History.from_pairs([(0, 40.0)] * 5)
    g = logdensity.history_point_likelihoods(grid, history, NOISE)
    value = logdensity.log_marginal_likelihood(cond, g)
    assert_that(bool(np.isfinite(value)), is_(True))
    assert_that(logdensity.marginal_likelihood(cond, g), is_(0.0))


def test_evidence_chain_rule():
    """P(H1, H2) = P(H1) P(H2 | H1) within 1e-10 relative."""
    grid = _grid(n_arms=2, mu_points=5, mu_range=(-1.0, 1.0))
    rng = np.random.default_rng(11)
    cond = logdensity.ConditionalDensity(rng.dirichlet(np.ones(grid.n_mu_points)))
    first = logdensity.History.from_pairs([(0, 0.3), (1, -0.2)])
    second = logdensity.History.from_pairs([(1, 0.1), (0, 0.5)])
    g_first = logdensity.history_point_likelihoods(grid, first, NOISE)
    g_second = logdensity.history_point_likelihoods(grid, second, NOISE)
    g_both = logdensity.history_point_likelihoods(grid, first.concat(second), NOISE)
    posterior = logdensity.condition_on_history(cond, g_first)
    joint = logdensity.log_marginal_likelihood(cond, g_both)
    chained = logdensity.log_marginal_likelihood(cond, g_first) + logdensity.log_marginal_likelihood(
        posterior, g_second
    )
    assert_that(np.exp(joint - chained), close_to(1.0, 1e-10))


def test_sequential_conditioning_matches_batch():
    """Conditioning on H1 then H2 equals conditioning on H1 ++ H2."""
    grid = _grid(n_arms=2, mu_points=4, mu_range=(-1.0, 1.0))
    cond = logdensity.ConditionalDensity(np.full(grid.n_mu_points, 1.0 / grid.n_mu_points))
    first = logdensity.History.from_pairs([(0, 0.5)])
    second = logdensity.History.from_pairs([(1, -0.4), (1, -0.2)])
    stepwise = logdensity.condition_on_history(
        logdensity.condition_on_history(
            cond, logdensity.history_point_likelihoods(grid, first, NOISE)
        ),
        logdensity.history_point_likelihoods(grid, second, NOISE),
    )
    batch = logdensity.condition_on_history(
        cond, logdensity.history_point_likelihoods(grid, first.concat(second), NOISE)
    )
    np.testing.assert_allclose(stepwise.probs, batch.probs, rtol=1e-10, atol=1e-14)


def test_condition_on_history_uniform_two_points():
    """One reward at 0 on {0, 1} puts almost all mass on 0."""
    grid = _grid(mu_range=(0.0, 1.0))
    cond = logdensity.ConditionalDensity(np.array([0.5, 0.5]))
    g = logdensity.history_point_likelihoods(grid, logdensity.History.from_pairs([(0, 0.0)]), NOISE)
    posterior = logdensity.condition_on_history(cond, g)
    assert_that(posterior.probs[0], close_to(1.0, 1e-20))
    assert_that(posterior.probs[1], close_to(np.exp(-50.0), 1e-30))


def test_condition_on_history_concentrates():
    """Fifty rewards at 0.5 on {0, 0.5, 1} leave mass > 1 - 1e-6 at 0.5."""
    grid = _grid(mu_points=3, mu_range=(0.0, 1.0))
    cond = logdensity.ConditionalDensity(np.full(3, 1.0 / 3.0))
    g = logdensity.history_point_likelihoods(
        grid, logdensity.History.from_pairs([(0, 0.5)] * 50), NOISE
    )
    posterior = logdensity.condition_on_history(cond, g)
    assert_that(posterior.probs[1], greater_than(1.0 - 1e-6))


def test_condition_on_history_zero_evidence():
    """Support disjoint from the likelihood is degenerate."""
    cond = logdensity.ConditionalDensity(np.array([1.0, 0.0]))
    g = logdensity.PointLikelihoods(np.array([-np.inf, 0.0]), 0.0)
    with pytest.raises(utils.DegenerateConditionalError):
        logdensity.condition_on_history(cond, g)


def test_vectorised_evidence_matches_scalar():
    """log_evidences and posterior_probs agree with the one-particle functions."""
    grid = _grid(n_arms=2, mu_points=4, mu_range=(-1.0, 1.0))
    rng = np.random.default_rng(5)
    f_slices = rng.normal(size=(3, grid.n_mu_points))
    history = logdensity.History.from_pairs([(0, 0.2), (1, 0.9)])
    g = logdensity.history_point_likelihoods(grid, history, NOISE)
    evidences = logdensity.log_evidences(f_slices, g.log_values)
    posteriors = logdensity.posterior_probs(f_slices, g.log_values)
    for row in range(3):
        cond = logdensity.conditional_from_log_density(f_slices[row])
        assert_that(evidences[row], close_to(logdensity.log_marginal_likelihood(cond, g), 1e-10))
        np.testing.assert_allclose(
            posteriors[row], logdensity.condition_on_history(cond, g).probs, rtol=1e-10
        )


def test_noise_model_rejects_non_positive_sigma():
    """sigma must be positive."""
    with pytest.raises(utils.ConfigurationError):
        logdensity.NoiseModel(0.0)
