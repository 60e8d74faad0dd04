"""Joint (arm-mean, context) grid, squared-exponential kernel and truncated
Karhunen-Loeve basis.

GP samples over the grid are represented as ``f = sum_m sqrt(lambda_m) xi_m phi_m``.
On a regular product grid the SE kernel matrix is the Kronecker product of the
per-axis kernel matrices, so eigenpairs are products of per-axis eigenpairs and
the dense L x L decomposition is never needed.
"""
from __future__ import annotations

import functools
import math
from typing import Optional, Sequence, Tuple

import attrs
import numpy as np
import scipy.linalg
from scipy.spatial.distance import cdist

import coco_utils as utils

# Largest grid for which the dense kernel matrix may be materialised.
DENSE_MAX_POINTS = 5000
EIGEN_CLAMP_TOL = 1e-10
EIGEN_RESIDUAL_TOL = 1e-8


def _as_range(value: Sequence[float]) -> Tuple[float, float]:
    low, high = value
    return (float(low), float(high))


def _as_ranges(value: Sequence[Sequence[float]]) -> Tuple[Tuple[float, float], ...]:
    return tuple(_as_range(v) for v in value)


def _as_ints(value: Sequence[int]) -> Tuple[int, ...]:
    return tuple(int(v) for v in value)


@attrs.frozen
class GridSpec:
    """Discretisation of the joint (mu, x_obs) space."""

    n_arms: int = 3
    mu_range: Tuple[float, float] = attrs.field(default=(-2.0, 2.0), converter=_as_range)
    mu_points_per_dim: int = 20
    context_ranges: Tuple[Tuple[float, float], ...] = attrs.field(
        default=((-1.0, 1.0),), converter=_as_ranges
    )
    context_points_per_dim: Tuple[int, ...] = attrs.field(
        default=(10,), converter=_as_ints
    )
    max_points: int = 100_000

    def __attrs_post_init__(self):
        if self.n_arms < 1:
            raise utils.ConfigurationError("n_arms must be positive", field="grid.n_arms")
        if len(self.context_ranges) != len(self.context_points_per_dim):
            raise utils.ConfigurationError(
                "context_ranges and context_points_per_dim differ in length",
                field="grid.context_points_per_dim",
            )
        for name, (low, high) in [("grid.mu_range", self.mu_range)] + [
            (f"grid.context_ranges[{i}]", r) for i, r in enumerate(self.context_ranges)
        ]:
            if not low < high:
                raise utils.ConfigurationError(
                    f"range [{low}, {high}] is empty", field=name
                )
        for name, count in [("grid.mu_points_per_dim", self.mu_points_per_dim)] + [
            (f"grid.context_points_per_dim[{i}]", c)
            for i, c in enumerate(self.context_points_per_dim)
        ]:
            if count < 2:
                raise utils.ConfigurationError(
                    f"need at least 2 points per dimension, got {count}", field=name
                )

    @property
    def axis_sizes(self) -> Tuple[int, ...]:
        return (self.mu_points_per_dim,) * self.n_arms + self.context_points_per_dim

    @property
    def n_points(self) -> int:
        return math.prod(self.axis_sizes)


def _product_points(axes: Sequence[np.ndarray]) -> np.ndarray:
    """Cartesian product with axis 0 varying fastest."""
    if not axes:
        return np.zeros((1, 0))
    mesh = np.meshgrid(*reversed(axes), indexing="ij")
    return np.stack([m.ravel() for m in reversed(mesh)], axis=1)


def _strides(sizes: Sequence[int]) -> np.ndarray:
    return np.concatenate([[1], np.cumprod(sizes[:-1])]).astype(int) if sizes else np.zeros(0, int)


@attrs.frozen(eq=False)
class Grid:
    """Flattened product grid; flat index l = mu_flat + L_mu * context_flat."""

    spec: GridSpec
    mu_axes: Tuple[np.ndarray, ...]
    context_axes: Tuple[np.ndarray, ...]
    mu_points: np.ndarray
    context_points: np.ndarray
    points: np.ndarray

    @property
    def n_arms(self) -> int:
        return self.spec.n_arms

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def n_mu_points(self) -> int:
        return self.mu_points.shape[0]

    @property
    def n_contexts(self) -> int:
        return self.context_points.shape[0]

    @property
    def axes(self) -> Tuple[np.ndarray, ...]:
        return self.mu_axes + self.context_axes

    @property
    def best_arm(self) -> np.ndarray:
        """Argmax arm per mu-grid point; ties go to the lowest arm index."""
        return np.argmax(self.mu_points, axis=1)

    def mu_flat_index(self, mu_multi_index: Sequence[int]) -> int:
        sizes = [len(a) for a in self.mu_axes]
        return int(np.dot(_strides(sizes), np.asarray(mu_multi_index, dtype=int)))

    def context_flat_index(self, context_multi_index: Sequence[int]) -> int:
        sizes = [len(a) for a in self.context_axes]
        if not sizes:
            return 0
        return int(np.dot(_strides(sizes), np.asarray(context_multi_index, dtype=int)))

    def flat_index(self, mu_multi_index: Sequence[int], context_index: int) -> int:
        if not 0 <= context_index < self.n_contexts:
            raise IndexError(f"context index {context_index} out of range")
        return self.mu_flat_index(mu_multi_index) + self.n_mu_points * int(context_index)

    def multi_index(self, flat: int) -> Tuple[Tuple[int, ...], int]:
        """Inverse of `flat_index`: (mu multi-index, context index)."""
        if not 0 <= flat < self.n_points:
            raise IndexError(f"flat index {flat} out of range")
        context_index, mu_flat = divmod(int(flat), self.n_mu_points)
        sizes = [len(a) for a in self.mu_axes]
        mu_multi = np.unravel_index(mu_flat, tuple(reversed(sizes)))
        return tuple(int(i) for i in reversed(mu_multi)), context_index

    def mu_slice(self, context_index: int) -> slice:
        start = self.n_mu_points * int(context_index)
        return slice(start, start + self.n_mu_points)

    def snap_context(self, x_obs: Sequence[float] | float) -> int:
        """Index of the grid context nearest to `x_obs`, axis by axis."""
        x_obs = np.atleast_1d(np.asarray(x_obs, dtype=float))
        if x_obs.shape[0] != len(self.context_axes):
            raise utils.InvalidInputError(
                f"context has {x_obs.shape[0]} dimensions, grid has {len(self.context_axes)}"
            )
        multi = [int(np.argmin(np.abs(axis - x))) for axis, x in zip(self.context_axes, x_obs)]
        return self.context_flat_index(multi)

    def snap_mu(self, mu: np.ndarray) -> np.ndarray:
        """Flat mu-subgrid index of the nearest grid point for each row of `mu`."""
        mu = np.atleast_2d(mu)
        low, high = self.spec.mu_range
        count = self.spec.mu_points_per_dim
        step = (high - low) / (count - 1)
        idx = np.clip(np.rint((mu - low) / step), 0, count - 1).astype(int)
        return idx @ _strides([count] * self.n_arms)


def build_grid(spec: GridSpec) -> Grid:
    """Builds the endpoint-inclusive uniform product grid for `spec`."""
    if spec.n_points > spec.max_points:
        product = " * ".join(str(s) for s in spec.axis_sizes)
        raise utils.ConfigurationError(
            f"grid has {product} = {spec.n_points} points, exceeding max_points={spec.max_points}",
            field="grid.max_points",
        )
    mu_axis = np.linspace(*spec.mu_range, spec.mu_points_per_dim)
    mu_axes = tuple(mu_axis.copy() for _ in range(spec.n_arms))
    context_axes = tuple(
        np.linspace(low, high, count)
        for (low, high), count in zip(spec.context_ranges, spec.context_points_per_dim)
    )
    mu_points = _product_points(mu_axes)
    context_points = _product_points(context_axes)
    points = np.concatenate(
        [
            np.tile(mu_points, (context_points.shape[0], 1)),
            np.repeat(context_points, mu_points.shape[0], axis=0),
        ],
        axis=1,
    )
    for array in (mu_points, context_points, points):
        array.setflags(write=False)
    return Grid(spec, mu_axes, context_axes, mu_points, context_points, points)


# **********************************************************
# Kernel.
# **********************************************************
def _positive(_instance, attribute, value):
    if not value > 0:
        raise utils.ConfigurationError(
            f"{attribute.name} must be positive, got {value}", field=f"kernel.{attribute.name}"
        )


@attrs.frozen
class KernelParams:
    lengthscale: float = attrs.field(default=0.7, converter=float, validator=_positive)
    signal_variance: float = attrs.field(default=1.0, converter=float, validator=_positive)


def se_kernel(z: Sequence[float], z_other: Sequence[float], params: KernelParams) -> float:
    """Squared-exponential kernel sigma_f^2 exp(-|z - z'|^2 / (2 l^2))."""
    diff = np.asarray(z, dtype=float) - np.asarray(z_other, dtype=float)
    return float(
        params.signal_variance * np.exp(-np.dot(diff, diff) / (2.0 * params.lengthscale**2))
    )


def _axis_kernel(values: np.ndarray, lengthscale: float) -> np.ndarray:
    diff = values[:, None] - values[None, :]
    return np.exp(-(diff**2) / (2.0 * lengthscale**2))


def kernel_matrix(grid: Grid, params: KernelParams) -> np.ndarray:
    """Dense L x L kernel matrix; only for small grids."""
    if grid.n_points > DENSE_MAX_POINTS:
        raise utils.ConfigurationError(
            f"dense kernel matrix requested for {grid.n_points} points", field="grid"
        )
    sq = cdist(grid.points, grid.points, "sqeuclidean")
    return params.signal_variance * np.exp(-sq / (2.0 * params.lengthscale**2))


def kernel_matvec(grid: Grid, params: KernelParams, vector: np.ndarray) -> np.ndarray:
    """K v through the per-axis factors, without forming K."""
    axes = grid.axes
    tensor = np.asarray(vector, dtype=float).reshape(tuple(len(a) for a in reversed(axes)))
    for d, values in enumerate(axes):
        j = len(axes) - 1 - d
        factor = _axis_kernel(values, params.lengthscale)
        tensor = np.moveaxis(np.tensordot(factor, tensor, axes=([1], [j])), 0, j)
    return params.signal_variance * tensor.ravel()


# **********************************************************
# Karhunen-Loeve basis.
# **********************************************************
@attrs.frozen(eq=False)
class KLBasis:
    """Top-M eigenpairs of the grid kernel matrix, eigenvalues non-increasing."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    grid: Optional[Grid] = None
    params: Optional[KernelParams] = None
    scaled_vectors: np.ndarray = attrs.field(init=False)

    def __attrs_post_init__(self):
        scaled = self.eigenvectors * np.sqrt(self.eigenvalues)[None, :]
        scaled.setflags(write=False)
        object.__setattr__(self, "scaled_vectors", scaled)

    @property
    def n_components(self) -> int:
        return self.eigenvalues.shape[0]

    def context_vectors(self, context_index: int) -> np.ndarray:
        """Rows of the scaled basis on the mu-subgrid of one context."""
        return self.scaled_vectors[self.grid.mu_slice(context_index)]


def _clamp_eigenvalues(values: np.ndarray) -> np.ndarray:
    tol = EIGEN_CLAMP_TOL * max(1.0, float(np.max(values)))
    if np.min(values) < -tol:
        raise utils.NumericalError(
            f"kernel matrix has eigenvalue {np.min(values):.3e}", residual=float(np.min(values))
        )
    return np.where(values < 0.0, 0.0, values)


def _eigh_descending(matrix: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    try:
        values, vectors = scipy.linalg.eigh(matrix)
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise utils.NumericalError(f"eigensolver failed: {exc}", residual=float("nan")) from exc
    residual = float(np.linalg.norm(matrix @ vectors - vectors * values[None, :]))
    if residual > EIGEN_RESIDUAL_TOL * max(1.0, float(np.linalg.norm(matrix))):
        raise utils.NumericalError("eigensolver did not converge", residual=residual)
    return _clamp_eigenvalues(values[::-1]), vectors[:, ::-1]


def _kronecker_basis(grid: Grid, params: KernelParams, n_components: int) -> KLBasis:
    axes = grid.axes
    pairs = [_eigh_descending(_axis_kernel(values, params.lengthscale)) for values in axes]
    multi = _product_points([np.arange(len(values)) for values in axes]).astype(int)
    factors = np.stack([pairs[d][0][multi[:, d]] for d in range(len(axes))])
    # Sorted factors make permuted multi-indices multiply to bitwise-equal products.
    products = params.signal_variance * np.prod(np.sort(factors, axis=0), axis=0)
    keys = tuple(multi[:, d] for d in reversed(range(len(axes)))) + (-products,)
    selected = np.lexsort(keys)[:n_components]

    vectors = np.empty((grid.n_points, n_components))
    for column, flat in enumerate(selected):
        vectors[:, column] = functools.reduce(
            np.kron, [pairs[d][1][:, multi[flat, d]] for d in reversed(range(len(axes)))]
        )
    return KLBasis(products[selected], vectors, grid, params)


def _dense_basis(grid: Grid, params: KernelParams, n_components: int) -> KLBasis:
    values, vectors = _eigh_descending(kernel_matrix(grid, params))
    order = np.argsort(-values, kind="stable")[:n_components]
    return KLBasis(values[order], vectors[:, order], grid, params)


def compute_kl_basis(
    grid: Grid, params: KernelParams, n_components: int, method: str = "kronecker"
) -> KLBasis:
    """Top-`n_components` eigenpairs of the grid kernel matrix.

    `method="kronecker"` composes per-axis eigenpairs (ties between equal product
    eigenvalues broken lexicographically on the per-axis multi-index);
    `method="dense"` decomposes the full matrix and is meant for small grids.
    """
    if not 1 <= n_components <= grid.n_points:
        raise utils.ConfigurationError(
            f"truncation {n_components} not in [1, {grid.n_points}]", field="truncation"
        )
    if method == "kronecker":
        basis = _kronecker_basis(grid, params, n_components)
    elif method == "dense":
        basis = _dense_basis(grid, params, n_components)
    else:
        raise utils.ConfigurationError(f"unknown eigen method {method!r}")
    utils.log_to_output(
        f"KL basis: M={n_components} of L={grid.n_points}, "
        f"captured variance {basis.eigenvalues.sum() / (grid.n_points * params.signal_variance):.4f}"
    )
    return basis


def eval_particle(xi: np.ndarray, basis: KLBasis) -> np.ndarray:
    """Log-density values f on the full grid for one coefficient vector."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (basis.n_components,):
        raise utils.InvalidInputError(
            f"coefficient vector has shape {xi.shape}, expected ({basis.n_components},)"
        )
    return basis.scaled_vectors @ xi


def eval_particles(
    particles: np.ndarray, basis: KLBasis, context_index: int | None = None
) -> np.ndarray:
    """Log-density values for a stack of particles, optionally on one context slice."""
    vectors = basis.scaled_vectors if context_index is None else basis.context_vectors(context_index)
    return np.atleast_2d(particles) @ vectors.T


def sample_functions(basis: KLBasis, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Draws GP sample paths on the grid via standard-normal coefficients."""
    coefficients = rng.standard_normal((n_samples, basis.n_components))
    return eval_particles(coefficients, basis)
