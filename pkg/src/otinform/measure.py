"""Discrete probability measures, ground costs and synthetic samplers."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SIMPLEX_ATOL = 1e-12


class GroundCost(str, enum.Enum):
    L1 = "l1"
    SQL2 = "sql2"

    @classmethod
    def parse(cls, value: "GroundCost | str") -> "GroundCost":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown ground cost {value!r}; expected one of "
                             f"{[c.value for c in cls]}") from None


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Weighted point cloud ``sum_i weights[i] * delta(points[i])``."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64)
        weights = np.array(self.weights, dtype=np.float64)
        if points.ndim == 1:
            points = points[:, None]
        if points.ndim != 2 or points.shape[0] < 1:
            raise ValueError(f"points must be a non-empty n x d matrix, got shape {points.shape}")
        if weights.shape != (points.shape[0],):
            raise ValueError(f"weights shape {weights.shape} does not match {points.shape[0]} atoms")
        if not np.all(np.isfinite(points)):
            raise ValueError("atom coordinates must be finite")
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise ValueError("weights must be finite and nonnegative")
        if abs(weights.sum() - 1.0) > SIMPLEX_ATOL:
            raise ValueError(f"weights sum to {weights.sum()!r}, expected 1")
        points.flags.writeable = False
        weights.flags.writeable = False
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform(cls, points) -> "DiscreteMeasure":
        points = np.asarray(points, dtype=np.float64)
        n = points.shape[0]
        return cls(points, np.full(n, 1.0 / n))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def to_csv(self, path) -> None:
        header = [f"x{k}" for k in range(self.dim)] + ["weight"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for row, w in zip(self.points, self.weights):
                writer.writerow([repr(float(v)) for v in row] + [repr(float(w))])

    @classmethod
    def from_csv(cls, path) -> "DiscreteMeasure":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header or header[-1] != "weight" or any(
                    h != f"x{k}" for k, h in enumerate(header[:-1])):
                raise ValueError(f"{Path(path).name}: expected header x0,...,weight, got {header}")
            rows = [[float(v) for v in row] for row in reader if row]
        if not rows:
            raise ValueError(f"{Path(path).name}: no atoms")
        data = np.array(rows, dtype=np.float64)
        weights = data[:, -1]
        # renormalize decimal round-off only; real violations are still rejected
        if abs(weights.sum() - 1.0) < 1e-9:
            weights = weights / weights.sum()
        return cls(data[:, :-1], weights)


@dataclass(frozen=True)
class LatentSpec:
    """Latent layout: one-hot categorical, Unif[-1, 1], then N(0, 1) coordinates.

    The first ``cat_dim + uni_dim`` coordinates form the informative block.
    """

    cat_dim: int = 0
    uni_dim: int = 0
    noise_dim: int = 0

    def __post_init__(self):
        if min(self.cat_dim, self.uni_dim, self.noise_dim) < 0:
            raise ValueError("latent block sizes must be nonnegative")
        if self.dim < 1:
            raise ValueError("latent space must have at least one coordinate")

    @property
    def dim(self) -> int:
        return self.cat_dim + self.uni_dim + self.noise_dim

    @property
    def info_dim(self) -> int:
        return self.cat_dim + self.uni_dim

    def informative(self, z: np.ndarray) -> np.ndarray:
        return z[:, : self.info_dim]


def cost_matrix(cost: GroundCost | str, X, Y) -> np.ndarray:
    """Pairwise ground cost ``C[i, j] = c(X[i], Y[j])``."""
    cost = GroundCost.parse(cost)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"dimension mismatch: X has d={X.shape[1]}, Y has d={Y.shape[1]}")
    out = np.zeros((X.shape[0], Y.shape[0]))
    # accumulate per coordinate; avoids an n x m x d temporary
    for k in range(X.shape[1]):
        diff = X[:, k, None] - Y[None, :, k]
        out += np.abs(diff) if cost is GroundCost.L1 else diff * diff
    return out


def grid_centers(k_side: int) -> np.ndarray:
    """Centers of a ``k_side x k_side`` regular grid spanning [-1, 1]^2."""
    if k_side < 1:
        raise ValueError("k_side must be >= 1")
    axis = np.linspace(-1.0, 1.0, k_side) if k_side > 1 else np.zeros(1)
    xx, yy = np.meshgrid(axis, axis, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel()])


def gaussian_grid_dataset(k_side: int, sigma: float, n: int, seed) -> DiscreteMeasure:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if n < k_side * k_side:
        raise ValueError(f"need n >= k_side**2 = {k_side * k_side} samples, got {n}")
    rng = np.random.default_rng(seed)
    centers = grid_centers(k_side)
    modes = rng.integers(len(centers), size=n)
    points = centers[modes] + sigma * rng.standard_normal((n, 2))
    return DiscreteMeasure.uniform(points)


def diagonal_mixture_dataset(n: int, modes: int, sigma: float, seed) -> DiscreteMeasure:
    """Samples on the diagonal of the unit square from a 1D Gaussian mixture.

    Mode ``k`` sits at diagonal parameter ``(k + 0.5) / modes``.
    """
    if not n >= modes >= 1:
        raise ValueError(f"need n >= modes >= 1, got n={n}, modes={modes}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    rng = np.random.default_rng(seed)
    centers = (np.arange(modes) + 0.5) / modes
    t = centers[rng.integers(modes, size=n)] + sigma * rng.standard_normal(n)
    t = np.clip(t, 0.0, 1.0)
    return DiscreteMeasure.uniform(np.column_stack([t, t]))


def unit_square_grid(k: int) -> DiscreteMeasure:
    """Uniform measure on the cell midpoints of a ``k x k`` grid over [0, 1]^2.

    Atoms are ordered with the first coordinate varying slowest.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    axis = (np.arange(k) + 0.5) / k
    xx, yy = np.meshgrid(axis, axis, indexing="ij")
    return DiscreteMeasure.uniform(np.column_stack([xx.ravel(), yy.ravel()]))


def sample_latent(spec: LatentSpec, batch: int, seed) -> np.ndarray:
    """Draw ``batch`` latent codes; ``seed`` may be an int or a ``np.random.Generator``."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    rng = np.random.default_rng(seed)
    z = np.empty((batch, spec.dim))
    if spec.cat_dim:
        z[:, : spec.cat_dim] = np.eye(spec.cat_dim)[rng.integers(spec.cat_dim, size=batch)]
    if spec.uni_dim:
        z[:, spec.cat_dim: spec.info_dim] = rng.uniform(-1.0, 1.0, size=(batch, spec.uni_dim))
    if spec.noise_dim:
        z[:, spec.info_dim:] = rng.standard_normal((batch, spec.noise_dim))
    return z


def total_std(points) -> float:
    """Square root of the trace of the sample covariance."""
    points = np.asarray(points, dtype=np.float64)
    return float(np.sqrt(points.var(axis=0).sum()))
