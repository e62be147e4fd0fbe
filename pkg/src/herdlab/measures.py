"""Empirical measures, exact transport distances and W1-Lipschitz summaries.

All distances use the max-coordinate norm ``|x| = max_i |x_i|``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import CapacityError, DimensionError, SizeError

ASSIGNMENT_CAP = 4096


def maxnorm(x, axis=-1):
    return np.max(np.abs(x), axis=axis)


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Equally weighted point cloud in R^d, stored as an ``(n, d)`` array."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise SizeError(f"empirical measure needs an (n, d) array with n >= 1, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("empirical measure has non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def d(self):
        return self.points.shape[1]

    def pair(self, f):
        """Integrate ``f`` (vectorized over rows) against the measure."""
        return float(np.mean(f(self.points)))

    def translate(self, v):
        return EmpiricalMeasure(self.points + np.asarray(v, dtype=float))

    def concat(self, other):
        return EmpiricalMeasure(np.concatenate([self.points, other.points]))


def as_measure(mu):
    return mu if isinstance(mu, EmpiricalMeasure) else EmpiricalMeasure(mu)


def _check_pair(mu, nu):
    mu, nu = as_measure(mu), as_measure(nu)
    if mu.n != nu.n:
        raise SizeError(f"clouds have different sizes ({mu.n} vs {nu.n})")
    if mu.d != nu.d:
        raise DimensionError(f"clouds live in different dimensions ({mu.d} vs {nu.d})")
    return mu, nu


def _check_order(q):
    if not q >= 1:
        raise ValueError(f"transport order must be >= 1, got {q}")


def wasserstein_1d(mu, nu, q=1.0):
    """Exact W_q between equal-size clouds on the line (sorted pairing)."""
    _check_order(q)
    mu, nu = _check_pair(mu, nu)
    if mu.d != 1:
        raise DimensionError("wasserstein_1d needs d = 1")
    x = np.sort(mu.points[:, 0])
    y = np.sort(nu.points[:, 0])
    return float(np.mean(np.abs(x - y) ** q) ** (1.0 / q))


def assignment_cost_matrix(x, y, q):
    diff = x[:, None, :] - y[None, :, :]
    return maxnorm(diff) ** q


def wasserstein_assignment(mu, nu, q=1.0, cap=ASSIGNMENT_CAP):
    """Exact W_q between equal-size clouds via optimal assignment.

    Equal weights make the transport polytope's vertices permutations, so the
    optimal plan is an assignment (Birkhoff).
    """
    _check_order(q)
    mu, nu = _check_pair(mu, nu)
    if mu.n > cap:
        raise CapacityError(
            f"assignment on {mu.n} points exceeds the cap of {cap}; subsample both clouds first"
        )
    if mu.d == 1:
        return wasserstein_1d(mu, nu, q)
    cost = assignment_cost_matrix(mu.points, nu.points, q)
    rows, cols = linear_sum_assignment(cost)
    return float(np.mean(cost[rows, cols]) ** (1.0 / q))


def wasserstein(mu, nu, q=1.0):
    return wasserstein_assignment(mu, nu, q)


def moment_p(mu, q=1.0):
    """``(mean |x|^q)^(1/q)``: the q-th moment about the origin."""
    _check_order(q)
    mu = as_measure(mu)
    return float(np.mean(maxnorm(mu.points) ** q) ** (1.0 / q))


def coupled_distance_bound(mu, nu, q=1.0):
    """Index-paired transport cost, an upper bound on W_q(mu, nu)."""
    mu, nu = _check_pair(mu, nu)
    return float(np.mean(maxnorm(mu.points - nu.points) ** q) ** (1.0 / q))


# -- W1-Lipschitz feature vector ---------------------------------------------

FEATURE_BLOCK = 1024


@dataclass(frozen=True, eq=False)
class FeatureVector:
    """Measure summaries, each 1-Lipschitz with respect to W1.

    Layout: ``d`` clipped means, ``d`` clipped second moments
    ``<mu, min(x_i^2, R^2)> / (2R)``, and one clipped pair average
    ``(1/2) <mu x mu, min(|x - y|, R)>``.
    """

    values: np.ndarray
    radius: float

    @property
    def means(self):
        d = (self.values.shape[-1] - 1) // 2
        return self.values[..., :d]

    @property
    def second_moments(self):
        d = (self.values.shape[-1] - 1) // 2
        return self.values[..., d : 2 * d]

    @property
    def pair_average(self):
        return self.values[..., -1]


def feature_size(d):
    return 2 * d + 1


def _pair_average_1d(x, radius):
    # sum_{i<j} min(x_j - x_i, R) over sorted x, in O(n log n)
    x = np.sort(x)
    n = x.size
    csum = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(n)
    k = np.searchsorted(x, x + radius, side="left")
    k = np.maximum(k, idx + 1)
    near = csum[k] - csum[idx + 1] - (k - idx - 1) * x
    far = radius * (n - k)
    return float(np.sum(near + far)) / n**2


def _pair_average_nd(pts, radius):
    n = pts.shape[0]
    total = 0.0
    for start in range(0, n, FEATURE_BLOCK):
        block = pts[start : start + FEATURE_BLOCK]
        dist = maxnorm(block[:, None, :] - pts[None, :, :])
        total += float(np.sum(np.minimum(dist, radius)))
    return 0.5 * total / n**2


def feature_array(points, radius):
    """Features for one cloud ``(n, d)`` or a batch ``(..., n, d)``."""
    pts = np.asarray(points, dtype=float)
    lead = pts.shape[:-2]
    d = pts.shape[-1]
    means = np.mean(np.clip(pts, -radius, radius), axis=-2)
    seconds = np.mean(np.minimum(pts**2, radius**2), axis=-2) / (2.0 * radius)
    flat = pts.reshape((-1,) + pts.shape[-2:])
    if d == 1:
        pairs = np.array([_pair_average_1d(c[:, 0], radius) for c in flat])
    else:
        pairs = np.array([_pair_average_nd(c, radius) for c in flat])
    pairs = pairs.reshape(lead + (1,))
    return np.concatenate([means, seconds, pairs], axis=-1)


def features(mu, radius=10.0):
    mu = as_measure(mu)
    return FeatureVector(feature_array(mu.points, radius), float(radius))
