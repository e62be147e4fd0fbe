"""Built-in coefficient families: interaction kernels, noise matrices, initial laws.

Every family serializes to ``{"family": name, **params}`` and is rebuilt from
that dict by :func:`kernel_from_dict`, :func:`noise_from_dict` or
:func:`initial_law_from_dict`. Arrays are evaluated with arbitrary leading
batch axes; the trailing axis is always the spatial one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ScenarioError
from .measures import maxnorm

PAIR_BLOCK = 512


def _matrix(value, d=None, name="matrix"):
    a = np.atleast_2d(np.asarray(value, dtype=float))
    if a.shape[0] != a.shape[1]:
        raise ScenarioError(f"{name} must be square, got shape {a.shape}", field=name)
    if d is not None and a.shape[0] != d:
        raise ScenarioError(f"{name} must be {d}x{d}, got shape {a.shape}", field=name)
    return a


def _tolist(a):
    return np.asarray(a, dtype=float).tolist()


# -- interaction kernels ------------------------------------------------------


class Kernel:
    """Vector field R^d -> R^d used in pairwise interactions."""

    family = "abstract"
    is_zero = False

    def __call__(self, z):
        raise NotImplementedError

    def lipschitz_hint(self):
        """Analytic Lipschitz constant in the max norm, or None if unknown."""
        return None

    def convolve(self, points, at):
        """``mean_n K(at_p - points_n)`` for batches ``points (..., n, d)``, ``at (..., P, d)``."""
        points = np.asarray(points, dtype=float)
        at = np.asarray(at, dtype=float)
        out = np.empty(np.broadcast_shapes(points.shape[:-2], at.shape[:-2]) + at.shape[-2:])
        n = points.shape[-2]
        for start in range(0, at.shape[-2], PAIR_BLOCK):
            block = at[..., start : start + PAIR_BLOCK, :]
            vals = self(block[..., :, None, :] - points[..., None, :, :])
            out[..., start : start + PAIR_BLOCK, :] = vals.sum(axis=-2) / n
        return out

    def to_dict(self):
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class ZeroKernel(Kernel):
    d: int = 1
    family = "zero"
    is_zero = True

    def __call__(self, z):
        return np.zeros_like(np.asarray(z, dtype=float))

    def lipschitz_hint(self):
        return 0.0

    def convolve(self, points, at):
        points = np.asarray(points, dtype=float)
        at = np.asarray(at, dtype=float)
        return np.zeros(np.broadcast_shapes(points.shape[:-2], at.shape[:-2]) + at.shape[-2:])

    def to_dict(self):
        return {"family": "zero"}


@dataclass(frozen=True, eq=False)
class LinearKernel(Kernel):
    """``K(z) = A z``; the convolution collapses to ``A (x - mean)``."""

    matrix: np.ndarray
    family = "linear"

    def __post_init__(self):
        object.__setattr__(self, "matrix", _matrix(self.matrix))

    @property
    def is_zero(self):
        return not np.any(self.matrix)

    def __call__(self, z):
        return np.asarray(z, dtype=float) @ self.matrix.T

    def lipschitz_hint(self):
        return float(np.max(np.sum(np.abs(self.matrix), axis=1)))

    def convolve(self, points, at):
        points = np.asarray(points, dtype=float)
        at = np.asarray(at, dtype=float)
        centre = points.mean(axis=-2, keepdims=True)
        return (at - centre) @ self.matrix.T

    def to_dict(self):
        return {"family": "linear", "matrix": _tolist(self.matrix)}


@dataclass(frozen=True, eq=False)
class ClippedLinearKernel(Kernel):
    """``K(z) = A clip(z, -R, R)``, bounded and Lipschitz."""

    matrix: np.ndarray
    radius: float = 1.0
    family = "clipped_linear"

    def __post_init__(self):
        object.__setattr__(self, "matrix", _matrix(self.matrix))
        if not self.radius > 0:
            raise ScenarioError("clipped_linear radius must be positive", field="radius")

    @property
    def is_zero(self):
        return not np.any(self.matrix)

    def __call__(self, z):
        return np.clip(np.asarray(z, dtype=float), -self.radius, self.radius) @ self.matrix.T

    def lipschitz_hint(self):
        return float(np.max(np.sum(np.abs(self.matrix), axis=1)))

    def to_dict(self):
        return {"family": "clipped_linear", "matrix": _tolist(self.matrix), "radius": float(self.radius)}


@dataclass(frozen=True, eq=False)
class RadialKernel(Kernel):
    """``K(z) = strength * z * exp(-|z|_2^2 / (2 scale^2))``: smooth, bounded, Lipschitz."""

    strength: float
    scale: float = 1.0
    family = "radial"

    def __post_init__(self):
        if not self.scale > 0:
            raise ScenarioError("radial scale must be positive", field="scale")

    @property
    def is_zero(self):
        return self.strength == 0.0

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        r2 = np.sum(z**2, axis=-1, keepdims=True)
        return self.strength * z * np.exp(-r2 / (2.0 * self.scale**2))

    def to_dict(self):
        return {"family": "radial", "strength": float(self.strength), "scale": float(self.scale)}


@dataclass(frozen=True, eq=False)
class TabulatedKernel(Kernel):
    """Piecewise-linear interpolation of a table, applied per coordinate.

    Outside the table the end values are held constant.
    """

    x: np.ndarray
    y: np.ndarray
    family = "tabulated"

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if x.ndim != 1 or x.shape != y.shape or x.size < 2 or np.any(np.diff(x) <= 0):
            raise ScenarioError("tabulated kernel needs matching 1-D tables with increasing x", field="x")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def is_zero(self):
        return not np.any(self.y)

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        return np.interp(z, self.x, self.y)

    def lipschitz_hint(self):
        return float(np.max(np.abs(np.diff(self.y) / np.diff(self.x))))

    def to_dict(self):
        return {"family": "tabulated", "x": _tolist(self.x), "y": _tolist(self.y)}


@dataclass(frozen=True, eq=False)
class CallableKernel(Kernel):
    """Wraps a user function; library use only, never produced by scenario files."""

    fn: Callable
    family = "callable"

    def __call__(self, z):
        return np.asarray(self.fn(np.asarray(z, dtype=float)), dtype=float)

    def to_dict(self):
        raise ScenarioError("callable kernels cannot be serialized")


_KERNELS = {
    "zero": lambda p, d: ZeroKernel(d),
    "linear": lambda p, d: LinearKernel(_matrix(p.pop("matrix"), d)),
    "clipped_linear": lambda p, d: ClippedLinearKernel(_matrix(p.pop("matrix"), d), float(p.pop("radius", 1.0))),
    "radial": lambda p, d: RadialKernel(float(p.pop("strength")), float(p.pop("scale", 1.0))),
    "tabulated": lambda p, d: TabulatedKernel(p.pop("x"), p.pop("y")),
}


def kernel_from_dict(spec, d, name="kernel"):
    return _build(_KERNELS, spec, d, name)


def _build(table, spec, d, name):
    if not isinstance(spec, dict) or "family" not in spec:
        raise ScenarioError(f"{name}: expected an object with a 'family' field", field=name)
    params = dict(spec)
    family = params.pop("family")
    if family not in table:
        raise ScenarioError(f"{name}: unknown family {family!r} (known: {sorted(table)})", field=f"{name}.family")
    try:
        obj = table[family](params, d)
    except KeyError as exc:
        raise ScenarioError(f"{name}: missing parameter {exc.args[0]!r}", field=f"{name}.{exc.args[0]}") from None
    if params:
        key = sorted(params)[0]
        raise ScenarioError(f"{name}: unknown field {key!r} for family {family!r}", field=f"{name}.{key}")
    return obj


# -- noise coefficients -------------------------------------------------------


class Noise:
    """Matrix-valued coefficient ``sigma(t, Y, x, features)``.

    ``__call__`` takes ``t`` (float), ``Y (..., M, d)``, ``x (..., P, d)`` and
    ``feats (..., F)`` and returns ``(..., P, d, d)``.
    """

    family = "abstract"
    is_zero = False
    uses_features = False
    is_constant = False

    def __call__(self, t, Y, x, feats):
        raise NotImplementedError

    def to_dict(self):
        raise NotImplementedError


def _broadcast_matrix(mat, x):
    x = np.asarray(x, dtype=float)
    return np.broadcast_to(mat, x.shape[:-1] + mat.shape).copy()


@dataclass(frozen=True, eq=False)
class ConstantNoise(Noise):
    matrix: np.ndarray
    family = "constant"
    is_constant = True

    def __post_init__(self):
        object.__setattr__(self, "matrix", _matrix(self.matrix))

    @property
    def is_zero(self):
        return not np.any(self.matrix)

    def __call__(self, t, Y, x, feats):
        return _broadcast_matrix(self.matrix, x)

    def to_dict(self):
        return {"family": "constant", "matrix": _tolist(self.matrix)}


@dataclass(frozen=True, eq=False)
class ZeroNoise(ConstantNoise):
    family = "zero"

    def to_dict(self):
        return {"family": "zero"}


@dataclass(frozen=True, eq=False)
class StateNormNoise(Noise):
    """``scale * min(|x|, radius) * Id``."""

    scale: float
    radius: float = float("inf")
    d: int = 1
    family = "state_norm"

    @property
    def is_zero(self):
        return self.scale == 0.0

    def __call__(self, t, Y, x, feats):
        x = np.asarray(x, dtype=float)
        amp = self.scale * np.minimum(maxnorm(x), self.radius)
        return amp[..., None, None] * np.eye(x.shape[-1])

    def to_dict(self):
        out = {"family": "state_norm", "scale": float(self.scale)}
        if np.isfinite(self.radius):
            out["radius"] = float(self.radius)
        return out


@dataclass(frozen=True, eq=False)
class ClippedStateNoise(Noise):
    """``base + diag(scale * clip(x - herder_mean, -R, R)) + mean_weight * clipped_mean_feature * Id``.

    Depends on all four arguments except time, and is Lipschitz with constant
    ``max(|scale|, |mean_weight|)`` in each of them.
    """

    base: np.ndarray
    scale: float = 0.0
    radius: float = 1.0
    mean_weight: float = 0.0
    family = "clipped_state"
    uses_features = True

    def __post_init__(self):
        object.__setattr__(self, "base", _matrix(self.base))

    @property
    def is_zero(self):
        return False

    def __call__(self, t, Y, x, feats):
        x = np.asarray(x, dtype=float)
        Y = np.asarray(Y, dtype=float)
        feats = np.asarray(feats, dtype=float)
        d = x.shape[-1]
        rel = x - Y.mean(axis=-2, keepdims=True)
        diag = self.scale * np.clip(rel, -self.radius, self.radius)
        mean_feat = feats[..., :d].mean(axis=-1)[..., None, None, None]
        out = self.base + diag[..., :, None] * np.eye(d)
        return out + self.mean_weight * mean_feat * np.eye(d)

    def to_dict(self):
        return {
            "family": "clipped_state",
            "base": _tolist(self.base),
            "scale": float(self.scale),
            "radius": float(self.radius),
            "mean_weight": float(self.mean_weight),
        }


@dataclass(frozen=True, eq=False)
class CallableNoise(Noise):
    fn: Callable
    uses_features: bool = True
    family = "callable"

    def __call__(self, t, Y, x, feats):
        return np.asarray(self.fn(t, Y, x, feats), dtype=float)

    def to_dict(self):
        raise ScenarioError("callable noises cannot be serialized")


_NOISES = {
    "zero": lambda p, d: ZeroNoise(np.zeros((d, d))),
    "constant": lambda p, d: ConstantNoise(_matrix(p.pop("matrix"), d)),
    "state_norm": lambda p, d: StateNormNoise(float(p.pop("scale")), float(p.pop("radius", np.inf)), d),
    "clipped_state": lambda p, d: ClippedStateNoise(
        _matrix(p.pop("base"), d),
        float(p.pop("scale", 0.0)),
        float(p.pop("radius", 1.0)),
        float(p.pop("mean_weight", 0.0)),
    ),
}


def noise_from_dict(spec, d, name="noise"):
    return _build(_NOISES, spec, d, name)


# -- initial laws -------------------------------------------------------------


class HerdLaw:
    """Sampler for i.i.d. initial herd positions.

    ``sample(rng, n)`` must consume the generator in particle-major order so
    that the first ``n`` rows of a larger draw coincide with a draw of ``n``.
    """

    family = "abstract"

    def sample(self, rng, n):
        raise NotImplementedError

    def scale(self):
        raise NotImplementedError

    def to_dict(self):
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class GaussianLaw(HerdLaw):
    mean: np.ndarray
    std: np.ndarray
    family = "gaussian"

    def __post_init__(self):
        object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, dtype=float)))
        object.__setattr__(self, "std", np.atleast_1d(np.asarray(self.std, dtype=float)))
        if self.mean.shape != self.std.shape or np.any(self.std < 0):
            raise ScenarioError("gaussian law needs mean and non-negative std of equal length", field="std")

    @property
    def d(self):
        return self.mean.size

    def sample(self, rng, n):
        return self.mean + self.std * rng.standard_normal((n, self.d))

    def scale(self):
        return float(np.max(np.abs(self.mean)) + np.max(self.std))

    def to_dict(self):
        return {"family": "gaussian", "mean": _tolist(self.mean), "std": _tolist(self.std)}


@dataclass(frozen=True, eq=False)
class UniformLaw(HerdLaw):
    low: np.ndarray
    high: np.ndarray
    family = "uniform"

    def __post_init__(self):
        object.__setattr__(self, "low", np.atleast_1d(np.asarray(self.low, dtype=float)))
        object.__setattr__(self, "high", np.atleast_1d(np.asarray(self.high, dtype=float)))
        if self.low.shape != self.high.shape or np.any(self.high < self.low):
            raise ScenarioError("uniform law needs low <= high of equal length", field="high")

    @property
    def d(self):
        return self.low.size

    def sample(self, rng, n):
        return self.low + (self.high - self.low) * rng.random((n, self.d))

    def scale(self):
        return float(max(np.max(np.abs(self.low)), np.max(np.abs(self.high))))

    def to_dict(self):
        return {"family": "uniform", "low": _tolist(self.low), "high": _tolist(self.high)}


@dataclass(frozen=True, eq=False)
class AtomsLaw(HerdLaw):
    """Finite mixture of point masses."""

    atoms: np.ndarray
    weights: np.ndarray = field(default=None)
    family = "atoms"

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        w = np.full(atoms.shape[0], 1.0 / atoms.shape[0]) if self.weights is None else np.asarray(self.weights, float)
        if w.shape != (atoms.shape[0],) or np.any(w < 0) or not np.isclose(w.sum(), 1.0):
            raise ScenarioError("atoms law needs non-negative weights summing to 1", field="weights")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", w)

    @property
    def d(self):
        return self.atoms.shape[1]

    def sample(self, rng, n):
        cdf = np.cumsum(self.weights)
        idx = np.minimum(np.searchsorted(cdf, rng.random(n), side="right"), len(cdf) - 1)
        return self.atoms[idx].copy()

    def scale(self):
        return float(np.max(np.abs(self.atoms)))

    def to_dict(self):
        return {"family": "atoms", "atoms": _tolist(self.atoms), "weights": _tolist(self.weights)}


_LAWS = {
    "gaussian": lambda p, d: GaussianLaw(p.pop("mean"), p.pop("std")),
    "uniform": lambda p, d: UniformLaw(p.pop("low"), p.pop("high")),
    "atoms": lambda p, d: AtomsLaw(p.pop("atoms"), p.pop("weights", None)),
}


def initial_law_from_dict(spec, d, name="initial.herd"):
    law = _build(_LAWS, spec, d, name)
    if law.d != d:
        raise ScenarioError(f"{name}: law lives in dimension {law.d}, system has d={d}", field=name)
    return law
