"""Problem definition for the herd/herder system and its coefficient fields."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .coefficients import Kernel, Noise, ZeroKernel, ZeroNoise, HerdLaw
from .errors import CoefficientError, DimensionError, ValidationError
from .measures import EmpiricalMeasure, as_measure, feature_array, maxnorm

VALIDATION_SEED = 20240917


@dataclass(frozen=True, eq=False)
class KernelSet:
    H1: Kernel
    H2: Kernel
    K1: Kernel
    K2: Kernel

    @classmethod
    def zeros(cls, d=1):
        z = ZeroKernel(d)
        return cls(z, z, z, z)

    def items(self):
        return (("H1", self.H1), ("H2", self.H2), ("K1", self.K1), ("K2", self.K2))


@dataclass(frozen=True, eq=False)
class NoiseSet:
    sigma_i: Noise
    sigma_c: Noise

    @classmethod
    def zeros(cls, d=1):
        z = ZeroNoise(np.zeros((d, d)))
        return cls(z, z)

    def items(self):
        return (("sigma_i", self.sigma_i), ("sigma_c", self.sigma_c))


@dataclass(frozen=True, eq=False)
class AssumptionBounds:
    L: float
    Mprime: float = 1.0
    U_low: np.ndarray = None
    U_high: np.ndarray = None
    ell: int = 1

    def __post_init__(self):
        if not (self.L > 0 and self.Mprime > 0):
            raise ValidationError("L and Mprime must be positive")
        if self.ell < 1:
            raise ValidationError("ell must be >= 1")
        for name in ("U_low", "U_high"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, np.atleast_2d(np.asarray(val, dtype=float)))

    def box(self, d):
        low = -np.ones((d, self.ell)) if self.U_low is None else self.U_low
        high = np.ones((d, self.ell)) if self.U_high is None else self.U_high
        if low.shape != (d, self.ell) or high.shape != (d, self.ell):
            raise ValidationError(f"U_box bounds must have shape ({d}, {self.ell})")
        if not (np.all(np.isfinite(low)) and np.all(np.isfinite(high)) and np.all(low < high)):
            raise ValidationError("U_box needs finite, strictly ordered bounds")
        return low, high


@dataclass(frozen=True, eq=False)
class InitialLaw:
    herd_law: HerdLaw
    herder_start: np.ndarray

    def __post_init__(self):
        y0 = np.atleast_2d(np.asarray(self.herder_start, dtype=float))
        object.__setattr__(self, "herder_start", y0)


@dataclass(frozen=True, eq=False)
class SystemSpec:
    """A full problem instance. Immutable; use :meth:`with_` to derive variants."""

    d: int
    N: int
    M: int
    T: float
    p: float
    dt: float
    kernels: KernelSet
    noises: NoiseSet
    initial: InitialLaw
    bounds: AssumptionBounds
    feature_radius: float | None = None
    _validation: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ValidationError(f"d must be 1, 2 or 3, got {self.d}")
        if self.p < 2:
            raise ValidationError(f"moment order p must be >= 2, got {self.p}")
        if not (0 < self.dt <= self.T):
            raise ValidationError(f"need 0 < dt <= T, got dt={self.dt}, T={self.T}")
        if self.N < 1 or self.M < 1:
            raise ValidationError("N and M must be >= 1")
        if self.initial.herder_start.shape != (self.M, self.d):
            raise DimensionError(
                f"herder_start must have shape ({self.M}, {self.d}), got {self.initial.herder_start.shape}"
            )
        if getattr(self.initial.herd_law, "d", self.d) != self.d:
            raise DimensionError("initial herd law dimension does not match d")
        self.bounds.box(self.d)

    def with_(self, **changes):
        # validation does not depend on N, so a cached report survives N changes
        if set(changes) - {"N"}:
            changes.setdefault("_validation", None)
        return replace(self, **changes)

    @property
    def steps(self):
        return max(1, math.ceil(self.T / self.dt - 1e-9))

    @property
    def times(self):
        return np.minimum(np.arange(self.steps + 1) * self.dt, self.T)

    @property
    def radius(self):
        """Clip radius of the measure features."""
        if self.feature_radius is not None:
            return float(self.feature_radius)
        scale = self.initial.herd_law.scale()
        return 10.0 * (scale if scale > 0 else 1.0)

    @property
    def uses_features(self):
        return self.noises.sigma_i.uses_features or self.noises.sigma_c.uses_features

    @property
    def common_noise(self):
        return not self.noises.sigma_c.is_zero


# -- validation ---------------------------------------------------------------


@dataclass
class CoefficientCheck:
    name: str
    estimate: float
    bound: float
    passed: bool
    note: str = ""


@dataclass
class ValidationReport:
    checks: list

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def failures(self):
        return [c for c in self.checks if not c.passed]

    def rows(self):
        return [(c.name, c.estimate, c.bound, int(c.passed), c.note) for c in self.checks]

    def summary(self):
        bad = self.failures()
        if not bad:
            return "all assumption checks passed"
        return "; ".join(f"{c.name}: sampled constant {c.estimate:.6g} exceeds bound {c.bound:.6g} ({c.note})" for c in bad)


def _finite_or_raise(values, name, points):
    values = np.asarray(values)
    bad = ~np.isfinite(values)
    if np.any(bad):
        flat = bad.reshape(bad.shape[0], -1).any(axis=1) if bad.ndim > 1 else bad
        idx = int(np.argmax(flat))
        raise ValidationError(f"{name} is not finite at sampled point {points[idx].tolist()}", name, points[idx])


def _validation_radius(spec):
    scale = spec.initial.herd_law.scale()
    herders = float(np.max(np.abs(spec.initial.herder_start)))
    return max(4.0 * scale, herders, 1.0) + 1.0


def _grid(d, size, radius):
    axis = np.linspace(-radius, radius, size)
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def sampled_lipschitz(fn, points, rng, n_random=2000, radius=1.0, name="fn"):
    """Largest difference quotient ``|f(y)-f(x)| / |y-x|`` over all grid pairs plus random pairs."""
    vals = np.asarray(fn(points), dtype=float)
    _finite_or_raise(vals, name, points)
    best = 0.0
    for start in range(0, len(points), 256):
        dx = maxnorm(points[start : start + 256, None, :] - points[None, :, :])
        dv = maxnorm((vals[start : start + 256, None] - vals[None, :]).reshape(dx.shape + (-1,)))
        mask = dx > 0
        if np.any(mask):
            best = max(best, float(np.max(dv[mask] / dx[mask])))
    d = points.shape[1]
    a = rng.uniform(-radius, radius, (n_random, d))
    b = a + rng.normal(scale=radius * 0.05, size=(n_random, d))
    fa, fb = np.asarray(fn(a), float), np.asarray(fn(b), float)
    _finite_or_raise(fa, name, a)
    _finite_or_raise(fb, name, b)
    dx = maxnorm(a - b)
    dv = maxnorm((fa - fb).reshape(n_random, -1))
    mask = dx > 0
    if np.any(mask):
        best = max(best, float(np.max(dv[mask] / dx[mask])))
    return best


def _noise_samples(spec, rng, n, radius):
    d, M = spec.d, spec.M
    t = rng.uniform(0.0, spec.T, n)
    Y = rng.uniform(-radius, radius, (n, M, d))
    x = rng.uniform(-radius, radius, (n, 1, d))
    clouds = rng.uniform(-radius, radius, (n, 8, d))
    feats = feature_array(clouds, spec.radius)
    return t, Y, x, feats


def _eval_noise_rows(noise, t, Y, x, feats):
    # evaluate one sample at a time when t varies
    out = np.empty((len(t), x.shape[-1], x.shape[-1]))
    for k in range(len(t)):
        out[k] = noise(float(t[k]), Y[k], x[k], feats[k])[0]
    return out


def noise_lipschitz(spec, noise, rng, n_pairs=400, radius=1.0, name="noise"):
    t, Y1, x1, f1 = _noise_samples(spec, rng, n_pairs, radius)
    Y2 = Y1 + rng.normal(scale=0.05 * radius, size=Y1.shape)
    x2 = x1 + rng.normal(scale=0.05 * radius, size=x1.shape)
    f2 = f1 + rng.normal(scale=0.05 * radius, size=f1.shape)
    s1 = _eval_noise_rows(noise, t, Y1, x1, f1)
    s2 = _eval_noise_rows(noise, t, Y2, x2, f2)
    probe = np.concatenate([Y1.reshape(n_pairs, -1), x1.reshape(n_pairs, -1)], axis=1)
    _finite_or_raise(s1, name, probe)
    _finite_or_raise(s2, name, probe)
    dist = maxnorm(Y1 - Y2, axis=(-2, -1)) + maxnorm(x1 - x2, axis=(-2, -1)) + maxnorm(f1 - f2)
    dv = maxnorm((s1 - s2).reshape(n_pairs, -1))
    return float(np.max(dv / dist))


def noise_time_modulus(spec, noise, rng, size, radius):
    """Largest jump between neighbouring time-grid values at fixed random states."""
    ts = np.linspace(0.0, spec.T, max(size, 2))
    _, Y, x, feats = _noise_samples(spec, rng, 16, radius)
    vals = np.stack([_eval_noise_rows(noise, np.full(16, t), Y, x, feats) for t in ts])
    probe = np.concatenate([Y.reshape(16, -1), x.reshape(16, -1)], axis=1)
    _finite_or_raise(vals.transpose(1, 0, 2, 3), noise.family, probe)
    return float(np.max(np.abs(np.diff(vals, axis=0)))) if len(ts) > 1 else 0.0


def validate_assumptions(spec, grid_size=21, seed=VALIDATION_SEED, costs=None, control=None):
    """Sample every coefficient and compare difference quotients with the bounds.

    Kernels are checked on all pairs of a ``grid_size^d`` grid plus random
    nearby pairs; noises on random nearby pairs of ``(Y, x, features)``.
    Cost functions and a control parametrization are checked when given.
    """
    if grid_size < 2:
        raise ValueError("grid_size must be >= 2")
    rng = np.random.default_rng(seed)
    radius = _validation_radius(spec)
    size = grid_size if spec.d == 1 else max(2, int(round(grid_size ** (2.0 / (spec.d + 1)))))
    pts = _grid(spec.d, size, radius)
    L = spec.bounds.L
    checks = []
    for name, k in spec.kernels.items():
        est = sampled_lipschitz(k, pts, rng, radius=radius, name=name)
        checks.append(CoefficientCheck(name, est, L, est <= L * (1 + 1e-9), "kernel Lipschitz bound"))
    for name, s in spec.noises.items():
        est = noise_lipschitz(spec, s, rng, radius=radius, name=name)
        checks.append(CoefficientCheck(name, est, L, est <= L * (1 + 1e-9), "noise Lipschitz bound in (Y, x, measure)"))
        jump = noise_time_modulus(spec, s, rng, grid_size, radius)
        checks.append(CoefficientCheck(f"{name}.time", jump, math.inf, bool(np.isfinite(jump)), "continuity in time"))
    if costs is not None:
        checks.extend(costs.check(spec, rng, grid_size))
    if control is not None:
        checks.extend(control.check(spec, rng))
    return ValidationReport(checks)


def ensure_valid(spec):
    """Validate once and cache the report on the spec; raise if any check fails."""
    report = spec._validation
    if report is None:
        report = validate_assumptions(spec)
        object.__setattr__(spec, "_validation", report)
    if not report.passed:
        raise ValidationError(f"system fails assumption checks: {report.summary()}", report.failures()[0].name)
    return report


# -- drift and diffusion fields ------------------------------------------------


def _check_point(spec, x, name="x"):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (spec.d,):
        raise DimensionError(f"{name} must have shape ({spec.d},), got {x.shape}")
    return x


def _check_herders(spec, Y):
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if spec.d == 1 and Y.shape == (1, spec.M) and spec.M > 1:
        Y = Y.T
    if Y.shape != (spec.M, spec.d):
        raise DimensionError(f"herder array must have shape ({spec.M}, {spec.d}), got {Y.shape}")
    return Y


def _check_cloud(spec, mu):
    mu = as_measure(mu)
    if mu.d != spec.d:
        raise DimensionError(f"measure lives in dimension {mu.d}, system has d={spec.d}")
    return mu


def herd_drift(kernels, X, Y, at=None):
    """Batched herd drift ``H1*mu(x) + mean_m K1(Y_m - x)`` at ``at`` (defaults to ``X``)."""
    at = X if at is None else at
    v = kernels.H1.convolve(X, at)
    if not kernels.K1.is_zero:
        v = v + kernels.K1(Y[..., None, :, :] - at[..., :, None, :]).mean(axis=-2)
    return v


def herder_drift(kernels, X, Y):
    """Batched herder drift without the control term; self-interaction included."""
    v = kernels.K2.convolve(X, Y)
    if not kernels.H2.is_zero:
        v = v + kernels.H2(Y[..., :, None, :] - Y[..., None, :, :]).mean(axis=-2)
    return v


def eval_drift_herd(spec, x, Y, mu):
    """Drift of a single herd particle at ``x`` given herders ``Y`` and measure ``mu``."""
    x = _check_point(spec, x)
    Y = _check_herders(spec, Y)
    mu = _check_cloud(spec, mu)
    return herd_drift(spec.kernels, mu.points, Y, at=x[None, :])[0]


def eval_drift_herder(spec, m, Y, mu, u_m):
    """Velocity of herder ``m`` (1-based) including control ``u_m``."""
    if not 1 <= m <= spec.M:
        raise IndexError(f"herder index {m} outside 1..{spec.M}")
    Y = _check_herders(spec, Y)
    mu = _check_cloud(spec, mu)
    u_m = _check_point(spec, u_m, "u_m")
    return herder_drift(spec.kernels, mu.points, Y)[m - 1] + u_m


def eval_diffusions(spec, t, Y, x, mu):
    """Idiosyncratic and common noise matrices at one point."""
    if not 0.0 <= t <= spec.T * (1 + 1e-12):
        raise ValueError(f"t={t} outside [0, {spec.T}]")
    x = _check_point(spec, x)
    Y = _check_herders(spec, Y)
    mu = _check_cloud(spec, mu)
    feats = feature_array(mu.points, spec.radius)
    si = spec.noises.sigma_i(float(t), Y, x[None, :], feats)[0]
    sc = spec.noises.sigma_c(float(t), Y, x[None, :], feats)[0]
    if not (np.all(np.isfinite(si)) and np.all(np.isfinite(sc))):
        raise CoefficientError(f"noise coefficient not finite at t={t}, x={x.tolist()}")
    return si, sc


__all__ = [
    "AssumptionBounds",
    "EmpiricalMeasure",
    "InitialLaw",
    "KernelSet",
    "NoiseSet",
    "SystemSpec",
    "ValidationReport",
    "ensure_valid",
    "eval_diffusions",
    "eval_drift_herd",
    "eval_drift_herder",
    "validate_assumptions",
]
