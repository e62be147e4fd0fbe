"""Running, transient and endpoint cost families.

Signatures (batched over replicas ``R``):

* running   ``rho(h (M, d, ell), g (R, M, ell)) -> (R,)``
* transient ``tau(t, Y (R, M, d), X (R, N, d), feats (R, F)) -> (R,)``
* endpoint  ``eps(Y, X, feats) -> (R,)``

Every family carries a ``weight`` so that scaling a cost is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .coefficients import _build
from .errors import ScenarioError
from .measures import maxnorm


class CostTerm:
    family = "abstract"
    weight = 1.0

    def scaled(self, lam):
        return replace(self, weight=self.weight * lam)

    def to_dict(self):
        raise NotImplementedError


# -- running cost ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ZeroRunning(CostTerm):
    weight: float = 0.0
    family = "zero"

    def __call__(self, h, g):
        return np.zeros(np.asarray(g).shape[:-2])

    def to_dict(self):
        return {"family": "zero"}


@dataclass(frozen=True, eq=False)
class QuadraticRunning(CostTerm):
    """``weight * sum_m |h_m - target|^2 + g_weight * sum_m |g_m|^2`` (Euclidean)."""

    weight: float = 1.0
    target: np.ndarray = 0.0
    g_weight: float = 0.0
    family = "quadratic"

    def __post_init__(self):
        object.__setattr__(self, "target", np.asarray(self.target, dtype=float))

    def scaled(self, lam):
        return replace(self, weight=self.weight * lam, g_weight=self.g_weight * lam)

    def __call__(self, h, g):
        g = np.asarray(g, dtype=float)
        dh = float(np.sum((np.asarray(h) - self.target) ** 2))
        return self.weight * dh + self.g_weight * np.sum(g**2, axis=(-2, -1))

    def to_dict(self):
        return {
            "family": "quadratic",
            "weight": float(self.weight),
            "target": self.target.tolist(),
            "g_weight": float(self.g_weight),
        }


@dataclass(frozen=True, eq=False)
class EffortRunning(CostTerm):
    """``weight * sum_m |h_m g_m|^2``: squared magnitude of the applied control."""

    weight: float = 1.0
    family = "effort"

    def __call__(self, h, g):
        u = np.einsum("mdl,...ml->...md", np.asarray(h, dtype=float), np.asarray(g, dtype=float))
        return self.weight * np.sum(u**2, axis=(-2, -1))

    def to_dict(self):
        return {"family": "effort", "weight": float(self.weight)}


# -- state costs (transient and endpoint share families) --------------------------


@dataclass(frozen=True, eq=False)
class ZeroState(CostTerm):
    weight: float = 0.0
    family = "zero"

    def __call__(self, t, Y, X, feats):
        return np.zeros(np.asarray(X).shape[:-2])

    def to_dict(self):
        return {"family": "zero"}


@dataclass(frozen=True, eq=False)
class ConstantState(CostTerm):
    weight: float = 1.0
    family = "constant"

    def __call__(self, t, Y, X, feats):
        return np.full(np.asarray(X).shape[:-2], self.weight)

    def to_dict(self):
        return {"family": "constant", "value": float(self.weight)}


@dataclass(frozen=True, eq=False)
class MeanDistanceState(CostTerm):
    """``weight * min(|mean(herd) - target|, cap)``; Lipschitz in W1."""

    weight: float = 1.0
    target: np.ndarray = 0.0
    cap: float = math.inf
    family = "mean_distance"

    def __post_init__(self):
        object.__setattr__(self, "target", np.atleast_1d(np.asarray(self.target, dtype=float)))

    def __call__(self, t, Y, X, feats):
        m = np.asarray(X, dtype=float).mean(axis=-2)
        return self.weight * np.minimum(maxnorm(m - self.target), self.cap)

    def to_dict(self):
        out = {"family": "mean_distance", "weight": float(self.weight), "target": self.target.tolist()}
        if math.isfinite(self.cap):
            out["cap"] = float(self.cap)
        return out


@dataclass(frozen=True, eq=False)
class HerderDistanceState(CostTerm):
    """``weight * min(mean_m |Y_m - target|, cap)``."""

    weight: float = 1.0
    target: np.ndarray = 0.0
    cap: float = math.inf
    family = "herder_distance"

    def __post_init__(self):
        object.__setattr__(self, "target", np.atleast_1d(np.asarray(self.target, dtype=float)))

    def __call__(self, t, Y, X, feats):
        dist = maxnorm(np.asarray(Y, dtype=float) - self.target).mean(axis=-1)
        return self.weight * np.minimum(dist, self.cap)

    def to_dict(self):
        out = {"family": "herder_distance", "weight": float(self.weight), "target": self.target.tolist()}
        if math.isfinite(self.cap):
            out["cap"] = float(self.cap)
        return out


@dataclass(frozen=True, eq=False)
class SmoothedSecondMoment(CostTerm):
    """``weight * <mu, R^2 (1 - exp(-|x|_2^2 / R^2))>``: bounded, Lipschitz stand-in for ``<mu, |x|^2>``."""

    weight: float = 1.0
    radius: float = 1.0
    family = "smoothed_second_moment"

    def __call__(self, t, Y, X, feats):
        r2 = np.sum(np.asarray(X, dtype=float) ** 2, axis=-1)
        vals = self.radius**2 * -np.expm1(-r2 / self.radius**2)
        return self.weight * vals.mean(axis=-1)

    def to_dict(self):
        return {"family": "smoothed_second_moment", "weight": float(self.weight), "radius": float(self.radius)}


_RUNNING = {
    "zero": lambda p, d: ZeroRunning(),
    "quadratic": lambda p, d: QuadraticRunning(
        float(p.pop("weight", 1.0)), np.asarray(p.pop("target", 0.0), dtype=float), float(p.pop("g_weight", 0.0))
    ),
    "effort": lambda p, d: EffortRunning(float(p.pop("weight", 1.0))),
}

_STATE = {
    "zero": lambda p, d: ZeroState(),
    "constant": lambda p, d: ConstantState(float(p.pop("value"))),
    "mean_distance": lambda p, d: MeanDistanceState(
        float(p.pop("weight", 1.0)), p.pop("target"), float(p.pop("cap", math.inf))
    ),
    "herder_distance": lambda p, d: HerderDistanceState(
        float(p.pop("weight", 1.0)), p.pop("target"), float(p.pop("cap", math.inf))
    ),
    "smoothed_second_moment": lambda p, d: SmoothedSecondMoment(float(p.pop("weight", 1.0)), float(p.pop("radius"))),
}


class _Endpoint:
    """Adapter dropping the time argument for endpoint costs."""

    def __init__(self, term):
        self.term = term

    def __call__(self, Y, X, feats):
        return self.term(None, Y, X, feats)


@dataclass(frozen=True, eq=False)
class CostSpec:
    psi_rho: CostTerm
    psi_tau: CostTerm
    psi_eps: CostTerm

    @classmethod
    def zeros(cls):
        return cls(ZeroRunning(), ZeroState(), ZeroState())

    @classmethod
    def from_dict(cls, spec, d):
        if not isinstance(spec, dict):
            raise ScenarioError("costs: expected an object", field="costs")
        extra = set(spec) - {"running", "transient", "endpoint"}
        if extra:
            key = sorted(extra)[0]
            raise ScenarioError(f"costs: unknown field {key!r}", field=f"costs.{key}")
        zero = {"family": "zero"}
        return cls(
            _build(_RUNNING, spec.get("running", zero), d, "costs.running"),
            _build(_STATE, spec.get("transient", zero), d, "costs.transient"),
            _build(_STATE, spec.get("endpoint", zero), d, "costs.endpoint"),
        )

    def to_dict(self):
        return {
            "running": self.psi_rho.to_dict(),
            "transient": self.psi_tau.to_dict(),
            "endpoint": self.psi_eps.to_dict(),
        }

    def scaled(self, lam):
        return CostSpec(self.psi_rho.scaled(lam), self.psi_tau.scaled(lam), self.psi_eps.scaled(lam))

    def endpoint(self, Y, X, feats):
        return self.psi_eps(None, Y, X, feats)

    def check(self, spec, rng, grid_size=11, n_pairs=400):
        """Midpoint convexity of the running cost in ``h`` and sampled continuity moduli."""
        from .model import CoefficientCheck

        d, M, ell = spec.d, spec.M, spec.bounds.ell
        low, high = spec.bounds.box(d)
        h1 = rng.uniform(low, high, (n_pairs, M, d, ell))
        h2 = rng.uniform(low, high, (n_pairs, M, d, ell))
        g = rng.uniform(-spec.bounds.Mprime, spec.bounds.Mprime, (n_pairs, 1, M, ell))
        worst = 0.0
        for a, b, gg in zip(h1, h2, g):
            mid = self.psi_rho(0.5 * (a + b), gg)[0]
            ends = 0.5 * (self.psi_rho(a, gg)[0] + self.psi_rho(b, gg)[0])
            worst = max(worst, float(mid - ends))
        scale = max(1.0, abs(ends))
        checks = [CoefficientCheck("psi_rho.convexity", worst, 0.0, worst <= 1e-9 * scale, "convex in the time profile")]
        span = 2.0 * max(1.0, spec.initial.herd_law.scale())
        for name, term in (("psi_tau", self.psi_tau), ("psi_eps", self.psi_eps)):
            X1 = rng.uniform(-span, span, (n_pairs, 8, d))
            Y1 = rng.uniform(-span, span, (n_pairs, M, d))
            X2 = X1 + rng.normal(scale=0.01 * span, size=X1.shape)
            Y2 = Y1 + rng.normal(scale=0.01 * span, size=Y1.shape)
            t = 0.5 * spec.T
            f = np.zeros((n_pairs, 2 * d + 1))
            v1, v2 = term(t, Y1, X1, f), term(t, Y2, X2, f)
            dist = maxnorm(X1 - X2, axis=(-2, -1)) + maxnorm(Y1 - Y2, axis=(-2, -1))
            ratio = float(np.max(np.abs(v1 - v2) / dist))
            ok = bool(np.isfinite(ratio))
            checks.append(CoefficientCheck(f"{name}.modulus", ratio, math.inf, ok, "finite sampled continuity modulus"))
        return checks
