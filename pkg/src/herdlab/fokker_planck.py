"""Weak-form checks of the measure flow: Fokker-Planck residuals and Feynman-Kac duality."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .dynamics import _noise_matrix, simulate_mean_field_reference, stream
from .errors import MissingNoiseError, UnsupportedError
from .measures import feature_array
from .model import herd_drift

STREAM_KOLMOGOROV = 4


# -- 1-D profiles ---------------------------------------------------------------
#
# Each profile returns (f, f', f'') evaluated elementwise.


@dataclass(frozen=True)
class One:
    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.ones_like(x), np.zeros_like(x), np.zeros_like(x)

    sup = 1.0
    sup_deriv = 0.0


@dataclass(frozen=True)
class Gaussian:
    center: float = 0.0
    width: float = 1.0

    def __call__(self, x):
        z = (np.asarray(x, dtype=float) - self.center) / self.width
        f = np.exp(-0.5 * z**2)
        return f, -z / self.width * f, (z**2 - 1.0) / self.width**2 * f

    @property
    def sup(self):
        return 1.0

    @property
    def sup_deriv(self):
        return math.exp(-0.5) / self.width


@dataclass(frozen=True)
class TanhClip:
    radius: float = 1.0

    def __call__(self, x):
        th = np.tanh(np.asarray(x, dtype=float) / self.radius)
        sech2 = 1.0 - th**2
        return self.radius * th, sech2, -2.0 * th * sech2 / self.radius

    @property
    def sup(self):
        return self.radius

    sup_deriv = 1.0


@dataclass(frozen=True)
class SmoothSquare:
    """``R^2 (1 - exp(-x^2/R^2))``: behaves like ``x^2`` near 0, bounded by ``R^2``."""

    radius: float = 1.0

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        e = np.exp(-(x**2) / self.radius**2)
        return self.radius**2 * -np.expm1(-(x**2) / self.radius**2), 2.0 * x * e, (2.0 - 4.0 * x**2 / self.radius**2) * e

    @property
    def sup(self):
        return self.radius**2

    @property
    def sup_deriv(self):
        return math.sqrt(2.0) * self.radius * math.exp(-0.5)


def _smooth_step(s):
    """C-infinity step: 0 for s <= 0, 1 for s >= 1, with derivatives."""
    s = np.asarray(s, dtype=float)
    val = np.where(s >= 1.0, 1.0, 0.0)
    d1 = np.zeros_like(s)
    d2 = np.zeros_like(s)
    mid = (s > 0.0) & (s < 1.0)
    if np.any(mid):
        m = np.clip(s[mid], 1e-6, 1.0 - 1e-6)
        z = -1.0 / m + 1.0 / (1.0 - m)
        dz = 1.0 / m**2 + 1.0 / (1.0 - m) ** 2
        ddz = -2.0 / m**3 + 2.0 / (1.0 - m) ** 3
        sg = expit(z)
        g1 = sg * (1.0 - sg)
        val[mid] = sg
        d1[mid] = g1 * dz
        d2[mid] = g1 * (1.0 - 2.0 * sg) * dz**2 + g1 * ddz
    return val, d1, d2


@dataclass(frozen=True)
class Plateau:
    """Equal to 1 on ``[-half, half]``, 0 outside ``[-half-edge, half+edge]``, smooth in between."""

    half: float = 1.0
    edge: float = 1.0

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        a, da, dda = _smooth_step((x + self.half + self.edge) / self.edge)
        b, db, ddb = _smooth_step((self.half + self.edge - x) / self.edge)
        da, dda = da / self.edge, dda / self.edge**2
        db, ddb = -db / self.edge, ddb / self.edge**2
        return a * b, da * b + a * db, dda * b + 2 * da * db + a * ddb

    sup = 1.0

    @property
    def sup_deriv(self):
        s = np.linspace(0.0, 1.0, 20001)
        return float(np.max(np.abs(_smooth_step(s)[1]))) / self.edge


# -- test functions -----------------------------------------------------------------


@dataclass(frozen=True)
class TestFunction:
    """Separable product ``phi(x) = prod_i f_i(x_i)`` with analytic gradient and Hessian."""

    __test__ = False  # not a pytest class

    name: str
    profiles: tuple

    @property
    def d(self):
        return len(self.profiles)

    def _parts(self, x):
        x = np.asarray(x, dtype=float)
        f, g, h = zip(*(p(x[..., i]) for i, p in enumerate(self.profiles)))
        return np.stack(f, -1), np.stack(g, -1), np.stack(h, -1)

    def value(self, x):
        f, _, _ = self._parts(x)
        return np.prod(f, axis=-1)

    def __call__(self, x):
        return self.value(x)

    def grad(self, x):
        f, g, _ = self._parts(x)
        out = np.empty_like(f)
        for i in range(self.d):
            out[..., i] = g[..., i] * np.prod(np.delete(f, i, axis=-1), axis=-1)
        return out

    def hessian(self, x):
        f, g, h = self._parts(x)
        d = self.d
        out = np.empty(f.shape + (d,))
        for i in range(d):
            for j in range(d):
                if i == j:
                    out[..., i, i] = h[..., i] * np.prod(np.delete(f, i, axis=-1), axis=-1)
                else:
                    rest = np.prod(np.delete(f, [i, j], axis=-1), axis=-1)
                    out[..., i, j] = g[..., i] * g[..., j] * rest
        return out

    def all(self, x):
        return self.value(x), self.grad(x), self.hessian(x)

    @property
    def lipschitz(self):
        """Upper bound on the Lipschitz constant in the max norm."""
        sups = [p.sup for p in self.profiles]
        total = 0.0
        for i, p in enumerate(self.profiles):
            total += p.sup_deriv * float(np.prod(sups[:i] + sups[i + 1 :]))
        return total


def _on_coord(profile, d, coord=0):
    return tuple(profile if i == coord else One() for i in range(d))


def default_bank(d, scale=1.0, plateau_half=None):
    """Five smooth test functions sized to a cloud of spread ``scale``."""
    s = float(scale)
    half = 4.0 * s if plateau_half is None else float(plateau_half)
    return [
        TestFunction("plateau", tuple(Plateau(half, s) for _ in range(d))),
        TestFunction("bump0", tuple(Gaussian(0.0, s) for _ in range(d))),
        TestFunction("bump_shift", tuple(Gaussian(0.5 * s, s) for _ in range(d))),
        TestFunction("tanh_clip", _on_coord(TanhClip(2.0 * s), d)),
        TestFunction("smooth_square", _on_coord(SmoothSquare(2.0 * s), d)),
    ]


# -- weak residual -------------------------------------------------------------------


@dataclass
class WeakResidualReport:
    names: list
    times: np.ndarray
    residuals: np.ndarray  # (n_phi, K+1)
    dt: float
    N_ref: int
    stochastic_term: bool
    leakage: np.ndarray | None = None  # (n_phi, K+1) plateau leakage bounds

    @property
    def max_abs(self):
        return float(np.max(np.abs(self.residuals)))

    def per_function_max(self):
        return np.max(np.abs(self.residuals), axis=1)


def _coefficients_at(spec, flow, k, points):
    """Drift, idiosyncratic and common matrices at grid time ``k`` for ``points (P, d)``."""
    cloud = flow.clouds[k]
    Y = flow.herders[k]
    t = float(flow.times[k])
    need = spec.uses_features
    feats = feature_array(cloud, spec.radius) if need else np.zeros(2 * spec.d + 1)
    V = herd_drift(spec.kernels, cloud[None], Y[None], at=points[None])[0]
    S_i = _noise_matrix(spec.noises.sigma_i, t, Y, points, feats)
    S_c = _noise_matrix(spec.noises.sigma_c, t, Y, points, feats)
    return V, S_i, S_c


def _outer(S):
    return S @ np.swapaxes(S, -1, -2)


def weak_residual(flow, spec, control, bank, dW_common=None):
    """Residual of the weak Fokker-Planck identity along a simulated flow.

    For each test function and grid time ``t_k``::

        <mu_k, phi> - <mu_0, phi> - sum_{j<k} <mu_j, grad phi . V + tr(H sigma*)/2> h_j
                                  - sum_{j<k} <mu_j, grad phi . sigma_c dW_c(j)>

    with ``sigma* = s_i s_i^T + s_c s_c^T`` and left-endpoint (Ito) sums. The
    last sum is skipped entirely when the common noise is identically zero.
    """
    if dW_common is None:
        dW_common = flow.dW_common
    stochastic = spec.common_noise
    if stochastic and dW_common is None:
        raise MissingNoiseError("common-noise increments are required when the common noise is not zero")
    times = flow.times
    K = times.size - 1
    h = np.diff(times)
    n_phi = len(bank)
    pair = np.empty((n_phi, K + 1))
    gen = np.zeros((n_phi, K))
    sto = np.zeros((n_phi, K))
    abs_gen = np.zeros((n_phi, K))
    for k in range(K + 1):
        X = flow.clouds[k]
        if k == K:
            for i, phi in enumerate(bank):
                pair[i, k] = np.mean(phi.value(X))
            break
        V, S_i, S_c = _coefficients_at(spec, flow, k, X)
        sigma = _outer(S_i) + (_outer(S_c) if stochastic else 0.0)
        kick = None
        if stochastic:
            dW = np.broadcast_to(np.asarray(dW_common[k], dtype=float), X.shape)
            kick = dW @ S_c.T if S_c.ndim == 2 else np.einsum("nij,nj->ni", S_c, dW)
        for i, phi in enumerate(bank):
            val, grad, hess = phi.all(X)
            pair[i, k] = np.mean(val)
            tr = np.einsum("nij,ji->n", hess, sigma) if sigma.ndim == 3 else np.einsum("nij,ji->n", hess, sigma)
            integrand = np.sum(grad * V, axis=-1) + 0.5 * tr
            gen[i, k] = np.mean(integrand) * h[k]
            abs_gen[i, k] = np.mean(np.abs(integrand)) * h[k]
            if stochastic:
                sto[i, k] = np.mean(np.sum(grad * kick, axis=-1))
    zero = np.zeros((n_phi, 1))
    drift_sum = np.concatenate([zero, np.cumsum(gen, axis=1)], axis=1)
    noise_sum = np.concatenate([zero, np.cumsum(sto, axis=1)], axis=1)
    res = pair - pair[:, :1] - drift_sum - noise_sum
    leakage = _leakage(flow, bank, abs_gen, sto)
    return WeakResidualReport(
        [phi.name for phi in bank], times, res, float(spec.dt), flow.N_ref, stochastic, leakage
    )


def _leakage(flow, bank, abs_gen, sto):
    """Triangle-inequality bound for plateau functions: only particles off the plateau contribute."""
    out = np.full((len(bank), flow.times.size), np.nan)
    for i, phi in enumerate(bank):
        if not all(isinstance(p, Plateau) for p in phi.profiles):
            continue
        half = np.array([p.half for p in phi.profiles])
        off = np.mean(np.any(np.abs(flow.clouds) > half, axis=-1), axis=-1)  # (K+1,)
        integrals = np.concatenate([[0.0], np.cumsum(abs_gen[i] + np.abs(sto[i]))])
        out[i] = off + off[0] + integrals
    return out


def mean_max_residual(spec, control, bank, N_ref, replicas, seed):
    """Replica average of ``max_t max_phi |residual|``; the metric used for refinement studies."""
    out = []
    for r in range(replicas):
        _, flow = simulate_mean_field_reference(spec.with_(N=min(spec.N, N_ref)), control, N_ref, seed, r)
        out.append(weak_residual(flow, spec, control, bank).max_abs)
    return float(np.mean(out))


# -- Feynman-Kac -------------------------------------------------------------------------


def _grid_index(times, t):
    k = int(np.argmin(np.abs(times - t)))
    if abs(times[k] - t) > 1e-9 * max(1.0, abs(t)):
        raise ValueError(f"t={t} is not on the flow's time grid")
    return k


def kolmogorov_endpoints(spec, flow, x, t, inner_replicas, seed):
    """Terminal points of the frozen-flow diffusion started from each ``x`` at time ``t``.

    Returns an array ``(P, inner_replicas, d)``. The drift and idiosyncratic
    noise are evaluated against the fixed flow (measure and herders).
    """
    if spec.common_noise:
        raise UnsupportedError("the Feynman-Kac representation is implemented for zero common noise only")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    P, d = x.shape
    k0 = _grid_index(flow.times, t)
    xi = np.repeat(x, inner_replicas, axis=0)
    rng = stream(seed, STREAM_KOLMOGOROV, (k0,))
    h = np.diff(flow.times)
    for k in range(k0, flow.times.size - 1):
        dW = rng.standard_normal(xi.shape) * math.sqrt(h[k])
        V, S_i, _ = _coefficients_at(spec, flow, k, xi)
        noise = dW @ S_i.T if S_i.ndim == 2 else np.einsum("nij,nj->ni", S_i, dW)
        xi = xi + V * h[k] + noise
    return xi.reshape(P, inner_replicas, d)


def feynman_kac_u(spec, flow, phi, x, t, inner_replicas, seed):
    """Monte Carlo value of the backward Kolmogorov solution ``u(t, x) = E[phi(xi_T) | xi_t = x]``.

    Returns ``(estimate, standard_error)``; both are arrays when ``x`` holds
    several points, scalars for a single point.
    """
    single = np.ndim(x) <= 1
    ends = kolmogorov_endpoints(spec, flow, x, t, inner_replicas, seed)
    vals = phi(ends)
    est = vals.mean(axis=1)
    se = vals.std(axis=1, ddof=1) / math.sqrt(inner_replicas) if inner_replicas > 1 else np.zeros_like(est)
    if single:
        return float(est[0]), float(se[0])
    return est, se


@dataclass
class DualityRow:
    phi_id: str
    lhs: float
    rhs: float
    gap: float
    se: float


@dataclass
class DualityReport:
    rows: list
    N_ref: int
    replicas: int
    flow: object = field(default=None, repr=False)

    def within(self, k=3.0):
        return all(abs(r.gap) <= k * r.se + 1e-12 for r in self.rows)


def duality_check(spec, control, phi_list, N_ref, replicas, seed, n_init=None):
    """Compare ``<mu(T), phi>`` with ``<mu_0, u(0, .)>`` for each test function.

    The left side averages ``phi`` over the reference ensemble at ``T``; the
    right side runs ``replicas`` frozen-flow diffusions from each of the first
    ``n_init`` initial particles.
    """
    if spec.common_noise:
        raise UnsupportedError("duality check requires zero common noise")
    _, flow = simulate_mean_field_reference(spec.with_(N=min(spec.N, N_ref)), control, N_ref, seed, 0)
    n_init = N_ref if n_init is None else int(n_init)
    x0 = flow.clouds[0, :n_init]
    # replica-major so each replica's average runs over the initial cloud in order
    ends = np.ascontiguousarray(np.swapaxes(kolmogorov_endpoints(spec, flow, x0, 0.0, replicas, seed), 0, 1))
    final = flow.clouds[-1]
    rows = []
    for i, phi in enumerate(phi_list):
        lv = phi(final)
        rv = np.ascontiguousarray(phi(ends))
        lhs, rhs = float(np.mean(lv)), float(np.mean(np.mean(rv, axis=1)))
        se = math.hypot(np.std(lv, ddof=1) / math.sqrt(lv.size), np.std(rv, ddof=1) / math.sqrt(rv.size))
        rows.append(DualityRow(getattr(phi, "name", f"phi{i}"), lhs, rhs, lhs - rhs, float(se)))
    return DualityReport(rows, N_ref, replicas, flow)
