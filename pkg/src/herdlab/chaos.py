"""Propagation-of-chaos experiments: coupled errors, Wasserstein rates, conditional covariances."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .dynamics import simulate_batch, stream
from .errors import FitError, ObservableError, UnsupportedError
from .measures import maxnorm, wasserstein_assignment

STREAM_SUBSAMPLE = 3
FAILURE_LIMIT = 0.10
BATCH = 8


# -- predicted rates ------------------------------------------------------------


@dataclass(frozen=True)
class RateExponents:
    q: float
    d: int
    p: float
    exponent: float
    regime: str
    log_factor: bool = False

    def describe(self):
        rate = f"N^{self.exponent:g}"
        return rate + " log(1+N)" if self.log_factor else rate


def _frac(x):
    return Fraction(x).limit_denominator(10**6)


def predicted_exponent(q, d, p):
    """Slowest term of the quantitative law of large numbers for ``E[W_q^q(mu_N, mu)]``.

    Three regimes by the sign of ``q - d/2``; each pairs a dimension term with
    the moment term ``N^(-(p-q)/p)``. The excluded boundary cases
    (``p = 2q`` in the first two regimes, ``p = d/(d-q)`` in the third) and
    ``q >= p`` have no quantitative bound and raise :class:`UnsupportedError`.
    """
    if d not in (1, 2, 3):
        raise UnsupportedError(f"d must be 1, 2 or 3, got {d}")
    if q < 1:
        raise UnsupportedError(f"q must be >= 1, got {q}")
    if q >= p:
        raise UnsupportedError(f"no quantitative rate for q >= p (q={q}, p={p})")
    qf, pf, half_d = _frac(q), _frac(p), Fraction(d, 2)
    moment = -(pf - qf) / pf
    log_factor = False
    if qf > half_d:
        if pf == 2 * qf:
            raise UnsupportedError(f"degenerate case p = 2q (q={q}, p={p})")
        regime, dim = "q>d/2", Fraction(-1, 2)
    elif qf == half_d:
        if pf == 2 * qf:
            raise UnsupportedError(f"degenerate case p = 2q (q={q}, p={p})")
        regime, dim = "q=d/2", Fraction(-1, 2)
    else:
        if pf == Fraction(d) / (Fraction(d) - qf):
            raise UnsupportedError(f"degenerate case p = d/(d-q) (q={q}, d={d}, p={p})")
        regime, dim = "q<d/2", -qf / d
    exponent = max(dim, moment)
    if regime == "q=d/2" and dim >= moment:
        log_factor = True
    return RateExponents(float(q), int(d), float(p), float(exponent), regime, log_factor)


# -- rate experiment -------------------------------------------------------------


@dataclass(frozen=True)
class RateRow:
    N: int
    replicas: int
    q: float
    coupled_err: float
    coupled_se: float
    wq_err: float
    wq_se: float
    failures: int = 0


@dataclass
class RateTable:
    rows: list

    def column(self, name):
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    @property
    def N(self):
        return np.array([r.N for r in self.rows], dtype=float)


def _mean_se(x):
    x = np.asarray(x, dtype=float)
    se = float(np.std(x, ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0
    return float(np.mean(x)), se


def subsample_indices(N, N_ref, seed, replica):
    """Seeded size-N subsample of the reference ensemble, drawn from untracked particles when possible."""
    rng = stream(seed, STREAM_SUBSAMPLE, (replica, N))
    if N_ref - N >= N:
        return N + np.sort(rng.choice(N_ref - N, size=N, replace=False))
    return np.sort(rng.choice(N_ref, size=N, replace=False))


def coupled_error(ref_herd, ref_herders, herd, herders, q):
    """``max_n sup_t |X_n - X_n^N|^q + sup_t |Y - Y^N|^q`` for one replica (trajectories ``(K+1, ., d)``)."""
    n = herd.shape[1]
    dx = float(np.max(maxnorm(ref_herd[:, :n] - herd))) ** q
    dy = float(np.max(maxnorm(ref_herders - herders))) ** q
    return dx + dy


def run_rate_experiment(spec, control, N_list, N_ref, replicas, q, seed):
    """Couple finite systems to a shared reference ensemble and tabulate both error columns.

    Column ``coupled_err`` is the sup-in-time pathwise error of the tracked
    particles plus the herder error; ``wq_err`` is ``W_q^q`` at the final
    time between the finite cloud and a size-N subsample of the reference.
    """
    N_list = [int(n) for n in N_list]
    if any(b <= a for a, b in zip(N_list, N_list[1:])):
        raise ValueError("N_list must be strictly increasing")
    if max(N_list) > N_ref:
        raise ValueError("every N must be <= N_ref")
    if replicas < 8:
        raise ValueError("rate experiments need at least 8 replicas")
    per_N = {N: ([], []) for N in N_list}
    failures = {N: 0 for N in N_list}
    for start in range(0, replicas, BATCH):
        reps = list(range(start, min(start + BATCH, replicas)))
        ref, _ = simulate_batch(spec, control, N_ref, seed, reps)
        for N in N_list:
            fin, _ = simulate_batch(spec.with_(N=N), control, N, seed, reps)
            for j, r in enumerate(reps):
                if ref.failed[j] or fin.failed[j]:
                    failures[N] += 1
                    continue
                a = coupled_error(ref.herd[:, j], ref.herders[:, j], fin.herd[:, j], fin.herders[:, j], q)
                idx = subsample_indices(N, N_ref, seed, r)
                w = wasserstein_assignment(fin.herd[-1, j], ref.herd[-1, j, idx], q) ** q
                per_N[N][0].append(a)
                per_N[N][1].append(w)
    rows = []
    for N in N_list:
        if failures[N] > FAILURE_LIMIT * replicas:
            continue
        a, w = per_N[N]
        ca, sa = _mean_se(a)
        cw, sw = _mean_se(w)
        rows.append(RateRow(N, len(a), float(q), ca, sa, cw, sw, failures[N]))
    return RateTable(rows)


def fit_loglog_slope(table, column="wq_err"):
    """Least-squares line through ``(log N, log value)``; returns ``(slope, intercept, r2)``."""
    if isinstance(table, RateTable):
        N, vals = table.N, table.column(column)
    else:
        N, vals = (np.asarray(a, dtype=float) for a in table)
    if N.size < 3:
        raise FitError("need at least 3 rows to fit a slope")
    if np.any(vals <= 0) or np.any(N <= 0):
        raise FitError(f"column {column!r} has non-positive values; cannot take logs")
    x, y = np.log(N), np.log(vals)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum(resid**2))
    r2 = 1.0 if ss_tot <= 1e-300 or ss_res <= 1e-28 * max(ss_tot, 1.0) else 1.0 - ss_res / ss_tot
    return float(slope), float(intercept), float(r2)


# -- conditional chaos -------------------------------------------------------------


@dataclass(frozen=True)
class Observable:
    """Bounded Lipschitz test observable ``R^d -> R``."""

    fn: object
    bound: float
    lipschitz: float
    name: str = "phi"

    def __call__(self, x):
        vals = np.asarray(self.fn(np.asarray(x, dtype=float)), dtype=float)
        if not np.all(np.isfinite(vals)) or np.any(np.abs(vals) > self.bound * (1 + 1e-12)):
            raise ObservableError(f"observable {self.name} exceeds its declared bound {self.bound} on the samples")
        return vals


def clipped_identity(radius=5.0, coord=0):
    return Observable(lambda x: np.clip(x[..., coord], -radius, radius), float(radius), 1.0, f"clip{coord}")


@dataclass(frozen=True)
class CovarianceRow:
    N: int
    unconditional: float
    unconditional_se: float
    conditional: float
    conditional_se: float
    outer: int
    inner: int


@dataclass
class CovarianceReport:
    rows: list
    common_noise: bool


def _pooled_cov(a, b):
    return float(np.sum((a - a.mean()) * (b - b.mean())) / (a.size - 1))


def conditional_chaos_test(spec, control, N, observables, replicas, seed, inner=16, k=2):
    """Pair covariance of two tagged particles at the final time.

    ``replicas`` outer common-noise paths each carry ``inner`` independent
    draws of initial data and idiosyncratic noise. The conditional covariance
    is computed within each outer group and averaged; the unconditional one
    pools every sample (jackknife error over outer groups).
    """
    if k != 2:
        raise UnsupportedError("only pairs (k = 2) are supported")
    if len(observables) != 2:
        raise ValueError("need exactly two observables")
    if replicas < 2 or inner < 2:
        raise ValueError("need at least 2 outer and 2 inner replicas")
    phi1, phi2 = observables
    N_values = [int(N)] if np.isscalar(N) else [int(n) for n in N]
    rows = []
    for n in N_values:
        if n < 2:
            raise ValueError("need N >= 2 to tag two particles")
        spec_n = spec.with_(N=n)
        a = np.empty((replicas, inner))
        b = np.empty((replicas, inner))
        per_batch = max(1, 256 // inner)
        for start in range(0, replicas, per_batch):
            outers = range(start, min(start + per_batch, replicas))
            reps = [(o, i) for o in outers for i in range(inner)]
            commons = [(o,) for o in outers for _ in range(inner)]
            res, _ = simulate_batch(spec_n, control, n, seed, reps, commons)
            if np.any(res.failed):
                raise ObservableError("a replica blew up during the covariance experiment")
            final = res.herd[-1]
            sl = slice(start, start + len(outers))
            a[sl] = phi1(final[:, 0]).reshape(len(outers), inner)
            b[sl] = phi2(final[:, 1]).reshape(len(outers), inner)
        cond = np.array([_pooled_cov(a[o], b[o]) for o in range(replicas)])
        c_mean, c_se = _mean_se(cond)
        u = _pooled_cov(a.ravel(), b.ravel())
        jack = np.array(
            [_pooled_cov(np.delete(a, o, axis=0).ravel(), np.delete(b, o, axis=0).ravel()) for o in range(replicas)]
        )
        u_se = float(math.sqrt((replicas - 1) / replicas * np.sum((jack - jack.mean()) ** 2)))
        rows.append(CovarianceRow(n, u, u_se, c_mean, c_se, replicas, inner))
    return CovarianceReport(rows, spec.common_noise)
