"""Brownian drivers and the Euler-Maruyama integrator for the herd/herder system.

Random streams are addressed by ``(seed, kind, replica...)`` through
``numpy.random.SeedSequence`` spawn keys. Idiosyncratic increments and initial
positions are drawn particle-major, so particle ``n`` receives the same
numbers whatever the ensemble size; this is what couples a small system to a
large reference ensemble.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .control import ControlParams
from .errors import BlowupError
from .measures import EmpiricalMeasure, feature_array
from .model import ensure_valid, herd_drift, herder_drift

STREAM_COMMON = 0
STREAM_IDIO = 1
STREAM_INITIAL = 2

BINARY_MAGIC = b"HLAB"
BINARY_VERSION = 1
_HEADER = struct.Struct("<4sIIIII8x")


def _key(replica):
    return tuple(int(r) for r in np.atleast_1d(replica))


def stream(seed, kind, replica):
    ss = np.random.SeedSequence(int(seed), spawn_key=(kind,) + _key(replica))
    return np.random.default_rng(ss)


@dataclass(frozen=True, eq=False)
class NoisePaths:
    common: np.ndarray  # (K, d)
    idiosyncratic: np.ndarray  # (N, K, d)
    seed: int
    replica: tuple
    common_replica: tuple
    dt: np.ndarray  # (K,) step lengths

    @property
    def steps(self):
        return self.common.shape[0]


def _step_lengths(spec):
    return np.diff(spec.times)


def sample_noise_paths(spec, seed, replica, n=None, common_replica=None):
    """Brownian increments for one replica.

    ``n`` defaults to ``spec.N``. ``common_replica`` selects the common stream
    separately (defaults to ``replica``), which lets several replicas share
    one common path.
    """
    n = spec.N if n is None else int(n)
    common_replica = replica if common_replica is None else common_replica
    h = _step_lengths(spec)
    K, d = h.size, spec.d
    sq = np.sqrt(h)[:, None]
    common = stream(seed, STREAM_COMMON, common_replica).standard_normal((K, d)) * sq
    idio = stream(seed, STREAM_IDIO, replica).standard_normal((n, K, d)) * sq
    return NoisePaths(common, idio, int(seed), _key(replica), _key(common_replica), h)


def sample_initial_herd(spec, seed, replica, n=None):
    n = spec.N if n is None else int(n)
    return spec.initial.herd_law.sample(stream(seed, STREAM_INITIAL, replica), n)


# -- one step ---------------------------------------------------------------


def _apply(S, dW):
    # S is (d, d) or (..., n, d, d); dW is (..., n, d)
    if S.ndim == 2:
        return dW @ S.T
    return np.einsum("...ij,...j->...i", S, dW)


def euler_step(state, t, dt, drifts, diffusions, dW_i, dW_c):
    """One explicit Euler-Maruyama step with coefficients frozen at ``t``.

    ``state = (X, Y)``, ``drifts = (bX, bY)``, ``diffusions = (S_i, S_c)``.
    Herders follow an ODE and receive no noise.
    """
    X, Y = (np.asarray(a, dtype=float) for a in state)
    bX, bY = drifts
    S_i, S_c = (np.asarray(s, dtype=float) for s in diffusions)
    if not dt > 0:
        raise ValueError("dt must be positive")
    dW_i = np.asarray(dW_i, dtype=float)
    dW_c = np.asarray(dW_c, dtype=float)
    with np.errstate(all="ignore"):
        X_new = X + np.asarray(bX) * dt + _apply(S_i, np.broadcast_to(dW_i, X.shape))
        X_new = X_new + _apply(S_c, np.broadcast_to(dW_c[..., None, :], X.shape))
        Y_new = Y + np.asarray(bY) * dt
    if not (np.all(np.isfinite(X_new)) and np.all(np.isfinite(Y_new))):
        step = int(round(t / dt)) + 1
        raise BlowupError(f"non-finite state at step {step} (t={t})", step=step, time=float(t))
    return X_new, Y_new


# -- trajectories -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TrajectoryBundle:
    herd: np.ndarray  # (K+1, N, d)
    herders: np.ndarray  # (K+1, M, d)
    times: np.ndarray
    spec: object = None
    noise: NoisePaths | None = None

    @property
    def N(self):
        return self.herd.shape[1]

    def measure(self, k):
        return EmpiricalMeasure(self.herd[k])


@dataclass(frozen=True, eq=False)
class MeanFieldFlow:
    """Large-ensemble proxy of the conditional law given one common path."""

    clouds: np.ndarray  # (K+1, N_ref, d)
    herders: np.ndarray  # (K+1, M, d)
    times: np.ndarray
    dW_common: np.ndarray  # (K, d)
    spec: object = None
    control: ControlParams | None = None

    @property
    def N_ref(self):
        return self.clouds.shape[1]

    @property
    def steps(self):
        return self.times.size - 1

    def measure(self, k):
        return EmpiricalMeasure(self.clouds[k])


@dataclass
class BatchResult:
    herd: np.ndarray  # (K+1, R, N, d)
    herders: np.ndarray  # (K+1, R, M, d)
    feats: np.ndarray | None  # (K+1, R, F) when computed
    failed: np.ndarray  # (R,) bool
    failed_step: np.ndarray  # (R,) int, -1 if fine
    times: np.ndarray


def _noise_matrix(noise, t, Y, X, feats):
    if noise.is_constant:
        return noise.matrix
    return noise(t, Y, X, feats)


def integrate(spec, control, X0, Y0, dW_i, dW_c, need_features=None):
    """Euler-Maruyama over the spec's time grid for a batch of replicas.

    Shapes: ``X0 (R, N, d)``, ``Y0 (R, M, d)``, ``dW_i (R, N, K, d)``,
    ``dW_c (R, K, d)``. A replica whose state turns non-finite is frozen at
    zero and flagged in ``failed``; other replicas continue.
    """
    X = np.array(X0, dtype=float)
    Y = np.array(Y0, dtype=float)
    R, N, d = X.shape
    times = spec.times
    K = times.size - 1
    h = np.diff(times)
    if need_features is None:
        need_features = spec.uses_features or control.uses_state
    herd = np.empty((K + 1, R, N, d))
    herders = np.empty((K + 1, R, Y.shape[1], d))
    feats_all = np.empty((K + 1, R, 2 * d + 1)) if need_features else None
    zero_feats = np.zeros((R, 2 * d + 1))
    failed = np.zeros(R, dtype=bool)
    failed_step = np.full(R, -1)
    herd[0], herders[0] = X, Y
    noises = spec.noises
    for k in range(K):
        t = float(times[k])
        with np.errstate(all="ignore"):
            # failed replicas are detected below; silence their overflow noise
            feats = feature_array(X, spec.radius) if need_features else zero_feats
            if need_features:
                feats_all[k] = feats
            u = control(t, Y, feats)
            bX = herd_drift(spec.kernels, X, Y)
            bY = herder_drift(spec.kernels, X, Y) + u
            S_i = _noise_matrix(noises.sigma_i, t, Y, X, feats)
            S_c = _noise_matrix(noises.sigma_c, t, Y, X, feats)
            X = X + bX * h[k] + _apply(S_i, dW_i[:, :, k, :])
            if not noises.sigma_c.is_zero:
                X = X + _apply(S_c, np.broadcast_to(dW_c[:, None, k, :], X.shape))
            Y = Y + bY * h[k]
        bad = ~(np.all(np.isfinite(X), axis=(1, 2)) & np.all(np.isfinite(Y), axis=(1, 2)))
        new = bad & ~failed
        if np.any(new):
            failed_step[new] = k + 1
            failed |= new
        if np.any(failed):
            X[failed] = 0.0
            Y[failed] = 0.0
        herd[k + 1], herders[k + 1] = X, Y
    if need_features:
        feats_all[K] = feature_array(X, spec.radius)
    return BatchResult(herd, herders, feats_all, failed, failed_step, times)


def _raise_blowup(res, replica):
    if res.failed[0]:
        k = int(res.failed_step[0])
        raise BlowupError(
            f"replica {replica}: non-finite state at step {k} (t={res.times[k]:.6g})",
            step=k,
            time=float(res.times[k]),
            replica=replica,
        )


def simulate_finite(spec, control, seed, replica=0):
    """Finite N-particle system for one replica; bit-reproducible."""
    ensure_valid(spec)
    noise = sample_noise_paths(spec, seed, replica)
    X0 = sample_initial_herd(spec, seed, replica)
    res = integrate(spec, control, X0[None], spec.initial.herder_start[None], noise.idiosyncratic[None], noise.common[None])
    _raise_blowup(res, replica)
    return TrajectoryBundle(res.herd[:, 0], res.herders[:, 0], res.times, spec, noise)


def simulate_mean_field_reference(spec, control, N_ref, seed, replica=0):
    """Reference ensemble of ``N_ref`` particles sharing the replica's common path.

    Returns the first ``spec.N`` particles as a trajectory bundle (driven by the
    same idiosyncratic increments and initial data as :func:`simulate_finite`)
    and the full ensemble as a :class:`MeanFieldFlow`.
    """
    if N_ref < spec.N:
        raise ValueError(f"N_ref={N_ref} must be >= N={spec.N}")
    ensure_valid(spec)
    noise = sample_noise_paths(spec, seed, replica, n=N_ref)
    X0 = sample_initial_herd(spec, seed, replica, n=N_ref)
    res = integrate(spec, control, X0[None], spec.initial.herder_start[None], noise.idiosyncratic[None], noise.common[None])
    _raise_blowup(res, replica)
    flow = MeanFieldFlow(res.herd[:, 0], res.herders[:, 0], res.times, noise.common, spec, control)
    tracked = NoisePaths(noise.common, noise.idiosyncratic[: spec.N], noise.seed, noise.replica, noise.common_replica, noise.dt)
    bundle = TrajectoryBundle(res.herd[:, 0, : spec.N], res.herders[:, 0], res.times, spec, tracked)
    return bundle, flow


def simulate_batch(spec, control, n, seed, replicas, common_replicas=None):
    """Integrate several replicas at once (vectorized); blowups are flagged, not raised."""
    ensure_valid(spec)
    common_replicas = replicas if common_replicas is None else common_replicas
    paths = [sample_noise_paths(spec, seed, r, n=n, common_replica=c) for r, c in zip(replicas, common_replicas)]
    X0 = np.stack([sample_initial_herd(spec, seed, r, n=n) for r in replicas])
    Y0 = np.broadcast_to(spec.initial.herder_start, (len(replicas),) + spec.initial.herder_start.shape)
    dW_i = np.stack([p.idiosyncratic for p in paths])
    dW_c = np.stack([p.common for p in paths])
    return integrate(spec, control, X0, Y0, dW_i, dW_c), dW_c


# -- export -----------------------------------------------------------------


def _fmt(x):
    return repr(float(x))


def trajectory_csv_rows(bundle):
    yield ("t", "kind", "index", "coord", "value")
    for k, t in enumerate(bundle.times):
        ts = _fmt(t)
        for kind, arr in (("herd", bundle.herd[k]), ("herder", bundle.herders[k])):
            for i, row in enumerate(arr):
                for c, v in enumerate(row):
                    yield (ts, kind, str(i), str(c), _fmt(v))


def write_trajectory_csv(bundle, path):
    with open(path, "w", newline="\n") as fh:
        for row in trajectory_csv_rows(bundle):
            fh.write(",".join(row) + "\n")


def write_trajectory_binary(bundle, path):
    """Little-endian dump: 32-byte header, herd ``[K+1][N][d]``, herders ``[K+1][M][d]``, times ``[K+1]``."""
    K = bundle.times.size - 1
    _, N, d = bundle.herd.shape
    M = bundle.herders.shape[1]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(BINARY_MAGIC, BINARY_VERSION, K, N, M, d))
        fh.write(np.ascontiguousarray(bundle.herd, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(bundle.herders, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(bundle.times, dtype="<f8").tobytes())


def read_trajectory_binary(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, K, N, M, d = _HEADER.unpack_from(raw)
    if magic != BINARY_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    off = _HEADER.size
    herd = np.frombuffer(raw, "<f8", (K + 1) * N * d, off).reshape(K + 1, N, d)
    off += herd.nbytes
    herders = np.frombuffer(raw, "<f8", (K + 1) * M * d, off).reshape(K + 1, M, d)
    off += herders.nbytes
    times = np.frombuffer(raw, "<f8", K + 1, off)
    return TrajectoryBundle(herd.copy(), herders.copy(), times.copy())
