"""Separated herder controls ``u_m(t, Y, nu) = h_m(t) g_m(Y, nu)``.

``h_m`` is piecewise constant in time with values in the box ``U``; ``g_m`` is
a clipped affine map of the herder positions and the measure features, with
weight rows capped so that ``g_m`` is ``L``-Lipschitz and ``M'``-bounded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .measures import feature_size

_SLACK = 1e-12


@dataclass(frozen=True, eq=False)
class ControlParams:
    h_knots: np.ndarray  # (M, B, d, ell)
    g_weights: np.ndarray  # (M, ell, M*d + F)
    g_bias: np.ndarray  # (M, ell)
    T: float
    L: float
    Mprime: float
    U_low: np.ndarray  # (d, ell)
    U_high: np.ndarray

    def __post_init__(self):
        for name in ("h_knots", "g_weights", "g_bias", "U_low", "U_high"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    # -- construction ---------------------------------------------------------

    @classmethod
    def constant(cls, spec, h=0.0, pieces=8, bias=1.0):
        """Time-constant ``h`` (broadcast to every herder and piece) and ``g = bias`` clipped."""
        d, M, ell = spec.d, spec.M, spec.bounds.ell
        low, high = spec.bounds.box(d)
        h_knots = np.broadcast_to(np.asarray(h, dtype=float), (M, pieces, d, ell)).copy()
        n_in = M * d + feature_size(d)
        params = cls(
            h_knots,
            np.zeros((M, ell, n_in)),
            np.broadcast_to(np.asarray(bias, dtype=float), (M, ell)).copy(),
            spec.T,
            spec.bounds.L,
            spec.bounds.Mprime,
            low,
            high,
        )
        return params.project()

    @classmethod
    def zero(cls, spec, pieces=8):
        return cls.constant(spec, 0.0, pieces)

    @property
    def M(self):
        return self.h_knots.shape[0]

    @property
    def pieces(self):
        return self.h_knots.shape[1]

    @property
    def d(self):
        return self.h_knots.shape[2]

    @property
    def ell(self):
        return self.h_knots.shape[3]

    # -- flattening for the optimizer ------------------------------------------

    def to_vector(self):
        return np.concatenate([self.h_knots.ravel(), self.g_weights.ravel(), self.g_bias.ravel()])

    def from_vector(self, vec):
        vec = np.asarray(vec, dtype=float)
        a = self.h_knots.size
        b = a + self.g_weights.size
        return self.replace(
            h_knots=vec[:a].reshape(self.h_knots.shape),
            g_weights=vec[a:b].reshape(self.g_weights.shape),
            g_bias=vec[b:].reshape(self.g_bias.shape),
        )

    def replace(self, **changes):
        fields = dict(
            h_knots=self.h_knots,
            g_weights=self.g_weights,
            g_bias=self.g_bias,
            T=self.T,
            L=self.L,
            Mprime=self.Mprime,
            U_low=self.U_low,
            U_high=self.U_high,
        )
        fields.update(changes)
        return ControlParams(**fields)

    def vector_bounds(self):
        """Per-coordinate search ranges matching :meth:`to_vector`."""
        lo_h = np.broadcast_to(self.U_low, self.h_knots.shape).ravel()
        hi_h = np.broadcast_to(self.U_high, self.h_knots.shape).ravel()
        w = np.full(self.g_weights.size, self.L)
        b = np.full(self.g_bias.size, self.Mprime)
        return np.concatenate([lo_h, -w, -b]), np.concatenate([hi_h, w, b])

    # -- admissibility ----------------------------------------------------------

    def project(self):
        """Nearest-point style retraction onto the admissible set; idempotent."""
        h = np.clip(self.h_knots, self.U_low[None, None], self.U_high[None, None])
        w = np.array(self.g_weights)
        rows = np.sum(np.abs(w), axis=-1, keepdims=True)
        over = rows > self.L * (1 + _SLACK)
        if np.any(over):
            w = np.where(over, _project_l1_rows(w, self.L), w)
        b = np.clip(self.g_bias, -self.Mprime, self.Mprime)
        return self.replace(h_knots=h, g_weights=w, g_bias=b)

    def is_admissible(self):
        rows = np.sum(np.abs(self.g_weights), axis=-1)
        return bool(
            np.all(self.h_knots >= self.U_low[None, None])
            and np.all(self.h_knots <= self.U_high[None, None])
            and np.all(rows <= self.L * (1 + _SLACK))
            and np.all(np.abs(self.g_bias) <= self.Mprime)
        )

    def check(self, spec, rng, n_pairs=500):
        """Sampled bound and Lipschitz checks for the instantiated shape functions."""
        from .model import CoefficientCheck

        n_in = self.g_weights.shape[-1]
        z1 = rng.uniform(-5, 5, (n_pairs, n_in))
        z2 = z1 + rng.normal(scale=0.1, size=z1.shape)
        g1, g2 = self._g(z1), self._g(z2)
        bound = float(np.max(np.abs(g1)))
        lip = float(np.max(np.max(np.abs(g1 - g2), axis=(-2, -1)) / np.max(np.abs(z1 - z2), axis=-1)))
        return [
            CoefficientCheck("g.bound", bound, self.Mprime, bound <= self.Mprime * (1 + 1e-12), "shape function bound"),
            CoefficientCheck("g.lipschitz", lip, self.L, lip <= self.L * (1 + 1e-9), "shape function Lipschitz bound"),
            CoefficientCheck("h.box", 0.0, 0.0, self.is_admissible(), "time profile inside U"),
        ]

    # -- evaluation -------------------------------------------------------------

    def piece_index(self, t):
        k = int(np.floor(t / self.T * self.pieces))
        return min(max(k, 0), self.pieces - 1)

    def h_at(self, t):
        return self.h_knots[:, self.piece_index(t)]

    def _g(self, z):
        # z (..., n_in) -> (..., M, ell)
        lin = np.einsum("mlk,...k->...ml", self.g_weights, z) + self.g_bias
        return np.clip(lin, -self.Mprime, self.Mprime)

    def g_values(self, Y, feats):
        Y = np.asarray(Y, dtype=float)
        feats = np.asarray(feats, dtype=float)
        z = np.concatenate([Y.reshape(Y.shape[:-2] + (-1,)), feats], axis=-1)
        return self._g(z)

    @property
    def uses_state(self):
        return bool(np.any(self.g_weights))

    def __call__(self, t, Y, feats):
        return instantiate_control(self, t, Y, feats)


def _project_l1_rows(w, radius):
    """Euclidean projection of each trailing-axis row onto the L1 ball."""
    shape = w.shape
    flat = w.reshape(-1, shape[-1])
    out = np.empty_like(flat)
    for i, v in enumerate(flat):
        a = np.abs(v)
        if a.sum() <= radius:
            out[i] = v
            continue
        s = np.sort(a)[::-1]
        cs = np.cumsum(s)
        k = np.arange(1, len(s) + 1)
        rho = np.nonzero(s * k > cs - radius)[0][-1]
        theta = (cs[rho] - radius) / (rho + 1.0)
        out[i] = np.sign(v) * np.maximum(a - theta, 0.0)
    return out.reshape(shape)


def instantiate_control(params, t, Y, feats):
    """``u_m = h_m(t) @ g_m(Y, features)`` for every herder; returns ``(..., M, d)``."""
    h = params.h_at(t)  # (M, d, ell)
    g = params.g_values(Y, feats)  # (..., M, ell)
    return np.einsum("mdl,...ml->...md", h, g)
