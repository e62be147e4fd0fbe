"""Spec builders shared by the test modules."""

import numpy as np

from herdlab.coefficients import ConstantNoise, GaussianLaw, LinearKernel, ZeroKernel, ZeroNoise
from herdlab.model import AssumptionBounds, InitialLaw, KernelSet, NoiseSet, SystemSpec


def make_spec(
    d=1,
    N=64,
    M=1,
    T=1.0,
    dt=0.05,
    p=4.0,
    H1=None,
    H2=None,
    K1=None,
    K2=None,
    sigma_i=0.0,
    sigma_c=0.0,
    mean=0.0,
    std=1.0,
    herders=None,
    L=2.0,
    Mprime=1.0,
    U=(-1.0, 1.0),
    ell=1,
    law=None,
):
    """Compact builder for test systems; scalar noise levels become multiples of Id."""
    z = ZeroKernel(d)
    kernels = KernelSet(H1 or z, H2 or z, K1 or z, K2 or z)

    def noise(s):
        if hasattr(s, "is_zero"):
            return s
        mat = np.asarray(s, dtype=float)
        mat = mat * np.eye(d) if mat.ndim == 0 else mat
        return ZeroNoise(np.zeros((d, d))) if not np.any(mat) else ConstantNoise(mat)

    law = law or GaussianLaw(np.full(d, mean), np.full(d, std))
    Y0 = np.zeros((M, d)) if herders is None else np.asarray(herders, dtype=float).reshape(M, d)
    low = np.full((d, ell), U[0])
    high = np.full((d, ell), U[1])
    return SystemSpec(
        d,
        N,
        M,
        T,
        p,
        dt,
        kernels,
        NoiseSet(noise(sigma_i), noise(sigma_c)),
        InitialLaw(law, Y0),
        AssumptionBounds(L, Mprime, low, high, ell),
    )


def ou_spec(kappa=1.0, sigma=0.5, **kw):
    d = kw.pop("d", 1)
    kw.setdefault("M", 2)
    kw.setdefault("herders", [[-1.0] * d, [1.0] * d][: kw["M"]] if kw["M"] <= 2 else None)
    return make_spec(d=d, H1=LinearKernel(-kappa * np.eye(d)), sigma_i=sigma, **kw)
