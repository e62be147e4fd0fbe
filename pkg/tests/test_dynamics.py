import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import make_spec, ou_spec
from oracles import euler_ou_variance, ou_variance, ou_variance_ode
from herdlab.coefficients import AtomsLaw, GaussianLaw, LinearKernel
from herdlab.control import ControlParams
from herdlab.dynamics import (
    euler_step,
    integrate,
    read_trajectory_binary,
    sample_initial_herd,
    sample_noise_paths,
    simulate_batch,
    simulate_finite,
    simulate_mean_field_reference,
    write_trajectory_binary,
    write_trajectory_csv,
)
from herdlab.errors import BlowupError, ValidationError
from herdlab.model import ensure_valid


def zero_control(spec, pieces=1):
    return ControlParams.zero(spec, pieces)


class TestNoise:
    def test_deterministic(self):
        spec = make_spec(N=5, sigma_i=1.0, sigma_c=1.0)
        a, b = sample_noise_paths(spec, 9, 3), sample_noise_paths(spec, 9, 3)
        assert np.array_equal(a.common, b.common) and np.array_equal(a.idiosyncratic, b.idiosyncratic)

    def test_stream_separation(self):
        spec = make_spec(N=2)
        paths = sample_noise_paths(spec, 9, 0)
        assert paths.common.shape == (spec.steps, 1)
        assert not np.array_equal(paths.idiosyncratic[0], paths.idiosyncratic[1])
        other = sample_noise_paths(spec, 9, 1)
        assert not np.array_equal(paths.common, other.common)

    @pytest.mark.invariant
    def test_prefix_stable_per_particle(self):
        spec = make_spec(N=4)
        small = sample_noise_paths(spec, 1, 0)
        big = sample_noise_paths(spec, 1, 0, n=64)
        assert np.array_equal(big.idiosyncratic[:4], small.idiosyncratic)
        assert np.array_equal(big.common, small.common)
        assert np.array_equal(sample_initial_herd(spec, 1, 0, 64)[:4], sample_initial_herd(spec, 1, 0))

    def test_increment_statistics(self):
        spec = make_spec(N=10_000, T=1.0, dt=0.01)
        inc = sample_noise_paths(spec, 2024, 0).idiosyncratic.ravel()
        n = inc.size
        assert n == 1_000_000
        assert abs(inc.mean()) <= 4 * math.sqrt(0.01 / n)
        # Var of the sample variance of Gaussians is 2 sigma^4 / n
        assert abs(inc.var() - 0.01) <= 4 * math.sqrt(2 * 0.01**2 / n)

    def test_shared_common_replica(self):
        spec = make_spec(N=3)
        a = sample_noise_paths(spec, 4, (0, 1), common_replica=(0,))
        b = sample_noise_paths(spec, 4, (0, 2), common_replica=(0,))
        assert np.array_equal(a.common, b.common)
        assert not np.array_equal(a.idiosyncratic, b.idiosyncratic)


class TestEulerStep:
    def test_frozen(self):
        X, Y = np.array([[1.0], [2.0]]), np.array([[0.5]])
        Z = np.zeros((1, 1))
        X2, Y2 = euler_step((X, Y), 0.0, 0.1, (np.zeros_like(X), np.zeros_like(Y)), (Z, Z), np.ones_like(X), np.ones(1))
        assert np.array_equal(X2, X) and np.array_equal(Y2, Y)

    def test_linear_drift(self):
        X, Y = np.array([[1.0]]), np.array([[0.0]])
        Z = np.zeros((1, 1))
        X2, _ = euler_step((X, Y), 0.0, 0.1, (-X, np.zeros_like(Y)), (Z, Z), np.zeros_like(X), np.zeros(1))
        assert X2[0, 0] == pytest.approx(0.9, abs=1e-15)

    def test_pure_noise(self):
        X, Y = np.array([[1.0, -1.0]]), np.zeros((1, 2))
        w = np.array([[0.3, -0.2]])
        X2, Y2 = euler_step((X, Y), 0.0, 0.1, (np.zeros_like(X), np.ones_like(Y)), (np.eye(2), np.zeros((2, 2))), w, np.zeros(2))
        np.testing.assert_array_equal(X2, X + w)
        np.testing.assert_allclose(Y2, 0.1)  # herders get the drift and no noise

    def test_blowup(self):
        X = np.array([[1e308]])
        with pytest.raises(BlowupError) as err:
            euler_step((X, X), 0.2, 0.1, (np.full_like(X, np.inf), X), (np.zeros((1, 1)),) * 2, X * 0, np.zeros(1))
        assert err.value.step == 3
        assert err.value.exit_code == 3


class TestSimulateFinite:
    @pytest.mark.invariant
    def test_bit_reproducible(self):
        spec = ou_spec(N=32)
        a = simulate_finite(spec, zero_control(spec), 5, 2)
        b = simulate_finite(spec, zero_control(spec), 5, 2)
        assert np.array_equal(a.herd, b.herd) and np.array_equal(a.herders, b.herders)

    def test_initial_data_and_shapes(self):
        spec = ou_spec(N=16, dt=0.1)
        bundle = simulate_finite(spec, zero_control(spec), 3, 0)
        assert bundle.herd.shape == (spec.steps + 1, 16, 1)
        assert np.array_equal(bundle.herd[0], sample_initial_herd(spec, 3, 0))
        assert np.array_equal(bundle.herders[0], spec.initial.herder_start)
        assert np.all(np.isfinite(bundle.herd))

    def test_pure_brownian(self):
        spec = make_spec(N=1, sigma_i=1.0)
        bundle = simulate_finite(spec, zero_control(spec), 8, 0)
        inc = bundle.noise.idiosyncratic[0]
        expect = bundle.herd[0] + np.concatenate([np.zeros((1, 1)), np.cumsum(inc, axis=0)])
        np.testing.assert_allclose(bundle.herd[:, 0], expect, atol=1e-14)

    def test_constant_control_moves_herder_linearly(self):
        spec = make_spec(M=2, T=2.0, dt=0.1, U=(-1.0, 1.0))
        params = ControlParams.constant(spec, 0.75, 1)
        bundle = simulate_finite(spec, params, 0, 0)
        np.testing.assert_allclose(bundle.herders[-1], spec.initial.herder_start + 0.75 * 2.0, atol=1e-13)

    def test_ou_variance(self):
        spec = ou_spec(kappa=1.0, sigma=0.5, N=8192, dt=0.01, M=1, herders=[[0.0]])
        bundle = simulate_finite(spec, zero_control(spec), 11, 0)
        exact = ou_variance(1.0, 1.0, 0.5, 1.0)
        assert exact == pytest.approx(ou_variance_ode(1.0, 1.0, 0.5, 1.0), abs=1e-9)
        bias = abs(euler_ou_variance(1.0, 1.0, 0.5, 0.01, 100) - exact)
        se = exact * math.sqrt(2 / 8192)
        assert abs(bundle.herd[-1].var() - exact) <= 4 * se + bias

    def test_unvalidated_spec_rejected(self):
        spec = make_spec(H1=LinearKernel([[-3.0]]), L=1.0)
        with pytest.raises(ValidationError):
            simulate_finite(spec, zero_control(spec), 0, 0)

    def test_blowup_reported(self):
        spec = make_spec(N=4, T=100.0, dt=0.1, H1=LinearKernel([[-50.0]]), L=50.0, sigma_i=0.1)
        with pytest.raises(BlowupError) as err:
            simulate_finite(spec, zero_control(spec), 0, 4)
        assert err.value.replica == 4 and err.value.step > 0

    def test_batch_flags_instead_of_raising(self):
        spec = make_spec(N=4, T=100.0, dt=0.1, H1=LinearKernel([[-50.0]]), L=50.0, sigma_i=0.1)
        res, _ = simulate_batch(spec, zero_control(spec), 4, 0, [0, 1])
        assert res.failed.all()


class TestMeanFieldReference:
    def test_same_size_coupling_is_exact(self):
        spec = ou_spec(N=64, sigma=0.5)
        fin = simulate_finite(spec, zero_control(spec), 3, 1)
        tracked, flow = simulate_mean_field_reference(spec, zero_control(spec), 64, 3, 1)
        assert np.array_equal(fin.herd, tracked.herd)
        assert np.array_equal(fin.herders, flow.herders)

    def test_tracked_particles_share_streams(self):
        spec = ou_spec(N=16)
        tracked, flow = simulate_mean_field_reference(spec, zero_control(spec), 256, 3, 0)
        fin = simulate_finite(spec, zero_control(spec), 3, 0)
        assert np.array_equal(tracked.herd[0], fin.herd[0])
        assert np.array_equal(tracked.noise.idiosyncratic, fin.noise.idiosyncratic)
        assert flow.N_ref == 256

    def test_frozen_flow_constant(self):
        spec = make_spec(N=8)
        _, flow = simulate_mean_field_reference(spec, zero_control(spec), 128, 0, 0)
        assert np.array_equal(flow.clouds, np.broadcast_to(flow.clouds[0], flow.clouds.shape))

    def test_ou_second_moment(self):
        spec = ou_spec(N=8, M=1, herders=[[0.0]], dt=0.01)
        _, flow = simulate_mean_field_reference(spec, zero_control(spec), 16384, 21, 0)
        for k in (25, 50, 100):
            t = flow.times[k]
            v = flow.clouds[k].var()
            exact = ou_variance(1.0, 1.0, 0.5, t)
            bias = abs(euler_ou_variance(1.0, 1.0, 0.5, 0.01, k) - exact)
            assert abs(v - exact) <= 4 * exact * math.sqrt(2 / 16384) + bias

    def test_requires_large_ensemble(self):
        spec = ou_spec(N=64)
        with pytest.raises(ValueError):
            simulate_mean_field_reference(spec, zero_control(spec), 32, 0)


@pytest.mark.invariant
class TestProperties:
    def test_common_noise_sharing(self):
        spec = make_spec(N=12, sigma_c=0.8, law=AtomsLaw([[0.3]]))
        bundle = simulate_finite(spec, zero_control(spec), 2, 0)
        assert np.all(bundle.herd == bundle.herd[:, :1])
        assert np.ptp(bundle.herd[-1]) == 0.0 and np.std(bundle.herd[:, 0]) > 0

    @given(st.permutations(list(range(7))))
    def test_exchangeability(self, perm):
        from herdlab.coefficients import RadialKernel

        spec = make_spec(N=7, M=2, herders=[[-1.0], [1.0]], H1=RadialKernel(0.5, 1.0), K1=LinearKernel([[0.3]]), sigma_i=0.4, sigma_c=0.2, dt=0.1)
        ensure_valid(spec)
        c = zero_control(spec)
        X0 = sample_initial_herd(spec, 1, 0)[None]
        paths = sample_noise_paths(spec, 1, 0)
        dW = paths.idiosyncratic[None]
        Y0 = spec.initial.herder_start[None]
        base = integrate(spec, c, X0, Y0, dW, paths.common[None])
        perm = np.array(perm)
        swapped = integrate(spec, c, X0[:, perm], Y0, dW[:, perm], paths.common[None])
        np.testing.assert_allclose(swapped.herd[:, :, :], base.herd[:, :, perm], atol=1e-12)
        np.testing.assert_allclose(swapped.herders, base.herders, atol=1e-12)

    def test_moment_bound_stable_under_refinement(self):
        sups = []
        for dt in (0.1, 0.05, 0.025):
            spec = ou_spec(N=2048, dt=dt, p=4.0)
            res, _ = simulate_batch(spec, zero_control(spec), 2048, 5, [0, 1])
            sups.append(float(np.max(np.mean(np.max(np.abs(res.herd), axis=-1) ** 4, axis=(1, 2)))))
        assert all(np.isfinite(sups))
        for a, b in zip(sups, sups[1:]):
            assert 0.5 <= b / a <= 2.0

    def test_weak_order_one(self):
        # drift toward a fixed herder at 0: mean obeys m' = -m exactly
        errs = []
        dts = [0.1, 0.05, 0.025, 0.0125]
        for dt in dts:
            spec = make_spec(N=8192, dt=dt, K1=LinearKernel([[1.0]]), sigma_i=0.02, law=GaussianLaw([2.0], [0.0]), L=1.0)
            res, _ = simulate_batch(spec, zero_control(spec), 8192, 3, [0, 1, 2, 3])
            m = res.herd[-1].mean()
            errs.append(abs(m - 2.0 * math.exp(-1.0)))
        slope = np.polyfit(np.log(dts), np.log(errs), 1)[0]
        assert 0.7 <= slope <= 1.3


class TestExport:
    def test_csv(self, tmp_path):
        spec = make_spec(N=2, M=1, dt=0.5, sigma_i=1.0)
        bundle = simulate_finite(spec, zero_control(spec), 0, 0)
        path = tmp_path / "traj.csv"
        write_trajectory_csv(bundle, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "t,kind,index,coord,value"
        assert len(lines) == 1 + 3 * (2 + 1)
        t, kind, idx, coord, value = lines[1].split(",")
        assert (kind, idx, coord) == ("herd", "0", "0") and float(value) == bundle.herd[0, 0, 0]

    def test_binary_layout(self, tmp_path):
        spec = make_spec(d=2, N=3, M=2, dt=0.25, sigma_i=1.0)
        bundle = simulate_finite(spec, zero_control(spec), 0, 0)
        path = tmp_path / "traj.bin"
        write_trajectory_binary(bundle, path)
        raw = path.read_bytes()
        magic, version, K, N, M, d = struct.unpack_from("<4sIIIII", raw)
        assert (magic, version, K, N, M, d) == (b"HLAB", 1, 4, 3, 2, 2)
        first = np.frombuffer(raw, "<f8", count=(K + 1) * N * d, offset=32).reshape(K + 1, N, d)
        assert np.array_equal(first, bundle.herd)
        back = read_trajectory_binary(path)
        assert np.array_equal(back.herders, bundle.herders) and np.array_equal(back.times, bundle.times)
