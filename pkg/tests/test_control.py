import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import make_spec
from herdlab.control import ControlParams, instantiate_control
from herdlab.measures import feature_size

big = st.floats(-20, 20, allow_nan=False)


def random_params(spec, pieces, h, w, b):
    base = ControlParams.zero(spec, pieces)
    return base.replace(
        h_knots=np.resize(h, base.h_knots.shape),
        g_weights=np.resize(w, base.g_weights.shape),
        g_bias=np.resize(b, base.g_bias.shape),
    )


SPEC = make_spec(d=2, M=2, herders=[[0, 0], [1, 1]], ell=2, L=1.5, Mprime=0.8, U=(-1.0, 2.0))


class TestInstantiate:
    def test_constant_profile(self):
        spec = make_spec(d=2, M=3, herders=np.zeros((3, 2)), U=(-2.0, 2.0))
        params = ControlParams.constant(spec, 1.25, 1, bias=1.0)
        Y = np.random.default_rng(0).normal(size=(3, 2))
        u = instantiate_control(params, 0.37, Y, np.zeros(feature_size(2)))
        np.testing.assert_array_equal(u, np.full((3, 2), 1.25))

    def test_zero_profile(self):
        params = ControlParams.zero(SPEC, 4).replace(g_weights=np.full(ControlParams.zero(SPEC, 4).g_weights.shape, 0.1))
        u = params(0.5, np.ones((2, 2)), np.ones(feature_size(2)))
        assert np.array_equal(u, np.zeros((2, 2)))

    def test_left_closed_pieces(self):
        spec = make_spec(T=2.0, U=(-1.0, 1.0))
        params = ControlParams.zero(spec, 2).replace(h_knots=np.array([[[[-0.5]], [[0.5]]]]))
        Y, f = np.zeros((1, 1)), np.zeros(3)
        assert instantiate_control(params, 1.0 - 1e-12, Y, f)[0, 0] == -0.5
        assert instantiate_control(params, 1.0, Y, f)[0, 0] == 0.5
        assert instantiate_control(params, 2.0, Y, f)[0, 0] == 0.5
        assert instantiate_control(params, 0.0, Y, f)[0, 0] == -0.5

    def test_matrix_vector_product(self):
        spec = make_spec(d=2, ell=2, U=(-3.0, 3.0), Mprime=5.0, L=5.0)
        h = np.array([[1.0, 2.0], [-1.0, 0.5]])
        params = ControlParams.constant(spec, h, 1, bias=[[0.3, -0.7]])
        u = params(0.0, np.zeros((1, 2)), np.zeros(5))
        np.testing.assert_allclose(u[0], h @ np.array([0.3, -0.7]))

    def test_batched(self):
        params = ControlParams.constant(SPEC, 0.5, 2, bias=0.6)
        Y = np.zeros((4, 2, 2))
        assert params(0.1, Y, np.zeros((4, 5))).shape == (4, 2, 2)


@pytest.mark.invariant
class TestAdmissibility:
    @given(
        st.integers(1, 4),
        arrays(float, 8, elements=big),
        arrays(float, 12, elements=big),
        arrays(float, 4, elements=big),
    )
    def test_projection_idempotent_and_admissible(self, pieces, h, w, b):
        p = random_params(SPEC, pieces, h, w, b).project()
        assert p.is_admissible()
        again = p.project()
        assert np.array_equal(again.to_vector(), p.to_vector())

    @given(arrays(float, 12, elements=big), arrays(float, 4, elements=big), st.integers(0, 2**32 - 1))
    def test_g_bounded_and_lipschitz(self, w, b, seed):
        p = random_params(SPEC, 1, np.zeros(4), w, b).project()
        rng = np.random.default_rng(seed)
        z1 = rng.uniform(-10, 10, (200, p.g_weights.shape[-1]))
        z2 = z1 + rng.normal(scale=rng.uniform(0.01, 3), size=z1.shape)
        g1, g2 = p._g(z1), p._g(z2)
        assert np.max(np.abs(g1)) <= SPEC.bounds.Mprime + 1e-12
        ratio = np.max(np.abs(g1 - g2), axis=(-2, -1)) / np.max(np.abs(z1 - z2), axis=-1)
        assert np.max(ratio) <= SPEC.bounds.L * (1 + 1e-9)

    def test_l1_projection_is_nearest(self):
        from herdlab.control import _project_l1_rows

        rng = np.random.default_rng(3)
        for _ in range(50):
            v = rng.normal(size=6) * 3
            proj = _project_l1_rows(v[None], 1.0)[0]
            assert np.sum(np.abs(proj)) <= 1.0 + 1e-12
            # no other point of the ball on a random sample is closer
            cand = rng.normal(size=(400, 6))
            cand /= np.maximum(np.sum(np.abs(cand), axis=1, keepdims=True), 1.0)
            assert np.linalg.norm(v - proj) <= np.min(np.linalg.norm(cand - v, axis=1)) + 1e-12

    def test_check_rows(self, rng):
        checks = ControlParams.constant(SPEC, 0.5, 2, bias=0.6).check(SPEC, rng)
        assert all(c.passed for c in checks)

    def test_vector_round_trip(self):
        p = ControlParams.constant(SPEC, 0.5, 3, bias=0.2)
        lo, hi = p.vector_bounds()
        vec = p.to_vector()
        assert lo.shape == vec.shape == hi.shape
        assert np.array_equal(p.from_vector(vec).to_vector(), vec)

    def test_read_only(self):
        p = ControlParams.zero(SPEC, 2)
        with pytest.raises(ValueError):
            p.h_knots[0, 0, 0, 0] = 1.0
