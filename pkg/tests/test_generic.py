import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from aspnn.autodiff import DenseNet
from aspnn.generic import (L_MATRIX, M_MATRIX, SPNN_SIZES, DivergenceError, GenericOperators,
                           GradientMatrices, ThermoTrace, degeneracy_residual, generic_step,
                           predict_gradient_matrices, spnn_net, thermo_increments)
from aspnn.rollout import read_csv_columns

OPS = GenericOperators()
ZERO = GradientMatrices(np.zeros((4, 4)), np.zeros((4, 4)))
vec4 = arrays(np.float64, 4, elements=st.floats(-10, 10))
mat4 = arrays(np.float64, (4, 4), elements=st.floats(-3, 3))


def loop_matvec(m, v):
    return [sum(m[i][j] * v[j] for j in range(len(v))) for i in range(len(m))]


class TestOperators:
    def test_structure(self):
        np.testing.assert_array_equal(L_MATRIX, -L_MATRIX.T)
        np.testing.assert_array_equal(M_MATRIX, M_MATRIX.T)
        assert np.linalg.eigvalsh(M_MATRIX).min() >= -1e-12

    def test_rejects_bad_operators(self):
        with pytest.raises(ValueError, match="skew"):
            GenericOperators(L=np.eye(4))
        with pytest.raises(ValueError, match="semi-definite"):
            GenericOperators(M=-np.eye(4))


class TestStep:
    def test_zero_gradients_identity(self):
        z = np.array([0.3, -0.2, 0.5, 0.1])
        np.testing.assert_array_equal(generic_step(z, OPS, ZERO), z)

    def test_energy_gradient_example(self):
        g = GradientMatrices(np.eye(4), np.zeros((4, 4)))
        out = generic_step(np.array([1.0, 2.0, 3.0, 4.0]), OPS, g)
        np.testing.assert_allclose(out, [4, 6, 2, 2], rtol=0, atol=1e-12)

    def test_entropy_gradient_example(self):
        g = GradientMatrices(np.zeros((4, 4)), np.eye(4))
        out = generic_step(np.array([1.0, 0.0, 0.0, 0.0]), OPS, g)
        np.testing.assert_allclose(out, [2, -0.5, 0, 0], rtol=0, atol=1e-12)

    def test_dt_scales_increment(self):
        g = GradientMatrices(np.eye(4), np.eye(4))
        z = np.array([1.0, 2.0, 3.0, 4.0])
        np.testing.assert_allclose(generic_step(z, OPS, g, dt=0.5) - z,
                                   0.5 * (generic_step(z, OPS, g) - z), atol=1e-15)

    def test_invalid_dt_and_divergence(self):
        with pytest.raises(ValueError):
            generic_step(np.zeros(4), OPS, ZERO, dt=0)
        g = GradientMatrices(np.full((4, 4), 1e308), np.zeros((4, 4)))
        with pytest.raises(DivergenceError):
            with np.errstate(over="ignore", invalid="ignore"):
                generic_step(np.ones(4), OPS, g)

    @given(vec4, mat4, mat4, st.floats(-5, 5))
    def test_linear_in_state(self, z, A, B, alpha):
        g = GradientMatrices(A, B)
        lhs = generic_step(alpha * z, OPS, g) if alpha else alpha * z
        rhs = alpha * generic_step(z, OPS, g)
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12 * (1 + np.abs(rhs).max()))

    def test_batched(self):
        rng = np.random.default_rng(0)
        A, B, z = rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4))
        out = generic_step(z, OPS, GradientMatrices(A, B))
        for k in range(3):
            np.testing.assert_allclose(out[k], generic_step(z[k], OPS, GradientMatrices(A[k], B[k])),
                                       atol=1e-14)


class TestNetwork:
    def test_zero_net(self):
        g = predict_gradient_matrices(DenseNet.zeros(SPNN_SIZES), np.ones(4))
        assert not g.A.any() and not g.B.any()

    def test_output_layout_and_scalar_oracle(self):
        rng = np.random.default_rng(4)
        net = spnn_net(rng)
        z = rng.uniform(-1, 1, 4)
        h = list(z)
        for layer in net.layers:
            h = [b + s for b, s in zip(layer.bias, loop_matvec(layer.weight, h))]
            if layer.activation == "tanh":
                h = [math.tanh(v) for v in h]
        assert len(h) == 32
        g = predict_gradient_matrices(net, z)
        np.testing.assert_allclose(g.A, np.reshape(h[:16], (4, 4)), rtol=0, atol=1e-12)
        np.testing.assert_allclose(g.B, np.reshape(h[16:], (4, 4)), rtol=0, atol=1e-12)

    def test_batched_shape(self):
        g = predict_gradient_matrices(spnn_net(np.random.default_rng(0)), np.zeros((5, 4)))
        assert g.A.shape == (5, 4, 4) and g.B.shape == (5, 4, 4)


class TestResidual:
    def test_zero_cases(self):
        assert degeneracy_residual(OPS, ZERO, np.ones(4)) == (0.0, 0.0)
        g = GradientMatrices(np.eye(4), np.eye(4))
        assert degeneracy_residual(OPS, g, np.zeros(4)) == (0.0, 0.0)

    @settings(max_examples=100)
    @given(vec4, mat4, mat4)
    def test_matches_loop_oracle(self, z, A, B):
        r_l, r_m = degeneracy_residual(OPS, GradientMatrices(A, B), z)
        lbz = loop_matvec(L_MATRIX, loop_matvec(B, z))
        maz = loop_matvec(M_MATRIX, loop_matvec(A, z))
        assert r_l == pytest.approx(sum(v * v for v in lbz), rel=1e-12, abs=1e-12)
        assert r_m == pytest.approx(sum(v * v for v in maz), rel=1e-12, abs=1e-12)
        assert r_l >= 0 and r_m >= 0

    @given(vec4, mat4, mat4)
    def test_entropy_production_bound(self, z, A, B):
        # for the GENERIC increment, (Bz).dz = -(L B z).(A z) + (Bz)^T M (Bz)
        g = GradientMatrices(A, B)
        _, ds = thermo_increments(z, generic_step(z, OPS, g), g)
        r_l, _ = degeneracy_residual(OPS, g, z)
        assert ds >= -math.sqrt(r_l) * np.linalg.norm(A @ z) - 1e-9


class TestThermo:
    def test_no_motion(self):
        g = GradientMatrices(np.eye(4), np.eye(4))
        z = np.array([1.0, 2.0, 3.0, 4.0])
        assert thermo_increments(z, z, g) == (0.0, 0.0)

    def test_inner_product(self):
        g = GradientMatrices(np.eye(4), np.zeros((4, 4)))
        de, ds = thermo_increments(np.array([1.0, 0, 0, 0]), np.array([2.0, 0, 0, 0]), g)
        assert de == 1.0 and ds == 0.0

    @given(vec4, vec4, mat4, mat4)
    def test_dot_product_oracle(self, z, zn, A, B):
        de, ds = thermo_increments(z, zn, GradientMatrices(A, B))
        dz = [b - a for a, b in zip(z, zn)]
        assert de == pytest.approx(sum(a * d for a, d in zip(loop_matvec(A, z), dz)), abs=1e-9)
        assert ds == pytest.approx(sum(b * d for b, d in zip(loop_matvec(B, z), dz)), abs=1e-9)

    def test_trace_csv_prefix_sums(self, tmp_path):
        trace = ThermoTrace([0.0, 0.5, -0.25, 1e-3], [0.0, 1e-4, 2e-4, 0.0])
        trace.to_csv(tmp_path / "t.csv")
        cols = read_csv_columns(tmp_path / "t.csv")
        np.testing.assert_allclose(cols["E_cum"], np.cumsum(cols["dE"]), atol=1e-15)
        np.testing.assert_allclose(cols["S_cum"], np.cumsum(cols["dS"]), atol=1e-15)
        np.testing.assert_array_equal(cols["frame"], [0, 1, 2, 3])
