"""Tests for the dense tensor primitives."""

import numpy as np
import pytest

from binorm import tensor as T
from binorm.errors import ConfigurationError, DimensionError


def triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]), dtype=a.dtype)
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = a.dtype.type(0)
            for k in range(a.shape[1]):
                s = a.dtype.type(s + a[i, k] * b[k, j])
            out[i, j] = s
    return out


def conv_oracle(x, kernel, bias):
    n, h, w, c = x.shape
    fh, fw, _, nf = kernel.shape
    out = np.zeros((n, h, w, nf))
    for b in range(n):
        for i in range(h):
            for j in range(w):
                for f in range(nf):
                    s = bias[f]
                    for dy in range(fh):
                        for dx in range(fw):
                            y, xx = i + dy - fh // 2, j + dx - fw // 2
                            if 0 <= y < h and 0 <= xx < w:
                                s += np.dot(x[b, y, xx, :], kernel[dy, dx, :, f])
                    out[b, i, j, f] = s
    return out


class TestMatmul:
    def test_identity(self, rng):
        a = rng.standard_normal((3, 3)).astype(np.float32)
        np.testing.assert_array_equal(T.matmul(np.eye(3, dtype=np.float32), a), a)

    def test_hand_computed(self):
        out = T.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[5.0], [6.0]]))
        np.testing.assert_array_equal(out, [[17.0], [39.0]])

    def test_matches_triple_loop_exactly(self, rng):
        a = rng.standard_normal((7, 5)).astype(np.float32)
        b = rng.standard_normal((5, 3)).astype(np.float32)
        np.testing.assert_array_equal(T.matmul(a, b), triple_loop(a, b))

    def test_broadcasts_leading_axes(self, rng):
        a = rng.standard_normal((2, 4, 3))
        b = rng.standard_normal((3, 5))
        np.testing.assert_allclose(T.matmul(a, b), a @ b, atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
            T.matmul(np.zeros((2, 3)), np.zeros((4, 5)))

    def test_inputs_not_mutated(self, rng):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        a0, b0 = a.copy(), b.copy()
        T.matmul(a, b)
        np.testing.assert_array_equal(a, a0)
        np.testing.assert_array_equal(b, b0)


class TestConv2d:
    def test_scalar(self):
        out = T.conv2d(np.full((1, 1, 1, 1), 3.0), np.full((1, 1, 1, 1), 2.0), np.zeros(1))
        np.testing.assert_array_equal(out, np.full((1, 1, 1, 1), 6.0))

    def test_same_padding_ones(self):
        out = T.conv2d(np.ones((1, 3, 3, 1)), np.ones((3, 3, 1, 1)), np.zeros(1))[0, :, :, 0]
        np.testing.assert_array_equal(out, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])

    def test_matches_nested_loop_oracle(self, rng):
        x = rng.standard_normal((1, 5, 5, 2))
        kernel = rng.standard_normal((3, 3, 2, 4))
        bias = rng.standard_normal(4)
        np.testing.assert_allclose(T.conv2d(x, kernel, bias), conv_oracle(x, kernel, bias), atol=1e-6, rtol=0)

    def test_keeps_spatial_dims(self, rng):
        out = T.conv2d(rng.standard_normal((2, 6, 4, 3)), rng.standard_normal((5, 5, 3, 7)), np.zeros(7))
        assert out.shape == (2, 6, 4, 7)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            T.conv2d(np.zeros((1, 4, 4, 2)), np.zeros((3, 3, 3, 1)), np.zeros(1))

    def test_im2col_col2im_adjoint(self, rng):
        x = rng.standard_normal((2, 4, 5, 3))
        cols = rng.standard_normal((2, 4, 5, 27))
        lhs = np.sum(T.im2col(x, 3, 3) * cols)
        rhs = np.sum(x * T.col2im(cols, x.shape, 3, 3))
        assert lhs == pytest.approx(rhs, rel=1e-12)


class TestPooling:
    def test_maxpool_hand(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
        np.testing.assert_array_equal(T.maxpool2d(x), [[[[4.0]]]])

    def test_maxpool_constant(self):
        np.testing.assert_array_equal(T.maxpool2d(np.full((1, 4, 4, 2), 7.0)), np.full((1, 2, 2, 2), 7.0))

    def test_maxpool_window_scan(self, rng):
        x = rng.standard_normal((1, 8, 8, 3))
        expected = np.empty((1, 4, 4, 3))
        for i in range(4):
            for j in range(4):
                expected[0, i, j] = x[0, 2 * i:2 * i + 2, 2 * j:2 * j + 2].reshape(4, 3).max(axis=0)
        np.testing.assert_array_equal(T.maxpool2d(x), expected)

    def test_maxpool_odd_dims(self):
        with pytest.raises(DimensionError):
            T.maxpool2d(np.zeros((1, 3, 4, 1)))

    def test_global_avg_pool(self, rng):
        np.testing.assert_array_equal(T.global_avg_pool(np.ones((1, 4, 4, 2))), [[1.0, 1.0]])
        x = np.array([[1.0, 3.0], [5.0, 7.0]]).reshape(1, 2, 2, 1)
        np.testing.assert_array_equal(T.global_avg_pool(x), [[4.0]])
        r = rng.standard_normal((2, 3, 5, 4))
        np.testing.assert_allclose(T.global_avg_pool(r), r.sum(axis=(1, 2)) / 15, atol=1e-6)


class TestActivation:
    def test_relu(self):
        np.testing.assert_array_equal(T.activation(np.array([-1.0, 0.0, 2.0]), "relu"), [0.0, 0.0, 2.0])

    def test_symmetric_cases(self):
        assert T.activation(np.array([0.0]), "gelu")[0] == 0.0
        np.testing.assert_allclose(T.activation(np.array([0.0, 0.0]), "softmax"), [0.5, 0.5])

    def test_gelu_exact_form(self):
        # x * Phi(x) at x = 1: 0.8413447...
        assert T.gelu(np.array([1.0]))[0] == pytest.approx(0.8413447460685429, rel=1e-12)

    def test_softmax_matches_formula(self, rng):
        x = rng.standard_normal(4)
        out = T.activation(x, "softmax")
        assert np.all(out > 0)
        assert out.sum() == pytest.approx(1.0, abs=1e-6)
        np.testing.assert_allclose(out, np.exp(x) / np.exp(x).sum(), atol=1e-12)

    def test_softmax_shift_invariant(self, rng):
        x = rng.standard_normal((3, 6))
        np.testing.assert_allclose(T.softmax(x + 123.0), T.softmax(x), atol=1e-6)

    def test_unknown_kind(self):
        with pytest.raises(ConfigurationError, match="tanh"):
            T.activation(np.zeros(2), "tanh")


class TestNormalizeFeatures:
    def test_hand_computed(self):
        out = T.normalize_features(np.array([[1.0, 2.0, 3.0]]))
        np.testing.assert_allclose(out, [[-1.22474, 0.0, 1.22474]], atol=1e-4)

    def test_constant_example(self):
        np.testing.assert_array_equal(T.normalize_features(np.array([[5.0, 5.0, 5.0]])), [[0.0, 0.0, 0.0]])

    def test_single_feature_gives_zeros(self):
        np.testing.assert_array_equal(T.normalize_features(np.array([[3.0], [-2.0]])), [[0.0], [0.0]])

    def test_statistics_per_example(self, rng):
        out = T.normalize_features(rng.standard_normal((2, 16)))
        assert np.all(np.abs(out.mean(axis=1)) < 1e-6)
        assert np.all(np.abs(out.std(axis=1) - 1.0) < 1e-4)

    def test_conv_layout_uses_all_non_batch_axes(self, rng):
        out = T.normalize_features(rng.standard_normal((2, 4, 4, 3)) * 3.0 + 1.0)
        assert np.all(np.abs(out.mean(axis=(1, 2, 3))) < 1e-6)
        assert np.all(np.abs(out.std(axis=(1, 2, 3)) - 1.0) < 1e-4)

    def test_sequence_layout_per_token(self, rng):
        out = T.normalize_features(rng.standard_normal((2, 5, 8)), axes=(-1,))
        assert np.all(np.abs(out.mean(axis=-1)) < 1e-6)

    def test_needs_batch_axis(self):
        with pytest.raises(DimensionError):
            T.normalize_features(np.array([1.0, 2.0]))
