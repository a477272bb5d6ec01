import numpy as np
import pytest

from conftest import numerical_grad, rel_error
from scriptbmi.exceptions import RangeError, ShapeError
from scriptbmi.layers import (conv2d_backward, conv2d_direct, conv2d_forward, dense_backward,
                              dense_forward, dropout_backward, dropout_forward, flatten, he_init,
                              maxpool_backward, maxpool_forward, relu_backward, relu_forward,
                              softmax, unflatten)
from scriptbmi.tensor import RngStream


def conv_grad_check(rng, B, cin, cout, H, W):
    x = rng.normal(size=(B, cin, H, W))
    w = rng.normal(size=(cout, cin, 3, 3))
    b = rng.normal(size=cout)
    R = rng.normal(size=(B, cout, H, W))

    def loss():
        return float(np.sum(conv2d_forward(x, w, b)[0] * R))

    _, cache = conv2d_forward(x, w, b)
    gx, gw, gb = conv2d_backward(R, cache)
    return (rel_error(gx, numerical_grad(loss, x)), rel_error(gw, numerical_grad(loss, w)),
            rel_error(gb, numerical_grad(loss, b)))


class TestConv:
    def test_reference_shape(self):
        x = np.zeros((1, 32, 72, 72))
        out, _ = conv2d_forward(x, np.zeros((64, 32, 3, 3)), np.zeros(64))
        assert out.shape == (1, 64, 72, 72)

    def test_zero_weights_give_bias(self, rng):
        x = rng.normal(size=(2, 3, 5, 4))
        out, _ = conv2d_forward(x, np.zeros((2, 3, 3, 3)), np.array([1.5, -2.0]))
        assert np.all(out[:, 0] == 1.5) and np.all(out[:, 1] == -2.0)

    def test_hand_convolution_all_ones(self):
        out, _ = conv2d_forward(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1))
        np.testing.assert_array_equal(out[0, 0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))

    def test_layout_is_nchw(self, rng):
        # only channel 1 of the input feeds output channel 0
        x = np.zeros((1, 2, 4, 4))
        x[0, 1, 2, 3] = 1.0
        w = np.zeros((1, 2, 3, 3))
        w[0, 1, 1, 1] = 2.0
        out, _ = conv2d_forward(x, w, np.zeros(1))
        expected = np.zeros((1, 1, 4, 4))
        expected[0, 0, 2, 3] = 2.0
        np.testing.assert_array_equal(out, expected)

    def test_matches_direct_reference(self, rng):
        for _ in range(10):
            B, cin, cout = rng.integers(1, 4, size=3)
            H, W = rng.integers(1, 9, size=2)
            x = rng.normal(size=(B, cin, H, W))
            w = rng.normal(size=(cout, cin, 3, 3))
            b = rng.normal(size=cout)
            np.testing.assert_allclose(conv2d_forward(x, w, b)[0], conv2d_direct(x, w, b), atol=1e-10, rtol=0)

    def test_same_padding_preserves_extent(self):
        w, b = np.ones((2, 1, 3, 3)), np.zeros(2)
        for H in range(1, 33):
            for W in range(1, 33):
                assert conv2d_forward(np.ones((1, 1, H, W)), w, b)[0].shape == (1, 2, H, W)

    def test_zero_upstream_gives_zero_grads(self, rng):
        x = rng.normal(size=(2, 2, 4, 4))
        _, cache = conv2d_forward(x, rng.normal(size=(3, 2, 3, 3)), np.zeros(3))
        for g in conv2d_backward(np.zeros((2, 3, 4, 4)), cache):
            assert not np.any(g)

    def test_single_channel_finite_differences(self, rng):
        assert max(conv_grad_check(rng, 1, 1, 1, 4, 4)) <= 1e-5

    def test_random_finite_differences(self, rng):
        for _ in range(5):
            B, cin, cout = rng.integers(1, 3, size=3)
            H, W = rng.integers(2, 6, size=2)
            assert max(conv_grad_check(rng, B, cin, cout, H, W)) <= 1e-5

    def test_bias_grad_identity(self, rng):
        _, cache = conv2d_forward(rng.normal(size=(3, 2, 4, 5)), rng.normal(size=(4, 2, 3, 3)), np.zeros(4))
        g = rng.normal(size=(3, 4, 4, 5))
        _, _, gb = conv2d_backward(g, cache)
        np.testing.assert_allclose(gb, g.sum(axis=(0, 2, 3)), rtol=1e-12)

    def test_backward_shape_mismatch(self, rng):
        _, cache = conv2d_forward(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 3, 3)), np.zeros(1))
        with pytest.raises(ShapeError):
            conv2d_backward(np.zeros((1, 1, 3, 3)), cache)


class TestMaxPool:
    def test_reference_shape(self):
        assert maxpool_forward(np.zeros((1, 64, 72, 72)))[0].shape == (1, 64, 36, 36)

    def test_window_max(self):
        out, _ = maxpool_forward(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        np.testing.assert_array_equal(out, [[[[4.0]]]])

    def test_floor_rule(self):
        assert maxpool_forward(np.zeros((1, 1, 37, 37)))[0].shape == (1, 1, 18, 18)

    def test_too_small(self):
        with pytest.raises(ShapeError):
            maxpool_forward(np.zeros((1, 1, 1, 4)))

    def test_routes_gradient_to_argmax(self):
        _, cache = maxpool_forward(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        g = maxpool_backward(np.array([[[[2.5]]]]), cache)
        np.testing.assert_array_equal(g, [[[[0, 0], [0, 2.5]]]])

    def test_ties_go_to_first_in_row_major_order(self):
        _, cache = maxpool_forward(np.array([[[[5.0, 5.0], [5.0, 5.0]]]]))
        g = maxpool_backward(np.ones((1, 1, 1, 1)), cache)
        np.testing.assert_array_equal(g, [[[[1, 0], [0, 0]]]])
        _, cache = maxpool_forward(np.array([[[[0.0, 1.0], [1.0, 0.0]]]]))
        np.testing.assert_array_equal(maxpool_backward(np.ones((1, 1, 1, 1)), cache), [[[[0, 1], [0, 0]]]])

    def test_finite_differences_and_mass(self, rng):
        for _ in range(5):
            H, W = rng.integers(2, 7, size=2)
            x = rng.permutation(2 * 2 * H * W).reshape(2, 2, H, W) * 0.1
            out, cache = maxpool_forward(x)
            R = rng.normal(size=out.shape)
            num = numerical_grad(lambda: float(np.sum(maxpool_forward(x)[0] * R)), x)
            g = maxpool_backward(R, cache)
            assert rel_error(g, num) <= 1e-5
            assert np.isclose(g.sum(), R.sum(), rtol=1e-12)


class TestReLU:
    def test_definition_and_kink(self):
        out, cache = relu_forward(np.array([-1.0, 2.0, 0.0]))
        np.testing.assert_array_equal(out, [0.0, 2.0, 0.0])
        np.testing.assert_array_equal(relu_backward(np.ones(3), cache), [0.0, 1.0, 0.0])

    def test_finite_differences(self, rng):
        x = rng.uniform(0.1, 1.0, size=(4, 5)) * rng.choice([-1, 1], size=(4, 5))
        R = rng.normal(size=x.shape)
        num = numerical_grad(lambda: float(np.sum(relu_forward(x)[0] * R)), x)
        _, cache = relu_forward(x)
        assert rel_error(relu_backward(R, cache), num) <= 1e-6


class TestDropout:
    def test_rate_zero_is_identity(self, rng):
        x = rng.normal(size=(3, 4))
        for training in (True, False):
            out, _ = dropout_forward(x, 0.0, training, RngStream(1))
            assert out.tobytes() == x.tobytes()

    def test_eval_mode_is_bitwise_identity(self, rng):
        x = rng.normal(size=(3, 4))
        out, mask = dropout_forward(x, 0.5, False)
        assert mask is None and out.tobytes() == x.tobytes()

    def test_expectation_preserved(self):
        out, _ = dropout_forward(np.ones(100_000), 0.5, True, RngStream(3, "dropout"))
        assert abs(out.mean() - 1.0) < 0.02

    def test_train_output_matches_mask(self, rng):
        x = rng.normal(size=(50, 20))
        out, mask = dropout_forward(x, 0.3, True, RngStream(4))
        assert set(np.unique(mask)) <= {0.0, 1.0}
        assert out.tobytes() == ((mask * x) / (1 - 0.3)).tobytes()
        g = rng.normal(size=x.shape)
        assert dropout_backward(g, mask, 0.3).tobytes() == ((mask * g) / 0.7).tobytes()

    @pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
    def test_rate_range(self, rate):
        with pytest.raises(RangeError):
            dropout_forward(np.ones(3), rate, True, RngStream(1))


class TestFlatten:
    def test_reference_width(self):
        assert flatten(np.zeros((1, 64, 36, 36))).shape == (1, 82944)

    def test_degenerate(self):
        assert flatten(np.zeros((2, 1, 1, 1))).shape == (2, 1)

    def test_round_trip(self, rng):
        for shape in [(1, 1, 1, 1), (2, 3, 4, 5), (3, 1, 7, 2), (1, 64, 3, 3)]:
            x = rng.normal(size=shape)
            f = flatten(x)
            np.testing.assert_array_equal(f[0], x[0].ravel())
            assert unflatten(f, shape[1:]).tobytes() == x.tobytes()


class TestDense:
    def test_identity_and_bias(self, rng):
        x = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(dense_forward(x, np.eye(4), np.zeros(4))[0], x)
        b = rng.normal(size=5)
        np.testing.assert_array_equal(dense_forward(np.zeros((2, 4)), rng.normal(size=(5, 4)), b)[0],
                                      np.tile(b, (2, 1)))

    def test_finite_differences(self, rng):
        x, w, b = rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=5)
        R = rng.normal(size=(3, 5))

        def loss():
            return float(np.sum(dense_forward(x, w, b)[0] * R))

        _, cache = dense_forward(x, w, b)
        gx, gw, gb = dense_backward(R, cache)
        for analytic, wrt in ((gx, x), (gw, w), (gb, b)):
            assert rel_error(analytic, numerical_grad(loss, wrt)) <= 1e-6

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            dense_forward(np.zeros((2, 3)), np.zeros((4, 5)), np.zeros(4))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax(np.zeros((1, 48))), np.full((1, 48), 1 / 48), rtol=1e-14)
        np.testing.assert_array_equal(softmax(np.zeros((1, 2))), [[0.5, 0.5]])

    def test_large_logits_do_not_overflow(self):
        with np.errstate(over="raise"):
            p = softmax(np.array([[1000.0, 0.0]]))
        assert np.isclose(p[0, 0], 1.0) and p[0, 1] < 1e-300 and np.all(np.isfinite(p))

    def test_rows_are_distributions(self, rng):
        p = softmax(rng.normal(scale=20, size=(50, 7)))
        assert np.all((p >= 0) & (p <= 1))
        assert np.max(np.abs(p.sum(axis=1) - 1)) <= 1e-12


class TestHeInit:
    def test_std_formula(self):
        w = he_init((100_000,), 2, RngStream(1, "init"))
        assert abs(w.std() - 1.0) < 0.02

    def test_moment(self):
        w = he_init((100_000,), 50, RngStream(2, "init"))
        assert abs(w.std() - 0.2) <= 0.03 * 0.2

    def test_reproducible(self):
        a = he_init((4, 3), 12, RngStream(8, "init"))
        b = he_init((4, 3), 12, RngStream(8, "init"))
        assert a.tobytes() == b.tobytes()

    def test_fan_in_guard(self):
        with pytest.raises(RangeError):
            he_init((2,), 0, RngStream(1))
