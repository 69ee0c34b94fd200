import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pocr import numcore as nc
from pocr.numcore import Tensor

from conftest import check_gradients, rand_tensor


class TestConv2d:
    def test_all_ones_2x2_kernel(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 2, 2)))
        out = nc.conv2d(x, w)
        assert out.shape == (1, 1, 2, 2)
        assert np.allclose(out.data, 4.0)

    def test_stride_shape(self):
        x = Tensor(np.zeros((1, 1, 4, 4)))
        w = Tensor(np.ones((1, 1, 1, 1)))
        out = nc.conv2d(x, w, stride=(2, 1))
        assert out.shape == (1, 1, 2, 4)

    def test_identity_1x1(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 5, 7)))
        w = np.zeros((3, 3, 1, 1))
        for i in range(3):
            w[i, i, 0, 0] = 1.0
        out = nc.conv2d(x, Tensor(w))
        assert np.array_equal(out.data, x.data)

    def test_grouped_matches_blockwise(self, rng):
        x = Tensor(rng.standard_normal((1, 4, 6, 6)))
        w = Tensor(rng.standard_normal((4, 2, 3, 3)))
        out = nc.conv2d(x, w, padding=(1, 1), groups=2)
        lo = nc.conv2d(nc.getitem(x, np.s_[:, :2]), nc.getitem(w, np.s_[:2]),
                       padding=(1, 1))
        hi = nc.conv2d(nc.getitem(x, np.s_[:, 2:]), nc.getitem(w, np.s_[2:]),
                       padding=(1, 1))
        assert np.allclose(out.data, np.concatenate([lo.data, hi.data], axis=1))

    def test_shape_errors(self, rng):
        x = Tensor(rng.standard_normal((1, 3, 4, 4)))
        with pytest.raises(ValueError, match="divisible by groups"):
            nc.conv2d(x, Tensor(np.zeros((2, 1, 1, 1))), groups=2)
        with pytest.raises(ValueError, match="channel dim"):
            nc.conv2d(x, Tensor(np.zeros((2, 2, 1, 1))))
        with pytest.raises(ValueError, match="kernel"):
            nc.conv2d(x, Tensor(np.zeros((2, 3, 7, 7))))

    def test_gradient(self, rng):
        x = rand_tensor(rng, 1, 2, 5, 5)
        w = rand_tensor(rng, 3, 2, 3, 3)
        check_gradients(lambda: (nc.conv2d(x, w, stride=(2, 1),
                                           padding=(1, 1)) ** 2).sum(),
                        [x, w], rtol=1e-6)

    def test_gradient_depthwise(self, rng):
        x = rand_tensor(rng, 2, 3, 4, 4)
        w = rand_tensor(rng, 3, 1, 3, 3)
        check_gradients(lambda: (nc.conv2d(x, w, padding=(1, 1),
                                           groups=3) ** 2).sum(),
                        [x, w], rtol=1e-6)


class TestActivations:
    def test_hard_swish_points(self):
        xs = Tensor(np.array([0.0, 3.0, -3.0]))
        out = nc.hard_swish(xs)
        assert np.allclose(out.data, [0.0, 3.0, 0.0])

    def test_hard_sigmoid_matches_definition(self, rng):
        x = rng.standard_normal(100) * 4
        out = nc.hard_sigmoid(Tensor(x))
        assert np.allclose(out.data, np.clip((x + 3) / 6, 0, 1))

    @pytest.mark.parametrize("op", [nc.relu, nc.relu6, nc.sigmoid,
                                    nc.tanh, nc.hard_sigmoid, nc.hard_swish])
    def test_gradients(self, op, rng):
        # stay away from kinks: resample anything within 1e-3 of {-3, 0, 3, 6}
        x = rng.standard_normal(64) * 2.5
        for kink in (-3.0, 0.0, 3.0, 6.0):
            near = np.abs(x - kink) < 1e-3
            x[near] += 0.01
        t = Tensor(x, requires_grad=True)
        mix = Tensor(rng.standard_normal(64))
        check_gradients(lambda: (op(t) * mix).sum(), [t])


class TestBatchNorm:
    def test_constant_channel_train(self):
        x = Tensor(np.full((2, 3, 2, 2), 5.0))
        gamma = Tensor(np.array([1.0, 2.0, 3.0]))
        beta = Tensor(np.array([0.5, -0.5, 0.0]))
        out, mu, var = nc.batchnorm_train(x, gamma, beta)
        assert np.allclose(mu, 5.0)
        assert np.allclose(var, 0.0)
        assert np.allclose(out.data[:, 0], 0.5)
        assert np.allclose(out.data[:, 1], -0.5)
        assert np.allclose(out.data[:, 2], 0.0)

    def test_identity_infer(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4, 4)))
        out = nc.batchnorm_infer(x, Tensor(np.ones(3)), Tensor(np.zeros(3)),
                                 np.zeros(3), np.ones(3))
        assert np.allclose(out.data, x.data, atol=1e-5)

    def test_channel_mismatch(self, rng):
        x = Tensor(rng.standard_normal((1, 3, 2, 2)))
        with pytest.raises(ValueError, match="channel"):
            nc.batchnorm_train(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))

    def test_gradient(self, rng):
        x = rand_tensor(rng, 2, 3, 2, 2)
        gamma = Tensor(rng.standard_normal(3) + 1.0, requires_grad=True)
        beta = Tensor(rng.standard_normal(3), requires_grad=True)
        mix = Tensor(rng.standard_normal((2, 3, 2, 2)))

        def f():
            out, _, _ = nc.batchnorm_train(x, gamma, beta)
            return (out * mix).sum()

        check_gradients(f, [x, gamma, beta], rtol=1e-6)


class TestPoolSoftmax:
    def test_gap_constant(self):
        x = Tensor(np.full((1, 2, 3, 4), 7.5))
        out = nc.global_avg_pool(x)
        assert out.shape == (1, 2, 1, 1)
        assert np.allclose(out.data, 7.5)

    def test_softmax_uniform(self):
        out = nc.softmax(Tensor(np.zeros(4)))
        assert np.allclose(out.data, 0.25)

    def test_log_softmax_composition(self, rng):
        x = Tensor(rng.standard_normal((5, 7)) * 3)
        direct = nc.log_softmax(x, axis=1)
        composed = np.log(nc.softmax(x, axis=1).data)
        assert np.abs(direct.data - composed).max() < 1e-12

    @given(st.integers(2, 8), st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_softmax_simplex(self, n, seed):
        x = np.random.default_rng(seed).standard_normal(n) * 5
        out = nc.softmax(Tensor(x)).data
        assert (out >= 0).all()
        assert abs(out.sum() - 1.0) <= 1e-12

    def test_axis_out_of_range(self):
        with pytest.raises(ValueError, match="axis"):
            nc.softmax(Tensor(np.zeros((2, 2))), axis=2)

    def test_gradients(self, rng):
        x = rand_tensor(rng, 3, 5)
        mix = Tensor(rng.standard_normal((3, 5)))
        check_gradients(lambda: (nc.log_softmax(x, axis=1) * mix).sum(), [x])
        check_gradients(lambda: (nc.softmax(x, axis=1) * mix).sum(), [x])

    def test_upsample_gradient(self, rng):
        x = rand_tensor(rng, 1, 2, 3, 3)
        mix = Tensor(rng.standard_normal((1, 2, 6, 6)))
        check_gradients(lambda: (nc.upsample_nearest(x, 2) * mix).sum(), [x])


class TestBackward:
    def test_sum_of_squares(self, rng):
        w = Tensor(rng.standard_normal(10), requires_grad=True)
        (w * w).sum().backward()
        assert np.allclose(w.grad, 2 * w.data)

    def test_independent_leaf_gets_no_grad(self, rng):
        w = Tensor(rng.standard_normal(4), requires_grad=True)
        v = Tensor(rng.standard_normal(4), requires_grad=True)
        (w * w).sum().backward()
        assert v.grad is None

    def test_non_scalar_rejected(self, rng):
        w = Tensor(rng.standard_normal(4), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            (w * w).backward()

    def test_accumulation_on_second_call(self, rng):
        w = Tensor(rng.standard_normal(4), requires_grad=True)
        (w * w).sum().backward()
        first = w.grad.copy()
        (w * w).sum().backward()
        assert np.allclose(w.grad, 2 * first)

    def test_shared_subexpression_equals_unrolled(self, rng):
        # DAG: loss = (y + y).sum() with shared y must equal 2*y.sum()'s grads
        w = Tensor(rng.standard_normal(6), requires_grad=True)
        y = w * w
        (y + y).sum().backward()
        dag = w.grad.copy()
        w.zero_grad()
        y1 = w * w
        y2 = w * w
        (y1 + y2).sum().backward()
        assert np.allclose(dag, w.grad)

    def test_composite_network_gradients(self, rng):
        x = Tensor(rng.standard_normal((2, 2, 6, 6)))
        w1 = rand_tensor(rng, 4, 2, 3, 3, scale=0.5)
        gamma = Tensor(np.ones(4) + 0.1 * rng.standard_normal(4),
                       requires_grad=True)
        beta = Tensor(0.1 * rng.standard_normal(4), requires_grad=True)
        w2 = rand_tensor(rng, 4, 3, scale=0.5)

        def f():
            h = nc.conv2d(x, w1, padding=(1, 1))
            h, _, _ = nc.batchnorm_train(h, gamma, beta)
            h = nc.hard_swish(h)
            h = nc.global_avg_pool(h)
            h = nc.reshape(h, (2, 4))
            return (nc.matmul(h, w2) ** 2).sum()

        check_gradients(f, [w1, gamma, beta, w2], rtol=1e-5)

    def test_lstm_gradient(self, rng):
        x = rand_tensor(rng, 4, 2, 3)
        wx = rand_tensor(rng, 3, 12, scale=0.5)
        wh = rand_tensor(rng, 3, 12, scale=0.5)
        b = rand_tensor(rng, 12, scale=0.1)
        mix = Tensor(rng.standard_normal((4, 2, 3)))
        for rev in (False, True):
            check_gradients(
                lambda: (nc.lstm_sequence(x, wx, wh, b, reverse=rev) * mix).sum(),
                [x, wx, wh, b], rtol=1e-5)

    def test_matmul_errors(self, rng):
        a = Tensor(rng.standard_normal((2, 3)))
        b = Tensor(rng.standard_normal((4, 2)))
        with pytest.raises(ValueError, match="mismatch"):
            nc.matmul(a, b)

    def test_broadcast_add_mul(self, rng):
        a = Tensor(rng.standard_normal((2, 3, 1)), requires_grad=True)
        b = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        check_gradients(lambda: ((a + b) * b).sum(), [a, b])
