import math

import numpy as np
import pytest

from eegtsc import tensor as T
from conftest import gradcheck, rel_error

TOL = 1e-5


def conv1d_loop(x, w, b, padding):
    """Direct nested-loop cross-correlation, written independently of the im2col kernel."""
    B, Cin, L = x.shape
    Cout, _, K = w.shape
    if padding == "same":
        left = (K - 1) // 2
        xp = np.zeros((B, Cin, L + K - 1))
        xp[:, :, left:left + L] = x
    else:
        xp = x
    Lout = xp.shape[2] - K + 1
    out = np.zeros((B, Cout, Lout))
    for n in range(B):
        for o in range(Cout):
            for t in range(Lout):
                acc = b[o]
                for c in range(Cin):
                    for k in range(K):
                        acc += w[o, c, k] * xp[n, c, t + k]
                out[n, o, t] = acc
    return out


def conv1d_loop_grads(x, w, g, padding):
    B, Cin, L = x.shape
    Cout, _, K = w.shape
    left = (K - 1) // 2 if padding == "same" else 0
    gx, gw = np.zeros_like(x), np.zeros_like(w)
    gb = g.sum(axis=(0, 2))
    for n in range(B):
        for o in range(Cout):
            for t in range(g.shape[2]):
                for c in range(Cin):
                    for k in range(K):
                        src = t + k - left
                        if 0 <= src < L:
                            gx[n, c, src] += w[o, c, k] * g[n, o, t]
                            gw[o, c, k] += x[n, c, src] * g[n, o, t]
    return gx, gw, gb


class TestConv1d:
    def test_identity_kernel(self):
        x = T.Tensor(np.array([[[1.0, 2.0, 3.0]]]))
        out = T.conv1d(x, T.Tensor(np.ones((1, 1, 1))), T.Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, [[[1, 2, 3]]])

    def test_same_padding_alignment(self):
        a, b, c = 2.0, 3.0, 5.0
        x = T.Tensor(np.array([[[1.0, 0, 0, 0]]]))
        out = T.conv1d(x, T.Tensor(np.array([[[a, b, c]]])), padding="same")
        assert out.shape == (1, 1, 4)
        assert out.data[0, 0, 0] == b
        np.testing.assert_array_equal(out.data[0, 0], [b, a, 0, 0])

    def test_even_kernel_pads_right(self):
        # K=4: one zero on the left, two on the right
        x = np.arange(1.0, 6.0).reshape(1, 1, 5)
        w = np.array([[[1.0, 0, 0, 0]]])
        out = T.conv1d(T.Tensor(x), T.Tensor(w), padding="same").data
        np.testing.assert_array_equal(out[0, 0], [0, 1, 2, 3, 4])

    @pytest.mark.parametrize("padding", ["valid", "same"])
    def test_matches_loop_oracle(self, padding):
        r = np.random.default_rng(7)
        x, w, b = r.normal(size=(2, 3, 16)), r.normal(size=(4, 3, 5)), r.normal(size=4)
        xt, wt, bt = (T.Tensor(a, requires_grad=True) for a in (x, w, b))
        out = T.conv1d(xt, wt, bt, padding=padding)
        ref = conv1d_loop(x, w, b, padding)
        assert rel_error(out.data, ref) < 1e-10
        g = r.normal(size=out.shape)
        T.backward(T.sum_all(T.mul(out, T.Tensor(g))))
        gx, gw, gb = conv1d_loop_grads(x, w, g, padding)
        assert rel_error(xt.grad, gx) < 1e-10
        assert rel_error(wt.grad, gw) < 1e-10
        assert rel_error(bt.grad, gb) < 1e-10

    def test_shape_errors_name_axis(self):
        x = T.Tensor(np.zeros((1, 3, 8)))
        with pytest.raises(ValueError, match="C_in"):
            T.conv1d(x, T.Tensor(np.zeros((2, 4, 3))))
        with pytest.raises(ValueError, match="axis 2"):
            T.conv1d(x, T.Tensor(np.zeros((2, 3, 9))))

    @pytest.mark.parametrize("shape,K,padding", [((1, 1, 6), 3, "valid"), ((2, 3, 9), 4, "same"),
                                                 ((3, 2, 7), 1, "same"), ((2, 2, 10), 5, "same")])
    def test_gradcheck(self, shape, K, padding):
        r = np.random.default_rng(sum(shape) + K)
        x = r.normal(size=shape)
        w = r.normal(size=(3, shape[1], K))
        b = r.normal(size=3)
        assert gradcheck(lambda x, w, b: T.conv1d(x, w, b, padding=padding), [x, w, b]) < TOL


class TestBatchNorm:
    def _bn(self, C):
        return np.zeros(C), np.ones(C)

    def test_constant_input_gives_zero(self):
        rm, rv = self._bn(2)
        out = T.batchnorm1d(T.Tensor(np.full((3, 2, 4), 7.0)), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)),
                            rm, rv, training=True)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_beta_shifts_mean(self, rng):
        x = rng.normal(size=(4, 3, 8))
        x = (x - x.mean(axis=(0, 2), keepdims=True)) / x.std(axis=(0, 2), keepdims=True)
        rm, rv = self._bn(3)
        out = T.batchnorm1d(T.Tensor(x), T.Tensor(np.ones(3)), T.Tensor(np.full(3, 5.0)), rm, rv, True)
        assert np.all(np.abs(out.data.mean(axis=(0, 2)) - 5.0) < 1e-9)

    def test_running_stats_update(self, rng):
        x = rng.normal(2.0, 3.0, size=(4, 2, 8))
        rm, rv = self._bn(2)
        T.batchnorm1d(T.Tensor(x), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)), rm, rv, True)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2)), rtol=1e-12)
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2), ddof=1), rtol=1e-12)

    def test_eval_uses_running_stats(self, rng):
        x = rng.normal(size=(2, 2, 5))
        rm, rv = np.array([1.0, -1.0]), np.array([4.0, 0.25])
        out = T.batchnorm1d(T.Tensor(x), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)), rm, rv, False)
        ref = (x - rm[None, :, None]) / np.sqrt(rv[None, :, None] + 1e-5)
        np.testing.assert_allclose(out.data, ref, rtol=1e-12)

    def test_single_value_per_channel_rejected(self):
        rm, rv = self._bn(2)
        with pytest.raises(ValueError):
            T.batchnorm1d(T.Tensor(np.zeros((1, 2, 1))), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)), rm, rv, True)

    @pytest.mark.parametrize("shape", [(4, 2, 8), (2, 3, 5), (8, 1, 3)])
    def test_gradcheck(self, shape):
        r = np.random.default_rng(shape[0])
        x, g, b = r.normal(size=shape), r.normal(size=shape[1]) + 1.5, r.normal(size=shape[1])

        def f(x, g, b):
            rm, rv = self._bn(shape[1])
            return T.batchnorm1d(x, g, b, rm, rv, True)

        assert gradcheck(f, [x, g, b]) < 1e-6


class TestActivations:
    def test_relu_values(self):
        np.testing.assert_array_equal(T.relu(T.Tensor(np.array([-1.0, 0.0, 2.0]))).data, [0, 0, 2])

    def test_elu_values(self):
        out = T.elu(T.Tensor(np.array([0.0, -1.0, 3.0]))).data
        assert out[0] == 0.0
        assert abs(out[1] - (math.exp(-1) - 1)) < 1e-15
        assert abs(out[1] - (-0.63212)) < 1e-5
        assert out[2] == 3.0

    @pytest.mark.parametrize("shape", [(5,), (3, 4), (2, 3, 6)])
    @pytest.mark.parametrize("op", [T.relu, T.elu])
    def test_gradcheck(self, op, shape):
        r = np.random.default_rng(len(shape))
        x = r.normal(size=shape)
        x[np.abs(x) < 0.05] += 0.2  # keep away from the kink
        assert gradcheck(op, [x]) < TOL


class TestPooling:
    def test_avg_and_max(self):
        avg = T.pool1d(T.Tensor(np.array([[[2.0, 4.0]]])), "avg", 2)
        mx = T.pool1d(T.Tensor(np.array([[[1.0, 5.0, 2.0]]])), "max", 3)
        assert avg.data.item() == 3.0 and mx.data.item() == 5.0

    def test_same_padding_length(self):
        x = T.Tensor(np.arange(7.0).reshape(1, 1, 7))
        out = T.pool1d(x, "max", 3, 1, padding="same")
        np.testing.assert_array_equal(out.data[0, 0], [1, 2, 3, 4, 5, 6, 6])

    @pytest.mark.parametrize("shape,kind,window,stride,padding", [
        ((2, 3, 10), "max", 3, 1, "same"),
        ((2, 3, 10), "avg", 2, 2, "valid"),
        ((1, 2, 9), "max", 2, None, "valid"),
        ((3, 1, 8), "avg", 3, 1, "same"),
    ])
    def test_gradcheck(self, shape, kind, window, stride, padding):
        x = np.random.default_rng(3).normal(size=shape)
        f = lambda x: T.pool1d(x, kind, window, stride, padding=padding)  # noqa: E731
        assert gradcheck(f, [x]) < 1e-6

    @pytest.mark.parametrize("shape", [(2, 3, 10), (1, 1, 4), (4, 2, 7)])
    def test_global_avg_pool(self, shape):
        x = np.random.default_rng(5).normal(size=shape)
        np.testing.assert_allclose(T.global_avg_pool(T.Tensor(x)).data, x.mean(axis=2), rtol=1e-14)
        assert gradcheck(T.global_avg_pool, [x]) < TOL


class TestLinear:
    def test_identity(self, rng):
        x = rng.normal(size=(3, 4))
        out = T.linear(T.Tensor(x), T.Tensor(np.eye(4)), T.Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, x)

    def test_scalar(self):
        out = T.linear(T.Tensor(np.array([[4.0]])), T.Tensor(np.array([[2.0]])), T.Tensor(np.array([3.0])))
        assert out.data.item() == 11.0

    @pytest.mark.parametrize("B,fin,fout", [(3, 5, 7), (1, 2, 1), (4, 6, 3)])
    def test_gradcheck(self, B, fin, fout):
        r = np.random.default_rng(B * fin)
        arrays = [r.normal(size=(B, fin)), r.normal(size=(fout, fin)), r.normal(size=fout)]
        assert gradcheck(T.linear, arrays) < 1e-6


class TestConcatAndBroadcast:
    def test_concat_values(self):
        np.testing.assert_array_equal(T.concat_channels(T.Tensor([1.0]), T.Tensor([2.0])).data, [1, 2])
        out = T.concat_channels(T.Tensor(np.zeros((2, 3, 8))), T.Tensor(np.ones((2, 5, 8))))
        assert out.shape == (2, 8, 8)

    @pytest.mark.parametrize("sa,sb", [((2, 3, 8), (2, 5, 8)), ((4, 1), (4, 2)), ((1, 2, 3), (1, 1, 3))])
    def test_concat_gradient_split(self, sa, sb):
        r = np.random.default_rng(len(sa))
        assert gradcheck(lambda a, b: T.concat([a, b], axis=1), [r.normal(size=sa), r.normal(size=sb)]) < TOL

    @pytest.mark.parametrize("shape,L", [((2, 3), 5), ((1, 1), 4), ((4, 2), 1)])
    def test_broadcast_time(self, shape, L):
        z = np.random.default_rng(L).normal(size=shape)
        out = T.broadcast_time(T.Tensor(z), L)
        assert out.shape == shape + (L,)
        assert gradcheck(lambda z: T.broadcast_time(z, L), [z]) < TOL


class TestEmbedding:
    def test_basis_rows(self):
        table = T.Tensor(np.eye(3))
        np.testing.assert_array_equal(T.embedding_lookup(table, 2).data, [0, 1, 0])

    def test_repeated_index_accumulates(self):
        table = T.Tensor(np.zeros((3, 2)), requires_grad=True)
        T.backward(T.sum_all(T.embedding_lookup(table, np.array([2, 2, 3]))))
        np.testing.assert_array_equal(table.grad, [[0, 0], [2, 2], [1, 1]])

    @pytest.mark.parametrize("bad", [0, 4, -1])
    def test_out_of_range(self, bad):
        with pytest.raises(IndexError):
            T.embedding_lookup(T.Tensor(np.zeros((3, 2))), bad)

    @pytest.mark.parametrize("S,E,idx", [(3, 2, [1, 3]), (5, 4, [2, 2, 5, 1]), (1, 3, [1])])
    def test_gradcheck(self, S, E, idx):
        table = np.random.default_rng(S).normal(size=(S, E))
        assert gradcheck(lambda t: T.embedding_lookup(t, np.array(idx)), [table]) < TOL


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = T.softmax_cross_entropy(T.Tensor(np.zeros((2, 4))), np.array([1, 3]))
        assert abs(loss.item() - math.log(4)) < 1e-12
        assert abs(loss.item() - 1.386294) < 1e-6

    def test_dominant_logit(self):
        assert T.softmax_cross_entropy(T.Tensor(np.array([[100.0, 0.0]])), np.array([1])).item() < 1e-9

    def test_gradient_formula(self, rng):
        z = rng.normal(size=(3, 5))
        y = np.array([1, 5, 2])
        zt = T.Tensor(z, requires_grad=True)
        T.backward(T.softmax_cross_entropy(zt, y))
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        p[np.arange(3), y - 1] -= 1
        np.testing.assert_allclose(zt.grad, p / 3, rtol=1e-12)

    @pytest.mark.parametrize("B,Y", [(3, 5), (1, 2), (6, 3)])
    def test_gradcheck(self, B, Y):
        r = np.random.default_rng(B + Y)
        y = r.integers(1, Y + 1, size=B)
        assert gradcheck(lambda z: T.softmax_cross_entropy(z, y), [r.normal(size=(B, Y))]) < 1e-6

    def test_bad_labels(self):
        with pytest.raises(ValueError):
            T.softmax_cross_entropy(T.Tensor(np.zeros((2, 3))), np.array([0, 1]))


class TestElementwise:
    @pytest.mark.parametrize("sa,sb", [((3,), (3,)), ((2, 3), (3,)), ((2, 1, 4), (1, 3, 1))])
    def test_add_mul_broadcast(self, sa, sb):
        r = np.random.default_rng(len(sa) + len(sb))
        a, b = r.normal(size=sa), r.normal(size=sb)
        assert gradcheck(T.add, [a, b]) < TOL
        assert gradcheck(T.mul, [a, b]) < TOL
        assert gradcheck(lambda a, b: a - b, [a, b]) < TOL

    @pytest.mark.parametrize("shape,new", [((2, 6), (3, 4)), ((4,), (2, 2)), ((1, 2, 3), (6,))])
    def test_reshape_and_reductions(self, shape, new):
        x = np.random.default_rng(2).normal(size=shape)
        assert gradcheck(lambda x: T.reshape(x, new), [x]) < TOL
        assert gradcheck(lambda x: x.mean(), [x]) < TOL
        assert gradcheck(lambda x: -x.sum(), [x]) < TOL


class TestDropout:
    def test_identity_cases(self, rng):
        x = T.Tensor(rng.normal(size=(3, 4)))
        assert T.dropout(x, 0.0, True) is x
        assert T.dropout(x, 0.5, False) is x
        np.testing.assert_array_equal(T.dropout(x, 1.0, True).data, 0.0)

    def test_keep_rate(self):
        x = T.Tensor(np.ones(100_000))
        out = T.dropout(x, 0.3, True, np.random.default_rng(0)).data
        kept = np.mean(out != 0)
        assert abs(kept - 0.7) < 0.01
        np.testing.assert_allclose(out[out != 0], 1 / 0.7)

    @pytest.mark.parametrize("shape", [(10,), (3, 4), (2, 2, 5)])
    def test_gradcheck(self, shape):
        x = np.random.default_rng(1).normal(size=shape)
        f = lambda x: T.dropout(x, 0.4, True, np.random.default_rng(9))  # noqa: E731
        assert gradcheck(f, [x]) < TOL


class TestTape:
    def test_second_backward_rejected(self):
        x = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
        loss = T.sum_all(T.mul(x, x))
        T.backward(loss)
        np.testing.assert_array_equal(x.grad, [2, 4])
        with pytest.raises(RuntimeError):
            T.backward(loss)

    def test_linearity_of_sum_of_losses(self, rng):
        a = rng.normal(size=(2, 3))
        w = rng.normal(size=(4, 3))

        def grads(which):
            x = T.Tensor(a, requires_grad=True)
            h = T.linear(x, T.Tensor(w))
            l1 = T.sum_all(T.relu(h))
            l2 = T.sum_all(T.mul(h, h))
            T.backward({"1": l1, "2": l2, "both": l1 + l2}[which])
            return x.grad

        np.testing.assert_allclose(grads("both"), grads("1") + grads("2"), rtol=1e-12)

    def test_no_grad_records_nothing(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = T.relu(x)
        assert y.node is None and not y.requires_grad

    def test_forward_values_finite(self, rng):
        x = T.Tensor(rng.normal(size=(2, 3, 12)) * 50)
        w = T.Tensor(rng.normal(size=(4, 3, 5)))
        out = T.elu(T.conv1d(x, w, padding="same"))
        assert np.all(np.isfinite(out.data))
