import numpy as np
import pytest

from sslspk import autodiff as ad
from sslspk.autodiff import Tensor
from sslspk.errors import ShapeError


def numeric_grad(f, x, eps=1e-6):
    """Central-difference gradient of scalar f at x, all coordinates."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
        it.iternext()
    return g


def check_unary(op, x, tol=1e-7):
    t = Tensor(x, requires_grad=True)
    out = ad.tsum(ad.square(op(t)))
    out.backward()
    num = numeric_grad(lambda v: float(np.sum(np.asarray(op(Tensor(v)).data) ** 2)), x)
    assert np.allclose(t.grad, num, atol=tol, rtol=tol), op


RNG = np.random.default_rng(0)


class TestPrimitives:
    def test_unary_ops(self):
        x = RNG.uniform(0.2, 2.0, size=(3, 4))
        for op in (ad.relu, ad.gelu, ad.exp, ad.log, ad.sqrt,
                   lambda t: ad.clip(t, 0.5, 1.5),
                   lambda t: ad.log_softmax(t, axis=-1),
                   lambda t: ad.l2_normalize(t, axis=-1),
                   ad.transpose,
                   lambda t: ad.reshape(t, (4, 3)),
                   lambda t: ad.tsum(t, axis=1),
                   lambda t: ad.tmean(t, axis=0, keepdims=True),
                   lambda t: t[1:3]):
            check_unary(op, x)

    def test_binary_broadcasting(self):
        a = RNG.standard_normal((3, 1, 4))
        b = RNG.uniform(0.5, 2.0, size=(5, 4))
        for op in (ad.add, ad.sub, ad.mul, ad.div):
            ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
            out = ad.tsum(ad.square(op(ta, tb)))
            out.backward()
            na = numeric_grad(lambda v: float(np.sum(op(Tensor(v), Tensor(b)).data ** 2)), a)
            nb = numeric_grad(lambda v: float(np.sum(op(Tensor(a), Tensor(v)).data ** 2)), b)
            assert np.allclose(ta.grad, na, atol=1e-6), op
            assert np.allclose(tb.grad, nb, atol=1e-6), op

    def test_matmul_grads(self):
        a = RNG.standard_normal((3, 4))
        b = RNG.standard_normal((4, 2))
        ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
        out = ad.tsum(ad.square(ta @ tb))
        out.backward()
        assert np.allclose(ta.grad, numeric_grad(lambda v: float(((v @ b) ** 2).sum()), a), atol=1e-6)
        assert np.allclose(tb.grad, numeric_grad(lambda v: float(((a @ v) ** 2).sum()), b), atol=1e-6)

    def test_matmul_rejects_non_2d(self):
        with pytest.raises(ShapeError):
            ad.matmul(Tensor(np.zeros((2, 3, 4))), Tensor(np.zeros((4, 2))))

    def test_concat_grads(self):
        a = RNG.standard_normal((2, 3))
        b = RNG.standard_normal((2, 5))
        ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
        ad.tsum(ad.square(ad.concat([ta, tb], axis=1))).backward()
        assert np.allclose(ta.grad, 2 * a)
        assert np.allclose(tb.grad, 2 * b)

    def test_log_softmax_matches_direct(self):
        x = RNG.standard_normal((4, 7)) * 10
        out = ad.log_softmax(Tensor(x), axis=-1).data
        direct = x - np.log(np.exp(x - x.max(-1, keepdims=True)).sum(-1, keepdims=True)) \
            - x.max(-1, keepdims=True)
        assert np.allclose(out, direct, atol=1e-12)
        assert np.allclose(np.exp(out).sum(axis=-1), 1.0, atol=1e-12)

    def test_take_with_duplicate_indices_accumulates(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        idx = np.array([0, 0, 2])
        ad.tsum(x[idx]).backward()
        assert np.allclose(x.grad, [2.0, 0.0, 1.0])


class TestConv1d:
    @staticmethod
    def conv_oracle(x, w, b):
        """Brute-force same-padded 1-D convolution."""
        n, t, cin = x.shape
        cout, _, k = w.shape
        pad = (k - 1) // 2
        xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
        y = np.zeros((n, t, cout))
        for ni in range(n):
            for ti in range(t):
                for co in range(cout):
                    acc = b[co]
                    for ci in range(cin):
                        for j in range(k):
                            acc += xp[ni, ti + j, ci] * w[co, ci, j]
                    y[ni, ti, co] = acc
        return y

    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_forward_matches_oracle(self, k):
        x = RNG.standard_normal((2, 6, 3))
        w = RNG.standard_normal((4, 3, k))
        b = RNG.standard_normal(4)
        out = ad.conv1d(Tensor(x), Tensor(w), Tensor(b)).data
        assert np.allclose(out, self.conv_oracle(x, w, b), atol=1e-12)

    def test_gradients_match_finite_differences(self):
        x = RNG.standard_normal((2, 5, 3))
        w = RNG.standard_normal((4, 3, 3))
        b = RNG.standard_normal(4)
        tx, tw, tb = (Tensor(v, requires_grad=True) for v in (x, w, b))
        ad.tsum(ad.square(ad.conv1d(tx, tw, tb))).backward()

        def loss(xx, ww, bb):
            return float((self.conv_oracle(xx, ww, bb) ** 2).sum())

        assert np.allclose(tx.grad, numeric_grad(lambda v: loss(v, w, b), x), atol=1e-5)
        assert np.allclose(tw.grad, numeric_grad(lambda v: loss(x, v, b), w), atol=1e-5)
        assert np.allclose(tb.grad, numeric_grad(lambda v: loss(x, w, v), b), atol=1e-5)

    def test_channel_mismatch_raises(self):
        with pytest.raises(ShapeError):
            ad.conv1d(Tensor(np.zeros((1, 4, 3))), Tensor(np.zeros((2, 5, 3))),
                      Tensor(np.zeros(2)))


class TestGraphMechanics:
    def test_shared_subgraph_accumulates(self):
        x = Tensor(np.array(2.0), requires_grad=True)
        y = ad.add(ad.mul(x, x), x)  # x^2 + x -> grad 2x + 1
        y.backward()
        assert np.allclose(x.grad, 5.0)

    def test_constant_branches_get_no_grad(self):
        x = Tensor(np.ones(3), requires_grad=True)
        c = Tensor(np.ones(3))
        out = ad.tsum(ad.mul(x, c))
        out.backward()
        assert c.grad is None
        assert np.allclose(x.grad, 1.0)

    def test_deep_chain_no_recursion_limit(self):
        x = Tensor(np.array(1.0), requires_grad=True)
        y = x
        for _ in range(5000):
            y = ad.mul(y, 1.0)
        y.backward()
        assert np.allclose(x.grad, 1.0)

    def test_dtype_preserved_f32(self):
        x = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
        out = ad.tsum(ad.mul(ad.add(x, 1.0), 0.5))
        assert out.dtype == np.float32
        out.backward()
        assert x.grad.dtype == np.float32
