import numpy as np
import pytest

from binlow.batchnorm import bn_l2_backward, bn_l2_forward, BnState
from binlow.layers import (
    ConvLayer, DenseLayer, col2im, conv_backward, conv_forward, conv_geometry,
    dense_backward, dense_forward, glorot_uniform, im2col, maxpool_backward,
    maxpool_forward,
)
from binlow.quant import BitTensor
from binlow.scheme import PROPOSED, STANDARD, Scheme
from binlow.tensor import round_f16

REF64 = Scheme(binary=False)  # linear reference mode, exact gradients


def naive_conv(x, w, stride, padding, pad_value=0.0):
    """Direct nested-loop correlation, NHWC x [kh, kw, Cin, Cout]."""
    b, h, wd, c = x.shape
    kh, kw, _, m = w.shape
    (ho, wo), (pt, pb, pl, pr) = conv_geometry(h, wd, kh, kw, stride, padding)
    xp = np.full((b, h + pt + pb, wd + pl + pr, c), pad_value, dtype=np.float64)
    xp[:, pt:pt + h, pl:pl + wd] = x
    out = np.zeros((b, ho, wo, m))
    for n in range(b):
        for i in range(ho):
            for j in range(wo):
                patch = xp[n, i * stride:i * stride + kh, j * stride:j * stride + kw]
                for o in range(m):
                    out[n, i, j, o] = np.sum(patch * w[..., o])
    return out


def fd_check(f, x, grad, h=1e-6, samples=25, rng=None):
    rng = rng or np.random.default_rng(0)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    errs = []
    for i in rng.choice(flat.size, size=min(samples, flat.size), replace=False):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        errs.append(abs((fp - fm) / (2 * h) - gflat[i]))
    return max(errs) / max(np.max(np.abs(grad)), 1e-12)


class TestGeometry:
    @pytest.mark.parametrize("h,k,s,pad,out", [
        (32, 3, 1, "same", 32), (32, 3, 1, "valid", 30), (7, 3, 2, "same", 4),
        (7, 3, 2, "valid", 3), (5, 5, 1, "valid", 1), (6, 2, 2, "same", 3),
    ])
    def test_output_size(self, h, k, s, pad, out):
        (ho, wo), _ = conv_geometry(h, h, k, k, s, pad)
        assert ho == wo == out

    def test_bad_padding(self):
        with pytest.raises(ValueError):
            conv_geometry(8, 8, 3, 3, 1, "full")

    def test_kernel_too_big(self):
        with pytest.raises(ValueError):
            conv_geometry(2, 2, 3, 3, 1, "valid")


class TestIm2col:
    @pytest.mark.parametrize("stride,padding", [(1, "same"), (1, "valid"), (2, "same"), (2, "valid")])
    def test_matches_naive_conv(self, stride, padding):
        rng = np.random.default_rng(stride)
        x = rng.normal(size=(2, 7, 6, 3))
        w = rng.normal(size=(3, 3, 3, 4))
        cols = im2col(x, 3, 3, stride, padding)
        (ho, wo), _ = conv_geometry(7, 6, 3, 3, stride, padding)
        y = (cols @ w.reshape(-1, 4)).reshape(2, ho, wo, 4)
        np.testing.assert_allclose(y, naive_conv(x, w, stride, padding), atol=1e-12)

    def test_pad_value(self):
        x = -np.ones((1, 4, 4, 1))
        w = np.ones((3, 3, 1, 1))
        y = (im2col(x, 3, 3, 1, "same", 1.0) @ w.reshape(-1, 1)).reshape(4, 4)
        np.testing.assert_array_equal(y, naive_conv(x, w, 1, "same", 1.0)[0, :, :, 0])
        assert y[0, 0] == 5 - 4 and y[1, 1] == -9

    @pytest.mark.parametrize("stride,padding", [(1, "same"), (2, "valid"), (2, "same")])
    def test_col2im_is_adjoint(self, stride, padding):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(2, 6, 5, 2))
        cols = im2col(x, 3, 3, stride, padding)
        c = rng.normal(size=cols.shape)
        lhs = np.sum(cols * c)
        rhs = np.sum(x * col2im(c, x.shape, 3, 3, stride, padding))
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_rejects_non_nhwc(self):
        with pytest.raises(ValueError):
            im2col(np.zeros((4, 4)), 3, 3)


class TestMaxpool:
    def test_example(self):
        x = np.arange(16, dtype=float).reshape(1, 4, 4, 1)
        out, idx = maxpool_forward(x)
        np.testing.assert_array_equal(out[0, :, :, 0], [[5, 7], [13, 15]])
        np.testing.assert_array_equal(idx[0, :, :, 0], 3)

    def test_first_index_ties(self):
        x = np.ones((1, 2, 2, 1))
        _, idx = maxpool_forward(x)
        assert idx[0, 0, 0, 0] == 0
        d = maxpool_backward(np.full((1, 1, 1, 1), 2.0), idx)
        np.testing.assert_array_equal(d[0, :, :, 0], [[2, 0], [0, 0]])

    def test_backward_matches_autodiff(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 4, 6, 3))
        c = rng.normal(size=(2, 2, 3, 3))
        _, idx = maxpool_forward(x)
        g = maxpool_backward(c, idx)
        err = fd_check(lambda: np.sum(c * maxpool_forward(x)[0]), x, g)
        assert err < 1e-6

    def test_non_divisible(self):
        with pytest.raises(ValueError, match="divide"):
            maxpool_forward(np.zeros((1, 5, 4, 1)))


def test_glorot_bounds():
    w = glorot_uniform(np.random.default_rng(0), (300, 200), 300, 200)
    lim = np.sqrt(6 / 500)
    assert w.dtype == np.float32
    assert np.abs(w).max() <= lim and np.abs(w).max() > 0.95 * lim
    assert abs(w.std() - lim / np.sqrt(3)) < 0.01 * lim


def _dense(rng, n_in=12, n_out=6, **kw):
    return DenseLayer(n_in, n_out, rng, compute=np.float64, **kw)


class TestDenseReference:
    """Non-binary linear mode: forward/backward are an exact derivative pair."""

    @pytest.mark.parametrize("first,last", [(True, False), (False, True), (False, False)])
    def test_finite_differences(self, first, last):
        rng = np.random.default_rng(2)
        layer = _dense(rng, first=first, last=last)
        a = rng.normal(size=(8, 12))
        c = rng.normal(size=(8, 6))
        layer.bn.beta[:] = rng.normal(size=6)

        def loss():
            return np.sum(c * dense_forward(a, layer, REF64))

        loss()
        d_in, dw, dbeta, _ = dense_backward(c, layer, REF64, a)
        assert fd_check(loss, layer.W, dw) < 1e-5
        assert fd_check(loss, layer.bn.beta, dbeta) < 1e-5
        if first:
            assert d_in is None
        else:
            assert fd_check(loss, a, d_in) < 1e-5

    @pytest.mark.parametrize("act", ["hardtanh", "relu"])
    def test_activation_derivative(self, act):
        rng = np.random.default_rng(3)
        layer = _dense(rng)
        scheme = Scheme(binary=False, activation=act)
        a = rng.normal(size=(8, 12))
        c = rng.normal(size=(8, 6))

        def loss():
            return np.sum(c * dense_forward(a, layer, scheme))

        loss()
        d_in, dw, _, _ = dense_backward(c, layer, scheme, a)
        assert fd_check(loss, layer.W, dw) < 1e-5
        assert fd_check(loss, a, d_in) < 1e-5


class TestDenseBinary:
    def test_forward_is_sign_of_bn(self):
        rng = np.random.default_rng(4)
        layer = _dense(rng)
        a = rng.choice([-1.0, 1.0], size=(8, 12))
        out = dense_forward(a, layer, STANDARD)
        x = bn_l2_forward(a @ np.where(layer.W >= 0, 1.0, -1.0), BnState(np.zeros(6)))
        np.testing.assert_array_equal(out, np.where(x >= 0, 1.0, -1.0))
        np.testing.assert_array_equal(layer.x, x)

    def test_backward_composition(self):
        # STE mask, then l2 BN backward, then products with the binary operands
        rng = np.random.default_rng(5)
        layer = _dense(rng)
        a = rng.choice([-1.0, 1.0], size=(8, 12))
        dense_forward(a, layer, STANDARD)
        g = rng.normal(size=(8, 6))
        d_in, dw, dbeta, _ = dense_backward(g, layer, STANDARD, a)
        dx = g * (np.abs(layer.x) <= 1)
        dy, db = bn_l2_backward(dx, layer.bn, layer.x)
        wb = np.where(layer.W >= 0, 1.0, -1.0)
        np.testing.assert_allclose(dw, a.T @ dy, atol=1e-12)
        np.testing.assert_allclose(d_in, dy @ wb.T, atol=1e-12)
        np.testing.assert_allclose(dbeta, db)

    def test_regenerate_output(self):
        rng = np.random.default_rng(6)
        for scheme in (STANDARD, PROPOSED):
            layer = DenseLayer(12, 6, rng)
            a = rng.choice([-1.0, 1.0], size=(8, 12)).astype(np.float32)
            out = dense_forward(a, layer, scheme)
            np.testing.assert_array_equal(layer.regenerate_output(scheme), out)

    def test_proposed_retains_bits_only(self):
        rng = np.random.default_rng(7)
        layer = DenseLayer(12, 6, rng)
        dense_forward(rng.choice([-1.0, 1.0], size=(8, 12)).astype(np.float32), layer, PROPOSED)
        assert layer.x is None
        assert isinstance(layer.x_bits, BitTensor)
        assert layer.x_bits.bits.nbytes == 6

    def test_proposed_storage_formats(self):
        rng = np.random.default_rng(8)
        layer = DenseLayer(12, 6, rng)
        a = rng.choice([-1.0, 1.0], size=(8, 12)).astype(np.float32)
        dense_forward(a, layer, PROPOSED)
        np.testing.assert_array_equal(layer.bn.mu, round_f16(layer.bn.mu))
        np.testing.assert_array_equal(layer.bn.alpha, round_f16(layer.bn.alpha))
        d_in, dw, dbeta, dy = dense_backward(rng.normal(size=(8, 6)).astype(np.float32),
                                             layer, PROPOSED, a)
        assert isinstance(dw, BitTensor) and dw.shape == (12, 6)
        np.testing.assert_array_equal(dbeta, round_f16(dbeta))
        nz = dy[dy != 0]
        np.testing.assert_array_equal(np.log2(np.abs(nz)), np.round(np.log2(np.abs(nz))))

    def test_proposed_ste_cancels_saturated_channels(self):
        # X is not retained, so the STE reads the packed |X| <= 1 mask
        rng = np.random.default_rng(12)
        layer = DenseLayer(12, 6, rng)
        layer.bn.beta[:] = [5, -5, 0, 0, 0, 0]
        a = rng.choice([-1.0, 1.0], size=(8, 12)).astype(np.float32)
        dense_forward(a, layer, PROPOSED)
        assert layer.x is None and layer.ste_bits.bits.nbytes == 6
        keep = layer.ste_bits.decode(np.float32) > 0
        assert not keep[:, :2].any() and keep[:, 2:].any()
        g = rng.normal(size=(8, 6)).astype(np.float32)
        _, _, dbeta, _ = dense_backward(g, layer, PROPOSED, a)
        assert not dbeta[:2].any() and dbeta[2:].any()

    def test_zero_gradient_with_po2(self):
        rng = np.random.default_rng(9)
        layer = DenseLayer(12, 6, rng)
        a = rng.choice([-1.0, 1.0], size=(8, 12)).astype(np.float32)
        dense_forward(a, layer, PROPOSED)
        d_in, dw, dbeta, _ = dense_backward(np.zeros((8, 6), np.float32), layer, PROPOSED, a)
        assert not d_in.any() and not dbeta.any()

    def test_backward_without_forward(self):
        layer = DenseLayer(4, 2, np.random.default_rng(0))
        with pytest.raises(ValueError, match="forward"):
            dense_backward(np.ones((2, 2)), layer, STANDARD, np.ones((2, 4)))

    def test_wrong_width(self):
        layer = DenseLayer(4, 2, np.random.default_rng(0))
        with pytest.raises(ValueError, match="features"):
            dense_forward(np.ones((2, 5)), layer, STANDARD)


@pytest.mark.parametrize("scheme", [STANDARD, PROPOSED,
                                    PROPOSED.with_(bn_variant="l1"),
                                    PROPOSED.with_(dY_dtype="blockfp_5")])
def test_bit_kernels_match_float_path(scheme):
    rng = np.random.default_rng(10)
    outs = []
    for kernels in ("float", "bit"):
        s = scheme.with_(kernels=kernels)
        r = np.random.default_rng(11)
        conv = ConvLayer(3, 3, 4, 8, r, padding="same", pool=2, order="pool_bn")
        dense = DenseLayer(4 * 4 * 8, 5, r)
        a = rng.choice([-1.0, 1.0], size=(3, 8, 8, 4)).astype(np.float32) if not outs else a
        h = conv_forward(a, conv, s)
        y = dense_forward(h, dense, s)
        g = np.random.default_rng(12).normal(size=y.shape).astype(np.float32)
        g1, dw2, _, _ = dense_backward(g, dense, s, conv.regenerate_output(s))
        g0, dw1, _, _ = conv_backward(g1, conv, s, a)
        outs.append((h, y, g1, g0, dw1, dw2))
    for u, v in zip(*outs):
        if isinstance(u, BitTensor):
            assert u == v
        else:
            np.testing.assert_array_equal(u, v)


class TestConv:
    @pytest.mark.parametrize("padding", ["same", "valid"])
    def test_forward_matches_naive(self, padding):
        rng = np.random.default_rng(13)
        layer = ConvLayer(3, 3, 2, 4, rng, padding=padding, compute=np.float64)
        a = rng.choice([-1.0, 1.0], size=(2, 6, 6, 2))
        conv_forward(a, layer, STANDARD)
        y = naive_conv(a, np.where(layer.W >= 0, 1.0, -1.0), 1, padding, pad_value=1.0)
        x = bn_l2_forward(y.reshape(-1, 4), BnState(np.zeros(4))).reshape(y.shape)
        np.testing.assert_allclose(layer.x, x, atol=1e-12)

    def test_first_layer_pads_with_zero(self):
        rng = np.random.default_rng(14)
        layer = ConvLayer(3, 3, 1, 2, rng, first=True, compute=np.float64)
        a = rng.normal(size=(2, 5, 5, 1))
        conv_forward(a, layer, STANDARD)
        y = naive_conv(a, np.where(layer.W >= 0, 1.0, -1.0), 1, "same", pad_value=0.0)
        x = bn_l2_forward(y.reshape(-1, 2), BnState(np.zeros(2))).reshape(y.shape)
        np.testing.assert_allclose(layer.x, x, atol=1e-12)

    def test_one_by_one_equals_dense(self):
        rng = np.random.default_rng(15)
        conv = ConvLayer(1, 1, 6, 4, rng, compute=np.float64)
        dense = DenseLayer(6, 4, rng, compute=np.float64)
        dense.W = conv.W.reshape(6, 4).copy()
        a = rng.choice([-1.0, 1.0], size=(2, 3, 3, 6))
        h1 = conv_forward(a, conv, STANDARD)
        h2 = dense_forward(a.reshape(-1, 6), dense, STANDARD)
        np.testing.assert_array_equal(h1.reshape(-1, 4), h2)
        g = rng.normal(size=h1.shape)
        d1, w1, b1, _ = conv_backward(g, conv, STANDARD, a)
        d2, w2, b2, _ = dense_backward(g.reshape(-1, 4), dense, STANDARD, a.reshape(-1, 6))
        np.testing.assert_allclose(d1.reshape(-1, 6), d2, atol=1e-12)
        np.testing.assert_allclose(w1.reshape(6, 4), w2, atol=1e-12)
        np.testing.assert_allclose(b1, b2, atol=1e-12)

    @pytest.mark.parametrize("order,padding,stride", [
        ("pool_bn", "same", 1), ("bn_pool", "valid", 1), ("pool_bn", "same", 2),
    ])
    def test_finite_differences(self, order, padding, stride):
        rng = np.random.default_rng(16)
        layer = ConvLayer(3, 3, 2, 3, rng, padding=padding, stride=stride, pool=2,
                          order=order, compute=np.float64)
        a = rng.normal(size=(2, 12 if padding == "same" else 10, 12 if padding == "same" else 10, 2))
        out = conv_forward(a, layer, REF64)
        c = rng.normal(size=out.shape)

        def loss():
            return np.sum(c * conv_forward(a, layer, REF64))

        loss()
        d_in, dw, dbeta, _ = conv_backward(c, layer, REF64, a)
        assert fd_check(loss, layer.W, dw) < 1e-5
        assert fd_check(loss, a, d_in) < 1e-5
        assert fd_check(loss, layer.bn.beta, dbeta) < 1e-5

    def test_pool_orders_shapes(self):
        rng = np.random.default_rng(17)
        a = rng.choice([-1.0, 1.0], size=(2, 8, 8, 3)).astype(np.float32)
        for order, padding, hw in (("pool_bn", "same", 4), ("bn_pool", "valid", 3)):
            layer = ConvLayer(3, 3, 3, 5, rng, padding=padding, pool=2, order=order)
            out = conv_forward(a, layer, STANDARD)
            assert out.shape == (2, hw, hw, 5)
            assert set(np.unique(out)) <= {-1.0, 1.0}

    def test_bad_order(self):
        with pytest.raises(ValueError):
            ConvLayer(3, 3, 1, 1, np.random.default_rng(0), order="sideways")

    def test_wrong_channels(self):
        layer = ConvLayer(3, 3, 2, 2, np.random.default_rng(0))
        with pytest.raises(ValueError, match="channels"):
            conv_forward(np.ones((1, 4, 4, 3)), layer, STANDARD)
