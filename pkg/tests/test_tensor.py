"""Tests for the autodiff tensor engine."""

import numpy as np
import pytest

from sada.exceptions import SadaContractError, SadaShapeError
from sada.norm import BatchNorm2d, SanConfig, bn_train_forward, san_forward
from sada.tensor import (
    GuardCounter,
    Tensor,
    bilinear_resize,
    conv2d,
    cross_entropy,
    div_guarded,
    entropy_loss,
    exp,
    gradcheck,
    guard_scope,
    log,
    no_grad,
    relu,
    softmax_channel,
)

GRAD_TOL = 1e-2


class TestTensorBasics:
    """Construction and arithmetic."""

    def test_data_is_float32(self):
        """Tensors store contiguous float32 data."""
        t = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3))
        assert t.data.dtype == np.float32
        assert t.shape == (2, 3)

    def test_zero_extent_rejected(self):
        """Zero-sized axes raise a shape error."""
        with pytest.raises(SadaShapeError):
            Tensor(np.zeros((0, 3)))

    def test_incompatible_broadcast(self):
        """Adding shapes that do not broadcast raises a shape error."""
        with pytest.raises(SadaShapeError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))

    def test_broadcast_gradient_is_summed(self):
        """Gradients of broadcast operands are summed back to their shape."""
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones((3,)), requires_grad=True)
        (a * b).sum().backward()
        assert b.grad.shape == (3,)
        np.testing.assert_allclose(b.grad, [2.0, 2.0, 2.0])

    def test_reused_tensor_accumulates(self):
        """A tensor used twice gets the sum of both gradient paths."""
        x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
        (x * x + x).sum().backward()
        np.testing.assert_allclose(x.grad, 2 * x.data + 1)

    def test_backward_needs_scalar(self):
        """backward() without a seed gradient requires a scalar."""
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(SadaContractError):
            (x * 2.0).backward()

    def test_no_grad_records_nothing(self):
        """Operations under no_grad do not require grad."""
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = x * 3.0
        assert not y.requires_grad

    def test_index_gradient(self):
        """Slicing routes the gradient to the selected entries only."""
        x = Tensor(np.arange(4.0).reshape(2, 2), requires_grad=True)
        x[0:1].sum().backward()
        np.testing.assert_array_equal(x.grad, [[1.0, 1.0], [0.0, 0.0]])


class TestGuards:
    """Numeric guard events."""

    def test_div_guarded_clamps_and_counts(self):
        """Tiny denominators are clamped to 1e-12 and counted."""
        with guard_scope() as counter:
            out = div_guarded(Tensor([1.0, 1.0]), Tensor([0.0, 2.0]))
        assert counter.counts["div"] == 1
        assert out.data[1] == 0.5
        assert np.isfinite(out.data[0])

    def test_log_clamps(self):
        """log of zero is clamped rather than -inf."""
        with guard_scope() as counter:
            out = log(Tensor([0.0, 1.0]))
        assert np.isfinite(out.data).all()
        assert counter.counts["log"] == 1

    def test_exp_clamps(self):
        """Large exponents are clamped."""
        with guard_scope() as counter:
            out = exp(Tensor([1000.0]))
        assert np.isfinite(out.data).all()
        assert counter.total == 1

    def test_guard_counter_as_dict(self):
        """as_dict returns counts sorted by kind."""
        c = GuardCounter()
        c.record("log")
        c.record("div", 2)
        assert c.as_dict() == {"div": 2, "log": 1}


class TestConvAndResize:
    """Convolution and bilinear resampling."""

    def test_conv_known_value(self):
        """3x3 ones kernel over a 3x3 ones input gives 9."""
        out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 9.0

    @pytest.mark.parametrize("h,k,stride,pad", [(8, 3, 1, 1), (8, 3, 2, 1), (7, 3, 2, 0), (5, 1, 1, 0)])
    def test_conv_output_extent(self, h, k, stride, pad):
        """Output extent is floor((H + 2p - k) / s) + 1."""
        out = conv2d(Tensor(np.ones((1, 2, h, h))), Tensor(np.ones((3, 2, k, k))), stride=stride, pad=pad)
        expected = (h + 2 * pad - k) // stride + 1
        assert out.shape == (1, 3, expected, expected)

    def test_conv_channel_mismatch(self):
        """Kernel input channels must match the input."""
        with pytest.raises(SadaShapeError):
            conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))

    def test_resize_same_size_is_identity(self, rng):
        """Resizing to the same extent returns the input exactly."""
        x = rng.random((2, 5, 7)).astype(np.float32)
        np.testing.assert_array_equal(bilinear_resize(Tensor(x), 5, 7).data, x)

    def test_resize_keeps_constants(self):
        """A constant field stays exactly constant."""
        x = np.full((1, 6, 6), 0.3, dtype=np.float32)
        out = bilinear_resize(Tensor(x), 11, 3).data
        assert (out == np.float32(0.3)).all()

    def test_softmax_sums_to_one(self, rng):
        """Channel softmax sums to one at every position."""
        p = softmax_channel(Tensor(rng.normal(size=(2, 4, 3, 3)))).data
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


class TestLosses:
    """Cross-entropy and entropy."""

    def test_cross_entropy_uniform(self):
        """Uniform logits give log(C)."""
        loss = cross_entropy(Tensor(np.zeros((1, 4, 2, 2))), np.zeros((1, 2, 2), dtype=np.uint8))
        assert loss.item() == pytest.approx(np.log(4.0), rel=1e-6)

    def test_cross_entropy_all_ignored(self):
        """Every pixel ignored gives loss 0 and a zero gradient."""
        logits = Tensor(np.ones((1, 3, 2, 2)), requires_grad=True)
        loss = cross_entropy(logits, np.full((1, 2, 2), 255, dtype=np.uint8))
        loss.backward()
        assert loss.item() == 0.0
        assert not logits.grad.any()

    def test_cross_entropy_label_shape(self):
        """Labels must be N x H x W."""
        with pytest.raises(SadaShapeError):
            cross_entropy(Tensor(np.zeros((1, 3, 2, 2))), np.zeros((2, 2), dtype=np.uint8))

    def test_entropy_of_uniform(self):
        """Uniform softmax has entropy log(C)."""
        assert entropy_loss(Tensor(np.zeros((1, 5, 2, 2)))).item() == pytest.approx(np.log(5.0), rel=1e-6)


class TestGradcheck:
    """Analytic gradients agree with central differences."""

    @pytest.mark.parametrize("seed", range(10))
    def test_conv(self, seed):
        """conv2d with stride and padding."""
        rng = np.random.default_rng(seed)
        w = Tensor(rng.normal(size=(2, 2, 3, 3)))
        r = rng.normal(size=(1, 2, 3, 3)).astype(np.float32)
        x = Tensor(rng.normal(size=(1, 2, 5, 5)))
        assert gradcheck(lambda t: (conv2d(t, w, stride=2, pad=1) * r).sum(), x) <= GRAD_TOL

    @pytest.mark.parametrize("seed", range(10))
    def test_conv_weight(self, seed):
        """Gradient with respect to the kernel."""
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(2, 2, 4, 4)))
        r = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        assert gradcheck(lambda t: (conv2d(x, t, pad=1) * r).sum(), w) <= GRAD_TOL

    @pytest.mark.parametrize("seed", range(10))
    def test_bn_train(self, seed):
        """Batch-statistics normalization differentiates through the statistics."""
        rng = np.random.default_rng(seed)
        layer = BatchNorm2d(3)
        r = rng.normal(size=(2, 3, 3, 3)).astype(np.float32)
        x = Tensor(rng.normal(size=(2, 3, 3, 3)))
        assert gradcheck(lambda t: (bn_train_forward(layer, t) * r).sum(), x) <= GRAD_TOL

    @pytest.mark.parametrize("seed", range(10))
    def test_san_gamma_beta(self, seed):
        """SaN inference gradients with respect to gamma and beta."""
        rng = np.random.default_rng(seed)
        layer = BatchNorm2d(3)
        x = Tensor(rng.normal(size=(1, 3, 4, 4)))
        r = rng.normal(size=(1, 3, 4, 4)).astype(np.float32)
        cfg = SanConfig.san(0.4)

        def via_gamma(g):
            layer.gamma = g
            return (san_forward(layer, cfg, x) * r).sum()

        def via_beta(b):
            layer.beta = b
            return (san_forward(layer, cfg, x) * r).sum()

        assert gradcheck(via_gamma, Tensor(rng.normal(size=3))) <= GRAD_TOL
        layer.gamma = Tensor(np.ones(3), requires_grad=True)
        assert gradcheck(via_beta, Tensor(rng.normal(size=3))) <= GRAD_TOL

    @pytest.mark.parametrize("seed", range(10))
    def test_softmax_cross_entropy(self, seed):
        """Cross-entropy with some ignored pixels."""
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 4, size=(1, 3, 3)).astype(np.uint8)
        labels[0, 0, 0] = 255
        x = Tensor(rng.normal(size=(1, 4, 3, 3)))
        assert gradcheck(lambda t: cross_entropy(t, labels), x) <= GRAD_TOL

    @pytest.mark.parametrize("seed", range(10))
    def test_entropy(self, seed):
        """Mean softmax entropy."""
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(1, 4, 3, 3)))
        assert gradcheck(entropy_loss, x) <= GRAD_TOL

    @pytest.mark.parametrize("seed", range(3))
    def test_bilinear(self, seed):
        """Bilinear upsampling."""
        rng = np.random.default_rng(seed)
        r = rng.normal(size=(1, 2, 7, 5)).astype(np.float32)
        x = Tensor(rng.normal(size=(1, 2, 3, 4)))
        assert gradcheck(lambda t: (bilinear_resize(t, 7, 5) * r).sum(), x) <= GRAD_TOL

    def test_relu_away_from_kink(self):
        """ReLU on inputs far from zero."""
        x = Tensor(np.array([-1.0, -0.5, 0.5, 2.0]))
        assert gradcheck(lambda t: (relu(t) * t).sum(), x) <= GRAD_TOL

    def test_needs_scalar(self):
        """gradcheck rejects vector-valued functions."""
        with pytest.raises(SadaContractError):
            gradcheck(lambda t: t * 2.0, Tensor(np.ones(3)))


def _naive_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(n):
        for j in range(o):
            for y in range(ho):
                for z in range(wo):
                    acc = b[j]
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[i, ch, y * stride + u, z * stride + v] * w[j, ch, u, v]
                    out[i, j, y, z] = acc
    return out


def _sample_1d(d, in_size, out_size):
    src = min(max((d + 0.5) * in_size / out_size - 0.5, 0.0), in_size - 1.0)
    return src


class TestReferenceValues:
    """Hand-computed and loop-oracle values."""

    def test_add(self):
        """[1, 2] + [3, 4] = [4, 6]."""
        assert (Tensor([1.0, 2.0]) + Tensor([3.0, 4.0])).data.tolist() == [4.0, 6.0]

    def test_mul_backward(self):
        """d(a * b)/da at a=2, b=3 is 3."""
        a = Tensor([2.0], requires_grad=True)
        (a * Tensor([3.0])).backward(np.array([1.0]))
        assert a.grad.tolist() == [3.0]

    def test_identity_kernel(self, rng):
        """A 1x1 kernel holding 1.0 returns the input."""
        x = rng.normal(size=(1, 1, 4, 5)).astype(np.float32)
        out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(out.data, x)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
    def test_conv_matches_loops(self, stride, pad):
        """im2col convolution agrees with a direct loop implementation."""
        rng = np.random.default_rng(stride * 10 + pad)
        x = rng.normal(size=(2, 3, 5, 5)).astype(np.float32)
        w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        b = rng.normal(size=4).astype(np.float32)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad).data
        np.testing.assert_allclose(out, _naive_conv(x, w, b, stride, pad), atol=1e-5)

    def test_softmax_of_zeros(self):
        """Equal logits give 1/3 each."""
        p = softmax_channel(Tensor(np.zeros((1, 3, 1, 1)))).data
        np.testing.assert_allclose(p[0, :, 0, 0], [1 / 3] * 3, rtol=1e-6)

    def test_bilinear_upsample_2x2(self):
        """Upsampling [[0, 1], [2, 3]] to 4x4 matches a per-pixel sampler."""
        src = np.array([[0.0, 1.0], [2.0, 3.0]])
        out = bilinear_resize(Tensor(src[None]), 4, 4).data[0]
        for i in range(4):
            for j in range(4):
                y, x = _sample_1d(i, 2, 4), _sample_1d(j, 2, 4)
                y0, x0 = int(np.floor(y)), int(np.floor(x))
                y1, x1 = min(y0 + 1, 1), min(x0 + 1, 1)
                fy, fx = y - y0, x - x0
                top = src[y0, x0] * (1 - fx) + src[y0, x1] * fx
                bottom = src[y1, x0] * (1 - fx) + src[y1, x1] * fx
                assert out[i, j] == pytest.approx(top * (1 - fy) + bottom * fy, abs=1e-6)

    def test_gradcheck_polynomial(self):
        """sum(x^2) at [1, 2, 3]."""
        assert gradcheck(lambda t: (t * t).sum(), Tensor([1.0, 2.0, 3.0])) <= GRAD_TOL

    def test_gradcheck_conv_mean_weights(self):
        """Mean of a conv output with respect to the weights on a 1x2x6x6 input."""
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(1, 2, 6, 6)))
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        assert gradcheck(lambda t: conv2d(x, t, pad=1).mean(), w) <= GRAD_TOL
