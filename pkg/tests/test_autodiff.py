import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special

from invcodec import autodiff as ad
from invcodec.autodiff import Tape, Tensor
from invcodec.gradcheck import check_gradients, weighted_sum


def naive_conv(x, w, b, stride, pad):
    C, H, W = x.shape
    O, _, K, _ = w.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - K) // stride + 1
    Wo = (W + 2 * pad - K) // stride + 1
    out = np.zeros((O, Ho, Wo))
    for o in range(O):
        for i in range(Ho):
            for j in range(Wo):
                acc = b[o]
                for c in range(C):
                    for ki in range(K):
                        for kj in range(K):
                            acc += w[o, c, ki, kj] * xp[c, i * stride + ki, j * stride + kj]
                out[o, i, j] = acc
    return out


def f64(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, dtype=np.float64)


class TestConv2d:
    def test_scalar_multiply_add(self):
        out = ad.conv2d(Tensor([[[2.0]]]), Tensor([[[[3.0]]]]), Tensor([1.0]))
        np.testing.assert_array_equal(out.data, [[[7.0]]])

    def test_identity_kernel(self):
        x = Tensor(np.random.default_rng(0).standard_normal((1, 6, 5)))
        w = np.zeros((1, 1, 3, 3), np.float32)
        w[0, 0, 1, 1] = 1.0
        out = ad.conv2d(x, Tensor(w), Tensor([0.0]), padding=1)
        np.testing.assert_array_equal(out.data, x.data)

    @pytest.mark.parametrize("stride,pad", [(1, 1), (1, 0), (2, 1), (2, 2)])
    def test_matches_naive_loop(self, stride, pad):
        rng = np.random.default_rng(stride * 10 + pad)
        x = rng.standard_normal((3, 8, 8)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad)
        np.testing.assert_allclose(out.data, naive_conv(x, w, b, stride, pad), atol=1e-5)

    def test_batched_equals_per_sample(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
        w = Tensor(rng.standard_normal((2, 3, 5, 5)))
        out = ad.conv2d(Tensor(x), w, padding=2)
        for i in range(2):
            np.testing.assert_array_equal(out.data[i], ad.conv2d(Tensor(x[i]), w, padding=2).data)

    def test_linearity(self):
        rng = np.random.default_rng(2)
        x, y = rng.standard_normal((2, 3, 7, 7)).astype(np.float32)
        w = Tensor(rng.standard_normal((4, 3, 3, 3)))
        lhs = ad.conv2d(Tensor(2.5 * x - 1.5 * y), w, padding=1).data
        rhs = 2.5 * ad.conv2d(Tensor(x), w, padding=1).data - 1.5 * ad.conv2d(Tensor(y), w, padding=1).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-5)

    def test_channel_mismatch_names_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 4, 4\).*\(1, 3, 3, 3\)"):
            ad.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


class TestElementwise:
    def test_leaky_relu_definition(self):
        np.testing.assert_allclose(ad.leaky_relu(Tensor([-1.0, 2.0]), 0.01).data, [-0.01, 2.0])

    def test_leaky_relu_nonnegative_unchanged(self):
        x = np.abs(np.random.default_rng(0).standard_normal(20)).astype(np.float32)
        np.testing.assert_array_equal(ad.leaky_relu(Tensor(x)).data, x)

    def test_leaky_relu_scalar_reference(self):
        x = np.random.default_rng(1).standard_normal(50).astype(np.float32)
        ref = [v if v >= 0 else 0.01 * v for v in x.tolist()]
        np.testing.assert_allclose(ad.leaky_relu(Tensor(x)).data, ref, rtol=1e-6)

    def test_leaky_relu_slope_range(self):
        with pytest.raises(ValueError):
            ad.leaky_relu(Tensor([1.0]), 1.5)

    def test_exp_sigmoid_trivial(self):
        np.testing.assert_array_equal(ad.exp(Tensor([0.0, 0.0, 0.0])).data, [1, 1, 1])
        assert ad.sigmoid(Tensor(0.0)).item() == 0.5

    def test_mul_scalar_loop(self):
        rng = np.random.default_rng(3)
        a, b = rng.standard_normal((2, 4, 5)).astype(np.float32)
        out = (Tensor(a) * Tensor(b)).data
        for idx in np.ndindex(a.shape):
            assert out[idx] == np.float32(a[idx] * b[idx])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            Tensor(np.zeros(3)) + Tensor(np.zeros(4))

    def test_softplus_large_input_finite(self):
        out = ad.softplus(Tensor([-1000.0, 0.0, 1000.0])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [0.0, np.log(2.0), 1000.0], rtol=1e-6)

    def test_normal_cdf(self):
        x = np.linspace(-4, 4, 17)
        np.testing.assert_allclose(ad.normal_cdf(Tensor(x, dtype=np.float64)).data, special.ndtr(x))


class TestRound:
    def test_half_away_from_zero(self):
        np.testing.assert_array_equal(
            ad.round_half_away(np.array([-2.5, -1.5, -0.5, 0.5, 1.5, 2.5, 0.49, -0.49])),
            [-3, -2, -1, 1, 2, 3, 0, 0],
        )

    @given(st.floats(-1e6, 1e6))
    def test_symmetric(self, v):
        assert ad.round_half_away(np.float64(v)) == -ad.round_half_away(np.float64(-v))


class TestShuffle:
    def test_ordering(self):
        out = ad.pixel_shuffle_down(Tensor([[[1.0, 2.0], [3.0, 4.0]]]))
        np.testing.assert_array_equal(out.data.ravel(), [1, 2, 3, 4])
        assert out.shape == (4, 1, 1)

    def test_roundtrip_bit_exact(self):
        t = np.random.default_rng(0).standard_normal((3, 8, 6)).astype(np.float32)
        back = ad.pixel_shuffle_up(ad.pixel_shuffle_down(Tensor(t)))
        np.testing.assert_array_equal(back.data, t)

    def test_multiset_preserved(self):
        t = np.random.default_rng(1).standard_normal((3, 4, 4)).astype(np.float32)
        out = ad.pixel_shuffle_down(Tensor(t)).data
        np.testing.assert_array_equal(np.sort(out.ravel()), np.sort(t.ravel()))

    def test_odd_size_rejected(self):
        with pytest.raises(ValueError):
            ad.pixel_shuffle_down(Tensor(np.zeros((1, 3, 4))))


class TestTape:
    def test_quadratic(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            loss = (w * w).sum()
        np.testing.assert_array_equal(tape.gradient(loss, [w])[0], [2.0, 4.0])

    def test_independent_parameter_zero(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        p = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            loss = (w * w).sum()
        np.testing.assert_array_equal(tape.gradient(loss, [p])[0], [0.0])

    def test_fanout_accumulates(self):
        w = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            loss = (w * w + w * 2.0 + w).sum()
        np.testing.assert_allclose(tape.gradient(loss, [w])[0], [2 * 3.0 + 2.0 + 1.0])

    def test_no_recording_without_tape(self):
        w = Tensor([1.0], requires_grad=True)
        out = w * w
        assert not ad.recording()
        with Tape() as tape:
            assert ad.recording()
            _ = Tensor([1.0]) * 2.0
        assert len(tape) == 0
        assert out.requires_grad is False

    def test_nonscalar_loss_rejected(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            out = w * w
        with pytest.raises(ValueError):
            tape.gradient(out, [w])

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(7)
            w = Tensor(rng.standard_normal((2, 3, 3, 3)), requires_grad=True)
            x = Tensor(rng.standard_normal((3, 6, 6)))
            with Tape() as tape:
                loss = ad.tanh(ad.conv2d(x, w, padding=1)).sum()
            return loss.data, tape.gradient(loss, [w])[0]
        (a, ga), (b, gb) = run(), run()
        assert a.tobytes() == b.tobytes() and ga.tobytes() == gb.tobytes()


# (name, builder(rng) -> (fn, inputs)) for the finite-difference suite
def _unary(op, positive=False):
    def build(rng):
        x = f64(rng, 3, 4)
        if positive:
            x.data = np.abs(x.data) + 0.5
        return (lambda: weighted_sum(op(x))), [x]
    return build


def _binary(op, positive_b=False):
    def build(rng):
        a, b = f64(rng, 3, 4), f64(rng, 3, 4)
        if positive_b:
            b.data = np.abs(b.data) + 0.5
        return (lambda: weighted_sum(op(a, b))), [a, b]
    return build


def _conv(stride, pad, k):
    def build(rng):
        x, w, b = f64(rng, 2, 3, 6, 6), f64(rng, 4, 3, k, k), f64(rng, 4)
        return (lambda: weighted_sum(ad.conv2d(x, w, b, stride=stride, padding=pad))), [x, w, b]
    return build


def _matmul(rng):
    a, b = f64(rng, 2, 3, 4), f64(rng, 4, 5)
    return (lambda: weighted_sum(ad.matmul(a, b))), [a, b]


def _inverse(rng):
    a = Tensor(np.eye(4) * 3 + rng.standard_normal((4, 4)) * 0.3, dtype=np.float64)
    return (lambda: weighted_sum(ad.inverse(a))), [a]


def _shape_ops(rng):
    x = f64(rng, 2, 4, 4)
    def fn():
        t = ad.transpose(ad.reshape(x, (4, 2, 4)), (2, 0, 1))
        u = ad.concat([x, ad.pixel_shuffle_up(ad.pixel_shuffle_down(x))], axis=-3)
        return weighted_sum(t) + weighted_sum(ad.mean(u, axis=0), 1) + weighted_sum(x[1:, ::2], 2)
    return fn, [x]


def _upsample(rng):
    x = f64(rng, 2, 3, 3)
    return (lambda: weighted_sum(ad.upsample_nearest(x, 2))), [x]


def _broadcast(rng):
    x = f64(rng, 1, 3)
    return (lambda: weighted_sum(ad.broadcast_to(x, (4, 3)))), [x]


GRAD_CASES = {
    "add": _binary(ad.add),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "div": _binary(ad.div, positive_b=True),
    "exp": _unary(ad.exp),
    "log": _unary(ad.log, positive=True),
    "sigmoid": _unary(ad.sigmoid),
    "tanh": _unary(ad.tanh),
    "softplus": _unary(ad.softplus),
    "leaky_relu": _unary(lambda t: ad.leaky_relu(t, 0.1)),
    "abs": _unary(ad.absolute, positive=True),
    "power": _unary(lambda t: ad.power(t, 0.7), positive=True),
    "normal_cdf": _unary(ad.normal_cdf),
    "scale": _unary(lambda t: ad.scale(t, -2.5)),
    "sum_axis": _unary(lambda t: ad.tsum(t, axis=0)),
    "conv3_same": _conv(1, 1, 3),
    "conv5_stride2": _conv(2, 2, 5),
    "conv1": _conv(1, 0, 1),
    "matmul": _matmul,
    "inverse": _inverse,
    "shape_ops": _shape_ops,
    "upsample": _upsample,
    "broadcast": _broadcast,
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_finite_differences(name):
    for seed in range(20):
        fn, inputs = GRAD_CASES[name](np.random.default_rng(seed))
        errors = check_gradients(fn, inputs)
        assert max(errors) <= 1e-3, (name, seed, errors)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 7), st.sampled_from([1, 3, 5]))
def test_conv_output_shape(c_in, c_out, size, k):
    x = Tensor(np.ones((c_in, size, size)))
    w = Tensor(np.ones((c_out, c_in, k, k)))
    if size < k:
        with pytest.raises(ValueError):
            ad.conv2d(x, w)
        return
    assert ad.conv2d(x, w, padding=k // 2).shape == (c_out, size, size)
