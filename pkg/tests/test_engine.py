import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ilabench import engine as E
from ilabench.engine import Tensor
from ilabench.errors import ConfigError, DimensionError, InputError, UsageError


def direct_conv(x, w, b, stride, padding):
    """Six-nested-loop cross-correlation used as the oracle."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = b[oi]
                    for ci in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += xp[ni, ci, i * stride + di, j * stride + dj] * w[oi, ci, di, dj]
                    out[ni, oi, i, j] = acc
    return out


def weighted(fn, shape_seed=1):
    """Wrap fn into a scalar via a fixed random weighting of its output."""
    cache = {}

    def f(t):
        out = fn(t)
        if "r" not in cache:
            cache["r"] = np.random.default_rng(shape_seed).standard_normal(out.shape)
        return E.dot(out, Tensor(cache["r"], dtype=out.dtype))

    return f


class TestPrimitives:
    def test_relu(self):
        out = E.primitive_forward("relu", Tensor([-1.0, 0.0, 2.5]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.5])

    def test_residual_add(self):
        out = E.primitive_forward("residual_add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        np.testing.assert_array_equal(out.data, [4.0, 6.0])

    def test_dense_identity_pattern(self):
        out = E.dense(Tensor([[1.0, 1.0]]), Tensor([[2.0, 0.0], [0.0, 3.0]]), Tensor([0.0, 0.0]))
        np.testing.assert_array_equal(out.data, [[2.0, 3.0]])

    def test_flatten_and_pools(self):
        x = Tensor(np.arange(32, dtype=np.float32).reshape(1, 2, 4, 4))
        assert E.primitive_forward("flatten", x).shape == (1, 32)
        mp = E.primitive_forward("maxpool2x2", x)
        np.testing.assert_array_equal(mp.data[0, 0], [[5, 7], [13, 15]])
        ap = E.primitive_forward("avgpool_global", x)
        np.testing.assert_allclose(ap.data, [[7.5, 23.5]])

    def test_shape_errors_name_the_primitive(self):
        with pytest.raises(DimensionError, match="residual_add"):
            E.residual_add(Tensor([1.0, 2.0]), Tensor([1.0]))
        with pytest.raises(DimensionError, match="dense.*axis 1"):
            E.dense(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
        with pytest.raises(ConfigError):
            E.primitive_forward("softmax", Tensor([1.0]))


class TestConv:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).random((2, 1, 5, 5)).astype(np.float32)
        out = E.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor([0.0]))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_kernel_gives_bias(self):
        x = np.random.default_rng(0).random((2, 3, 5, 5))
        out = E.conv2d(Tensor(x), Tensor(np.zeros((2, 3, 3, 3))), Tensor([0.25, -1.5]), 1, 1)
        np.testing.assert_array_equal(out.data[:, 0], 0.25)
        np.testing.assert_array_equal(out.data[:, 1], -1.5)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
    def test_matches_direct_loops(self, stride, padding):
        rng = np.random.default_rng(stride * 10 + padding)
        x = rng.standard_normal((2, 3, 5, 5))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        want = direct_conv(x, w, b, stride, padding)
        got = E.conv2d(Tensor(x, dtype=np.float32), Tensor(w, dtype=np.float32),
                       Tensor(b, dtype=np.float32), stride, padding).data
        assert got.shape == want.shape
        np.testing.assert_allclose(got, want, atol=1e-5)

    def test_errors(self):
        with pytest.raises(DimensionError, match="channels"):
            E.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
        with pytest.raises(DimensionError, match="non-positive"):
            E.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))
        with pytest.raises(ConfigError):
            E.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), stride=0)


class TestBatchNorm:
    def test_eval_identity(self):
        x = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
        rm, rv = np.zeros(3), np.ones(3)
        out = E.batchnorm2d(Tensor(x, dtype=np.float64), Tensor(np.ones(3), dtype=np.float64),
                            Tensor(np.zeros(3), dtype=np.float64), rm, rv, eps=1e-12)
        np.testing.assert_allclose(out.data, x, atol=1e-9)

    def test_eval_zero_scale_is_beta(self):
        x = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
        beta = np.array([0.5, -1.0, 2.0])
        out = E.batchnorm2d(Tensor(x), Tensor(np.zeros(3)), Tensor(beta), np.zeros(3), np.ones(3))
        np.testing.assert_allclose(out.data, np.broadcast_to(beta[None, :, None, None], x.shape), atol=1e-7)

    def test_training_stats_match_direct(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((8, 3, 5, 5)) * 2 + 1
        rm, rv = np.zeros(3), np.ones(3)
        out = E.batchnorm2d(Tensor(x, dtype=np.float64), Tensor(np.ones(3), dtype=np.float64),
                            Tensor(np.zeros(3), dtype=np.float64), rm, rv, training=True,
                            momentum=0.1, eps=1e-5)
        for ch in range(3):
            vals = x[:, ch].ravel()
            mu = sum(vals) / len(vals)
            var = sum((v - mu) ** 2 for v in vals) / len(vals)
            np.testing.assert_allclose(out.data[:, ch], (x[:, ch] - mu) / np.sqrt(var + 1e-5), atol=1e-6)
            np.testing.assert_allclose(rm[ch], 0.1 * mu, atol=1e-6)
            np.testing.assert_allclose(rv[ch], 0.9 + 0.1 * var * len(vals) / (len(vals) - 1), atol=1e-6)

    def test_eval_mode_is_pure(self):
        rm, rv = np.zeros(3), np.ones(3)
        E.batchnorm2d(Tensor(np.ones((2, 3, 2, 2))), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv)
        np.testing.assert_array_equal(rm, 0)
        np.testing.assert_array_equal(rv, 1)

    def test_bad_eps(self):
        with pytest.raises(ConfigError):
            E.batchnorm2d(Tensor(np.ones((1, 1, 2, 2))), Tensor([1.0]), Tensor([0.0]),
                          np.zeros(1), np.ones(1), eps=0)


class TestCrossEntropy:
    def test_uniform(self):
        out = E.softmax_cross_entropy(Tensor([[0.0, 0.0]]), np.array([0]))
        assert out.item() == pytest.approx(0.693147, abs=1e-6)

    def test_saturated_no_overflow(self):
        out = E.softmax_cross_entropy(Tensor([[1000.0, 0.0]]), np.array([0]))
        assert np.isfinite(out.item())
        assert out.item() == pytest.approx(0.0, abs=1e-6)

    def test_matches_float64_formula(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((8, 10)) * 3
        labels = rng.integers(0, 10, 8)
        want = np.mean([-np.log(np.exp(r[k]) / np.exp(r).sum()) for r, k in zip(logits, labels)])
        got = E.softmax_cross_entropy(Tensor(logits, dtype=np.float32), labels).item()
        assert got == pytest.approx(want, abs=1e-6)

    def test_label_out_of_range(self):
        with pytest.raises(InputError):
            E.softmax_cross_entropy(Tensor(np.zeros((1, 3))), np.array([3]))


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(0).random((2, 3, 4)), requires_grad=True)
        E.backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_dot_bilinear(self):
        a = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        b = Tensor([4.0, -5.0, 6.0], requires_grad=True)
        E.backward(E.dot(a, b))
        np.testing.assert_array_equal(a.grad, b.data)
        np.testing.assert_array_equal(b.grad, a.data)

    def test_unused_leaf_gets_zero(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        b = Tensor([3.0, 4.0], requires_grad=True)
        with E.Tape() as tape:
            unused = E.mul(b, 2.0)
            root = E.sum(E.mul(a, a))
            assert len(tape) == 3
            E.backward(root)
        np.testing.assert_array_equal(a.grad, [2.0, 4.0])
        np.testing.assert_array_equal(b.grad, [0.0, 0.0])
        assert unused.shape == (2,)

    def test_non_scalar_root(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(UsageError):
            E.backward(E.mul(a, 2.0))

    def test_each_record_visited_once(self):
        calls = []
        a = Tensor([1.0, 2.0], requires_grad=True)
        with E.Tape() as tape:
            h = E.mul(a, 3.0)
            root = E.sum(E.add(h, h))
            for rec in tape.records:
                vjp = rec.vjp
                rec.vjp = lambda g, vjp=vjp, op=rec.op: (calls.append(op), vjp(g))[1]
            E.backward(root)
        assert calls == ["sum", "add", "mul_scalar"]
        np.testing.assert_array_equal(a.grad, [6.0, 6.0])

    def test_deterministic_gradients(self):
        from ilabench.models import ModelSpec, build_model

        model = build_model(ModelSpec("mini_resnet", width_multiplier=0.25), seed=0).freeze()
        x = np.random.default_rng(0).random((4, 3, 32, 32)).astype(np.float32)
        y = np.array([0, 1, 2, 3])
        g1 = E.grad_of(lambda t: E.softmax_cross_entropy(model.forward_logits(t), y), x)
        g2 = E.grad_of(lambda t: E.softmax_cross_entropy(model.forward_logits(t), y), x)
        assert g1.tobytes() == g2.tobytes()


def _f64(x):
    return np.asarray(x, dtype=np.float64)


PRIMITIVE_CASES = {
    "dense": (lambda rng: rng.standard_normal((3, 5)),
              lambda W, b: (lambda t: E.dense(t, Tensor(W, dtype=t.dtype), Tensor(b, dtype=t.dtype))),
              lambda rng: (rng.standard_normal((4, 5)), rng.standard_normal(4))),
    "relu": (lambda rng: rng.standard_normal((4, 6)) + 0.05, lambda: E.relu, None),
    "maxpool2x2": (lambda rng: rng.standard_normal((2, 2, 6, 6)), lambda: E.maxpool2x2, None),
    "avgpool_global": (lambda rng: rng.standard_normal((2, 3, 4, 4)), lambda: E.avgpool_global, None),
    "flatten": (lambda rng: rng.standard_normal((2, 3, 2, 2)), lambda: E.flatten, None),
    "residual_add": (lambda rng: rng.standard_normal((3, 4)),
                     lambda other: (lambda t: E.residual_add(t, Tensor(other, dtype=t.dtype))),
                     lambda rng: (rng.standard_normal((3, 4)),)),
    "conv2d": (lambda rng: rng.standard_normal((2, 3, 6, 6)),
               lambda W, b: (lambda t: E.conv2d(t, Tensor(W, dtype=t.dtype), Tensor(b, dtype=t.dtype), 2, 1)),
               lambda rng: (rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4))),
    "batchnorm2d_train": (lambda rng: rng.standard_normal((4, 3, 3, 3)),
                          lambda: (lambda t: E.batchnorm2d(t, Tensor(np.array([1.5, 0.5, 2.0]), dtype=t.dtype),
                                                           Tensor(np.array([0.1, 0.2, 0.3]), dtype=t.dtype),
                                                           np.zeros(3), np.ones(3), training=True)),
                          None),
    "batchnorm2d_eval": (lambda rng: rng.standard_normal((4, 3, 3, 3)),
                         lambda: (lambda t: E.batchnorm2d(t, Tensor(np.array([1.5, 0.5, 2.0]), dtype=t.dtype),
                                                          Tensor(np.array([0.1, 0.2, 0.3]), dtype=t.dtype),
                                                          np.array([0.2, -0.1, 0.0]), np.array([0.5, 2.0, 1.0]))),
                         None),
    "softmax_cross_entropy": (lambda rng: rng.standard_normal((5, 7)),
                              lambda: (lambda t: E.softmax_cross_entropy(t, np.array([0, 3, 6, 2, 2]))),
                              None),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_float64(name):
    make_x, make_fn, make_args = PRIMITIVE_CASES[name]
    rng = np.random.default_rng(7)
    x = _f64(make_x(rng))
    fn = make_fn(*make_args(rng)) if make_args else make_fn()
    f = fn if name == "softmax_cross_entropy" else weighted(fn)
    with E.precision(np.float64):
        err = E.finite_difference_check(f, x, n_coords=100, h=1e-5)
    assert err < 1e-6


class TestFiniteDifferenceCheck:
    def test_quadratic(self):
        err, details = E.finite_difference_check(lambda t: E.dot(t, t), np.array([1.0, 2.0]),
                                                 n_coords=2, h=1e-4, return_details=True)
        order = np.argsort(details["coords"])
        np.testing.assert_allclose(details["analytic"][order], [2.0, 4.0])
        assert err < 1e-8

    def test_constant_function(self):
        err = E.finite_difference_check(lambda t: E.mul(E.sum(t), 0.0), np.array([1.0, 2.0, 3.0]),
                                        n_coords=3, h=1e-3)
        assert err == 0.0

    def test_kink_coordinates_replaced(self):
        x = np.array([0.0, 1.0, -1.0, 2.0])
        err, details = E.finite_difference_check(lambda t: E.sum(E.relu(t)), x, n_coords=3, h=1e-5,
                                                 return_details=True, kink_tol=1e-4)
        assert details["skipped"] == [0]
        assert sorted(details["coords"].tolist()) == [1, 2, 3]
        assert err < 1e-8

    def test_kink_counts_without_tolerance(self):
        err = E.finite_difference_check(lambda t: E.sum(E.relu(t)), np.array([0.0]), n_coords=1, h=1e-5)
        assert err > 0.1

    def test_nan_propagates(self):
        err = E.finite_difference_check(lambda t: E.mul(E.sum(t), float("nan")), np.ones(3), n_coords=3)
        assert np.isnan(err)


class TestSgd:
    def test_plain_step(self):
        p = E.Parameter("w", Tensor(np.array([1.0]), dtype=np.float64))
        E.sgd_step([p], [np.array([0.5])], lr=0.1)
        assert p.data[0] == pytest.approx(0.95)

    def test_zero_grad_fixed_point(self):
        p = E.Parameter("w", Tensor(np.array([1.0, -2.0]), dtype=np.float64))
        E.sgd_step([p], [np.zeros(2)], lr=0.1, momentum=0.9)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_two_momentum_steps_unrolled(self):
        w0, g, lr, mu = 1.0, 0.5, 0.1, 0.9
        # hand unrolling: v1 = g, w1 = w0 - lr g; v2 = mu g + g, w2 = w1 - lr (mu + 1) g
        want = w0 - lr * g - lr * (mu * g + g)
        p = E.Parameter("w", Tensor(np.array([w0]), dtype=np.float64))
        state = {}
        for _ in range(2):
            E.sgd_step([p], [np.array([g])], lr=lr, momentum=mu, state=state)
        assert p.data[0] == pytest.approx(want)

    def test_weight_decay(self):
        p = E.Parameter("w", Tensor(np.array([2.0]), dtype=np.float64))
        E.sgd_step([p], [np.array([0.5])], lr=0.1, weight_decay=0.1)
        assert p.data[0] == pytest.approx(2.0 - 0.1 * (0.5 + 0.2))

    def test_bad_lr(self):
        with pytest.raises(ConfigError):
            E.sgd_step([], [], lr=0.0)


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(1, 3), c=st.integers(1, 3), h=st.integers(3, 8), w=st.integers(3, 8),
    o=st.integers(1, 4), k=st.sampled_from([1, 3]), stride=st.integers(1, 2), pad=st.integers(0, 1),
)
def test_shape_algebra(n, c, h, w, o, k, stride, pad):
    x = Tensor(np.ones((n, c, h, w)))
    y = E.conv2d(x, Tensor(np.ones((o, c, k, k))), None, stride, pad)
    assert y.shape == (n, o, (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1)
    z = E.flatten(E.relu(y))
    assert z.data.size == int(np.prod(z.shape))
    if y.shape[2] >= 2 and y.shape[3] >= 2:
        p = E.maxpool2x2(y)
        assert p.shape == (n, o, y.shape[2] // 2, y.shape[3] // 2)
