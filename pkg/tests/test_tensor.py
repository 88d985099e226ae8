"""Autodiff core: forward values, gradients against central differences, error reporting."""

import numpy as np
import pytest
from scipy.signal import correlate2d

from lavender import tensor as T
from lavender.tensor import NonFiniteError, ShapeError, Tensor, grad_check

TOL = 1e-4


def weighted(op):
    """Scalar test function: random-weighted sum of ``op(x)`` so every output element matters."""
    cache = {}

    def f(x):
        out = op(x)
        if out.shape not in cache:
            cache[out.shape] = np.random.default_rng(99).normal(size=out.shape)
        return T.sum(T.mul(out, Tensor(cache[out.shape])))

    return f


def random_shape(rng, ndim):
    return tuple(int(n) for n in rng.integers(3, 6, size=ndim))


# Unary ops and their input domains; each gets checked on 20 shapes.
UNARY = {
    "scale": (lambda x: T.scale(x, 1.7), "any"),
    "neg": (T.neg, "any"),
    "exp": (T.exp, "any"),
    "log": (T.log, "positive"),
    "sqrt": (T.sqrt, "positive"),
    "silu": (T.silu, "any"),
    "gelu": (T.gelu, "any"),
    "sigmoid": (T.sigmoid, "any"),
    "tanh": (T.tanh, "any"),
    "relu": (T.relu, "away_from_zero"),
    "transpose": (T.transpose, "any"),
    "swapaxes": (lambda x: T.swapaxes(x, 0, -1), "any"),
    "reshape": (lambda x: T.reshape(x, (-1,)), "any"),
    "slice": (lambda x: x[1:, ...], "any"),
    "sum_axis": (lambda x: T.sum(x, axis=0), "any"),
    "mean_axis": (lambda x: T.mean(x, axis=-1, keepdims=True), "any"),
    "amax": (lambda x: T.amax(x, axis=-1), "distinct"),
    "softmax": (T.softmax, "any"),
    "layer_norm": (T.layer_norm, "any"),
}


def draw(rng, shape, domain):
    x = rng.normal(size=shape)
    if domain == "positive":
        return np.abs(x) + 0.5
    if domain == "away_from_zero":
        return np.sign(x) * (np.abs(x) + 0.1)
    if domain == "distinct":
        return rng.permutation(np.arange(int(np.prod(shape)), dtype=np.float64)).reshape(shape) * 0.3
    return x


class TestForward:
    def test_softmax_symmetric(self):
        np.testing.assert_array_equal(T.softmax(Tensor([0.0, 0.0, 0.0])).data, np.full(3, 1 / 3))

    def test_softmax_golden(self):
        # e^x_i / sum_j e^x_j evaluated by hand at 64-bit
        np.testing.assert_allclose(T.softmax(Tensor([1.0, 2.0, 3.0])).data,
                                   [0.09003057, 0.24472847, 0.66524096], atol=1e-8)

    def test_softmax_mask(self):
        out = T.softmax(Tensor([[1.0, 2.0, 3.0]]), mask=np.array([[0.0, T.MASK_VALUE, 0.0]])).data
        assert out[0, 1] == 0.0
        np.testing.assert_allclose(out[0, [0, 2]], [1 / (1 + np.e ** 2), np.e ** 2 / (1 + np.e ** 2)])

    def test_matmul_identity(self, rng):
        x = rng.normal(size=(3, 5))
        np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(x)).data, x)

    @pytest.mark.parametrize("seed", range(20))
    def test_softmax_rows_stochastic(self, seed):
        rng = np.random.default_rng(seed)
        out = T.softmax(Tensor(rng.normal(scale=5.0, size=random_shape(rng, 3)))).data
        assert (out >= 0).all()
        np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-9)

    @pytest.mark.parametrize("seed", range(20))
    def test_reshape_slice_bijective(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=random_shape(rng, 3)))
        back = T.reshape(T.reshape(x, (-1,)), x.shape)
        np.testing.assert_array_equal(back.data, x.data)
        halves = [x[:1], x[1:]]
        np.testing.assert_array_equal(T.concat(halves, axis=0).data, x.data)

    def test_conv2d_matches_correlation(self, rng):
        x = rng.normal(size=(2, 3, 6, 5))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
        ref = np.zeros_like(out)
        for n in range(2):
            for o in range(4):
                ref[n, o] = b[o] + sum(correlate2d(x[n, c], w[o, c], mode="same") for c in range(3))
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_nll_matches_log_softmax(self, rng):
        logits = rng.normal(size=(5, 7))
        targets = rng.integers(0, 7, size=5)
        lse = np.log(np.exp(logits).sum(-1))
        ref = (lse - logits[np.arange(5), targets]).sum()
        assert T.nll_loss(Tensor(logits), targets).item() == pytest.approx(ref, rel=1e-12)

    def test_instance_norm_statistics(self, rng):
        y = T.instance_norm(Tensor(rng.normal(3.0, 2.0, size=(2, 3, 5, 5)))).data
        np.testing.assert_allclose(y.mean(axis=(2, 3)), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=(2, 3)), 1.0, atol=1e-4)

    def test_batch_norm_statistics(self, rng):
        y = T.batch_norm(Tensor(rng.normal(3.0, 2.0, size=(4, 3, 5, 5)))).data
        np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1.0, atol=1e-4)

    def test_bilinear_identity_size(self, rng):
        x = rng.normal(size=(7, 9))
        np.testing.assert_allclose(T.bilinear_resize(Tensor(x), (7, 9)).data, x, atol=1e-15)

    def test_bilinear_integer_upsample_preserves_area_mass(self, rng):
        x = rng.random((4, 4))
        y = T.bilinear_resize(Tensor(x), (32, 32)).data
        assert y.sum() * 16 / 1024 == pytest.approx(x.sum(), rel=1e-12)


class TestGradients:
    @pytest.mark.parametrize("name", sorted(UNARY))
    def test_unary_ops(self, name):
        op, domain = UNARY[name]
        for seed in range(20):
            rng = np.random.default_rng(seed)
            shape = random_shape(rng, 2 if name in ("transpose",) else 3)
            x = draw(rng, shape, domain)
            assert grad_check(weighted(op), x, eps=1e-6) < TOL, (name, seed, shape)

    @pytest.mark.parametrize("name", ["add", "sub", "mul", "div", "matmul", "squared_error"])
    def test_binary_ops(self, name):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            m, k, n = (int(v) for v in rng.integers(2, 5, size=3))
            a = rng.normal(size=(m, k))
            if name == "matmul":
                b = rng.normal(size=(k, n))
            elif name == "add":
                b = rng.normal(size=(k,))  # broadcast
            else:
                b = rng.normal(size=(m, k))
            if name == "div":
                b = np.abs(b) + 0.5
            fn = getattr(T, name)
            assert grad_check(weighted(lambda x: fn(x, Tensor(b))), a, eps=1e-6) < TOL, (name, seed)
            assert grad_check(weighted(lambda y: fn(Tensor(a), y)), b, eps=1e-6) < TOL, (name, seed)

    def test_softmax_with_mask(self, rng):
        mask = np.triu(np.full((4, 4), T.MASK_VALUE), 1)
        assert grad_check(weighted(lambda x: T.softmax(x, mask)), rng.normal(size=(2, 4, 4))) < TOL

    def test_sum_of_softmax_has_zero_gradient(self, rng):
        x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        T.sum(T.softmax(x)).backward()
        np.testing.assert_allclose(x.grad, 0.0, atol=1e-15)

    def test_sum_of_squares(self, rng):
        assert grad_check(lambda x: T.sum(T.mul(x, x)), rng.normal(size=(4, 4)), eps=1e-5) < 1e-6

    def test_nll(self, rng):
        targets = rng.integers(0, 6, size=(2, 3))
        assert grad_check(lambda x: T.nll_loss(x, targets), rng.normal(size=(2, 3, 6))) < TOL

    @pytest.mark.parametrize("norm", ["instance_norm", "batch_norm"])
    def test_norms(self, norm, rng):
        fn = getattr(T, norm)
        for seed in range(5):
            x = np.random.default_rng(seed).normal(size=(3, 2, 4, 4))
            assert grad_check(weighted(fn), x) < TOL

    def test_conv2d(self, rng):
        x = rng.normal(size=(2, 2, 5, 4))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        assert grad_check(weighted(lambda t: T.conv2d(t, Tensor(w), Tensor(b))), x) < TOL
        assert grad_check(weighted(lambda t: T.conv2d(Tensor(x), t, Tensor(b))), w) < TOL
        assert grad_check(weighted(lambda t: T.conv2d(Tensor(x), Tensor(w), t)), b) < TOL

    def test_bilinear_resize(self, rng):
        assert grad_check(weighted(lambda t: T.bilinear_resize(t, (7, 5))), rng.normal(size=(2, 3, 4))) < TOL

    def test_take_rows_and_stack(self, rng):
        ids = np.array([[0, 2, 2], [1, 0, 3]])
        assert grad_check(weighted(lambda t: T.take_rows(t, ids)), rng.normal(size=(4, 3))) < TOL
        other = Tensor(rng.normal(size=(4, 3)))
        assert grad_check(weighted(lambda t: T.stack([t, other], axis=1)), rng.normal(size=(4, 3))) < TOL

    def test_fancy_getitem_accumulates_repeats(self, rng):
        idx = (np.array([0, 0, 2]), np.array([1, 1, 0]))
        assert grad_check(weighted(lambda t: t[idx]), rng.normal(size=(3, 2))) < TOL

    def test_shared_subexpression(self, rng):
        def f(x):
            y = T.tanh(x)
            return T.sum(T.mul(y, T.exp(y)))

        assert grad_check(f, rng.normal(size=(3, 3))) < TOL


class TestErrors:
    def test_shape_error_names_op_and_shapes(self):
        with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(4, 2\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_non_finite_names_producer(self):
        with pytest.raises(NonFiniteError, match="log"):
            T.log(Tensor([0.0, 1.0]))

    def test_grad_check_rejects_eps(self):
        with pytest.raises(ValueError):
            grad_check(T.sum, np.ones(3), eps=1e-2)

    def test_grad_check_non_finite_function(self):
        with pytest.raises(NonFiniteError):
            grad_check(lambda x: T.sum(T.log(x)), np.array([1e-7, 1.0]), eps=1e-6)

    def test_backward_needs_scalar(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones(3), requires_grad=True).backward()
