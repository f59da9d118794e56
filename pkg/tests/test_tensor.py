"""Tests for the reverse-mode tensor engine."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from linearno import tensor as T
from linearno.tensor import Tensor, concat, gelu, layer_norm, no_grad, softmax

from oracles import fd_gradient, matmul_loops, rel_err, softmax_rows

rng = np.random.default_rng(42)


def check_grads(build, arrays, tol=1e-5, h=1e-6):
    """Compare analytic gradients of ``build`` against central differences.

    ``build`` maps a list of Tensors to a scalar Tensor; ``arrays`` are the
    leaf values.
    """
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(leaves)
    out.backward()
    for i, a in enumerate(arrays):
        def f(x, i=i):
            vals = [Tensor(arr.copy()) for arr in arrays]
            vals[i] = Tensor(x.copy())
            return float(build(vals).data)

        fd = fd_gradient(f, a, h=h)
        assert leaves[i].grad is not None
        assert rel_err(leaves[i].grad, fd) < tol, f"leaf {i}"


class TestElementwise:
    def test_values_match_numpy(self):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((3, 4))
        assert_allclose((Tensor(a) + Tensor(b)).data, a + b)
        assert_allclose((Tensor(a) * Tensor(b)).data, a * b)
        assert_allclose((Tensor(a) - Tensor(b)).data, a - b)
        assert_allclose((Tensor(a) / Tensor(b + 10)).data, a / (b + 10))
        assert_allclose((Tensor(a) ** 3).data, a ** 3)

    def test_broadcast_trailing_alignment(self):
        """Size-1 and missing leading dims broadcast; gradients sum back."""
        a = rng.standard_normal((2, 3, 4))
        b = rng.standard_normal((1, 4))

        def build(ts):
            return (ts[0] * ts[1]).sum()

        check_grads(build, [a, b])

    def test_scalar_operand(self):
        a = rng.standard_normal((5,))
        t = Tensor(a, requires_grad=True)
        out = (2.5 * t + 1.0).sum()
        out.backward()
        assert_allclose(t.grad, np.full(5, 2.5))

    def test_grads_elementwise_chain(self):
        a = rng.standard_normal((4, 3)) + 2.0
        b = rng.standard_normal((4, 3)) + 2.0

        def build(ts):
            return ((ts[0] * ts[1] + ts[0] / ts[1]).exp().log() * 0.5).sum()

        check_grads(build, [a, b])

    def test_sqrt_log_exp(self):
        a = np.abs(rng.standard_normal((6,))) + 0.5

        def build(ts):
            return (ts[0].sqrt() + ts[0].log() + (ts[0] * 0.1).exp()).sum()

        check_grads(build, [a])


class TestMatmul:
    def test_against_loop_oracle(self):
        """Vectorised matmul agrees with an explicit triple loop."""
        a = rng.standard_normal((5, 7))
        b = rng.standard_normal((7, 4))
        got = (Tensor(a) @ Tensor(b)).data
        assert_allclose(got, matmul_loops(a, b), atol=1e-12)

    def test_associativity(self):
        """(A @ B) @ C == A @ (B @ C) within 1e-9."""
        a = rng.standard_normal((6, 5))
        b = rng.standard_normal((5, 8))
        c = rng.standard_normal((8, 3))
        left = (Tensor(a) @ Tensor(b)) @ Tensor(c)
        right = Tensor(a) @ (Tensor(b) @ Tensor(c))
        assert np.max(np.abs(left.data - right.data)) < 1e-9

    def test_batched_broadcast(self):
        """[B,h,n,k] @ [h,k,m] broadcasts batch dims like numpy."""
        a = rng.standard_normal((2, 3, 4, 5))
        w = rng.standard_normal((3, 5, 6))
        out = Tensor(a) @ Tensor(w)
        assert out.shape == (2, 3, 4, 6)
        assert_allclose(out.data, a @ w)

    def test_batched_gradients(self):
        a = rng.standard_normal((2, 3, 4))
        w = rng.standard_normal((4, 5))

        def build(ts):
            return ((ts[0] @ ts[1]) * 0.3).sum()

        check_grads(build, [a, w])

    def test_broadcast_weight_gradients(self):
        """Gradient of a weight shared across a batch sums over the batch."""
        a = rng.standard_normal((3, 2, 4, 5))
        w = rng.standard_normal((2, 5, 3))

        def build(ts):
            return ((ts[0] @ ts[1]) ** 2).sum()

        check_grads(build, [a, w])

    def test_shape_errors(self):
        with pytest.raises(T.ShapeError):
            Tensor(np.zeros((3, 4))) @ Tensor(np.zeros((5, 2)))
        with pytest.raises(T.ShapeError):
            Tensor(np.zeros(3)) @ Tensor(np.zeros((3, 2)))


class TestSoftmax:
    def test_rows_sum_to_one(self):
        x = rng.standard_normal((50, 9)) * 3
        y = softmax(Tensor(x), axis=-1).data
        assert_allclose(y.sum(axis=-1), np.ones(50), atol=1e-12)
        assert (y > 0).all()

    def test_matches_definition(self):
        x = rng.standard_normal((8, 5))
        assert_allclose(softmax(Tensor(x), axis=-1).data, softmax_rows(x), atol=1e-12)

    def test_shift_invariance(self):
        x = rng.standard_normal((4, 6))
        a = softmax(Tensor(x), axis=-1).data
        b = softmax(Tensor(x + 123.456), axis=-1).data
        assert_allclose(a, b, atol=1e-12)

    def test_extreme_logits_stable(self):
        x = np.array([[1e4, 0.0, -1e4], [700.0, -700.0, 0.0]])
        y = softmax(Tensor(x), axis=-1).data
        assert np.isfinite(y).all()
        assert_allclose(y.sum(axis=-1), [1.0, 1.0], atol=1e-12)

    def test_axis_choice(self):
        x = rng.standard_normal((5, 7))
        y = softmax(Tensor(x), axis=0).data
        assert_allclose(y.sum(axis=0), np.ones(7), atol=1e-12)

    def test_gradient(self):
        x = rng.standard_normal((3, 5))
        cvec = rng.standard_normal((3, 5))

        def build(ts):
            return (softmax(ts[0], axis=-1) * Tensor(cvec)).sum()

        check_grads(build, [x])

    @given(st.integers(min_value=1, max_value=6), st.integers(min_value=0, max_value=2 ** 31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_row_stochastic_property(self, m, seed):
        """Softmax output is row-stochastic for any shape and values."""
        g = np.random.default_rng(seed)
        x = g.standard_normal((3, m)) * g.uniform(0.1, 30)
        y = softmax(Tensor(x), axis=-1).data
        assert_allclose(y.sum(axis=-1), np.ones(3), atol=1e-12)


class TestReductions:
    def test_sum_axes(self):
        a = rng.standard_normal((2, 3, 4))
        assert_allclose(Tensor(a).sum().data, a.sum())
        assert_allclose(Tensor(a).sum(axis=1).data, a.sum(axis=1))
        assert_allclose(Tensor(a).sum(axis=(1, 2)).data, a.sum(axis=(1, 2)))
        assert_allclose(Tensor(a).sum(axis=-1, keepdims=True).data, a.sum(axis=-1, keepdims=True))

    def test_mean_gradient(self):
        a = rng.standard_normal((3, 4, 2))

        def build(ts):
            return (ts[0].mean(axis=(1, 2)) ** 2).sum()

        check_grads(build, [a])

    def test_sum_gradient_keepdims(self):
        a = rng.standard_normal((4, 5))

        def build(ts):
            return (ts[0].sum(axis=-1, keepdims=True) * ts[0]).sum()

        check_grads(build, [a])


class TestStructural:
    def test_reshape_roundtrip(self):
        a = rng.standard_normal((2, 3, 4))
        t = Tensor(a, requires_grad=True)
        out = t.reshape(6, 4).reshape(2, 3, 4).sum()
        out.backward()
        assert_allclose(t.grad, np.ones_like(a))

    def test_swapaxes_gradient(self):
        a = rng.standard_normal((2, 3, 4, 5))

        def build(ts):
            return (ts[0].swapaxes(-3, -2) * 1.5).sum(axis=(0, 1, 2, 3))

        check_grads(build, [a])

    def test_transpose2(self):
        a = rng.standard_normal((3, 4))
        assert_allclose(Tensor(a).transpose2().data, a.T)

    def test_concat_and_gradient(self):
        a = rng.standard_normal((3, 2))
        b = rng.standard_normal((3, 5))

        def build(ts):
            return (concat([ts[0], ts[1]], axis=-1) ** 2).sum()

        check_grads(build, [a, b])

    def test_take_rows(self):
        a = rng.standard_normal((6, 3))
        t = Tensor(a, requires_grad=True)
        idx = np.array([4, 0, 4])
        out = t.take(idx).sum()
        out.backward()
        want = np.zeros_like(a)
        want[4] += 1.0
        want[0] += 1.0
        want[4] += 1.0
        assert_allclose(t.grad, want)


class TestLayerNorm:
    def test_output_statistics(self):
        x = rng.standard_normal((7, 16)) * 3 + 2
        g = Tensor(np.ones(16))
        b = Tensor(np.zeros(16))
        y = layer_norm(Tensor(x), g, b).data
        assert_allclose(y.mean(axis=-1), np.zeros(7), atol=1e-12)
        assert_allclose(y.std(axis=-1), np.ones(7), atol=1e-3)

    def test_gradients(self):
        x = rng.standard_normal((3, 8))
        g = rng.standard_normal(8)
        b = rng.standard_normal(8)
        cvec = rng.standard_normal((3, 8))

        def build(ts):
            return (layer_norm(ts[0], ts[1], ts[2]) * Tensor(cvec)).sum()

        check_grads(build, [x, g, b], tol=1e-4)


class TestGelu:
    def test_reference_values(self):
        """gelu(x) = x * Phi(x) with the exact normal CDF."""
        from scipy.stats import norm

        x = np.array([-3.0, -1.0, 0.0, 0.5, 1.0, 3.0])
        assert_allclose(gelu(Tensor(x)).data, x * norm.cdf(x), atol=1e-12)

    def test_gradient(self):
        x = rng.standard_normal((4, 5))

        def build(ts):
            return gelu(ts[0]).sum()

        check_grads(build, [x])


class TestTape:
    def test_double_backward_raises(self):
        t = Tensor(rng.standard_normal(4), requires_grad=True)
        out = (t * t).sum()
        out.backward()
        with pytest.raises(T.TapeError):
            out.backward()

    def test_nonscalar_backward_requires_seed(self):
        t = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        out = t * 2
        with pytest.raises(T.TapeError):
            out.backward()
        out2 = t * 2
        out2.backward(np.ones((3, 3)))
        assert_allclose(t.grad, np.full((3, 3), 2.0))

    def test_accumulation_across_tapes(self):
        """Two forward/backward passes without zeroing double leaf grads."""
        t = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        (t * 3).sum().backward()
        first = t.grad.copy()
        (t * 3).sum().backward()
        assert_allclose(t.grad, 2 * first)
        t.zero_grad()
        assert t.grad is None

    def test_multiple_uses_accumulate(self):
        """A tensor used twice in one graph receives summed gradients."""
        t = Tensor(np.array([2.0]), requires_grad=True)
        out = (t * t + t).sum()
        out.backward()
        assert_allclose(t.grad, [5.0])

    def test_interior_gradients_released(self):
        t = Tensor(rng.standard_normal(4), requires_grad=True)
        mid = t * 2
        out = mid.sum()
        out.backward()
        assert mid.grad is None
        assert t.grad is not None

    def test_no_grad_records_nothing(self):
        t = Tensor(rng.standard_normal(4), requires_grad=True)
        with no_grad():
            out = (t * t).sum()
        assert not out.requires_grad
        with pytest.raises(T.TapeError):
            out.backward()

    def test_backward_without_graph_raises(self):
        t = Tensor(np.zeros(3))
        with pytest.raises(T.TapeError):
            t.backward()


class TestNumerics:
    def test_check_finite(self):
        Tensor(np.ones(3)).check_finite()
        with pytest.raises(T.NumericsError):
            Tensor(np.array([1.0, np.nan])).check_finite("loss")
        with pytest.raises(T.NumericsError):
            Tensor(np.array([np.inf])).check_finite()

    def test_float32_mode(self):
        t = Tensor(np.ones((2, 2)), dtype=np.float32)
        out = softmax(t * 2.0, axis=-1)
        assert out.dtype == np.float32

    def test_float64_default(self):
        assert Tensor([1, 2, 3]).dtype == np.float64

    def test_bitwise_determinism(self):
        """Identical inputs produce bit-identical forward and backward."""
        def run():
            g = np.random.default_rng(7)
            a = Tensor(g.standard_normal((8, 8)), requires_grad=True)
            b = Tensor(g.standard_normal((8, 8)), requires_grad=True)
            out = (softmax(a @ b, axis=-1) * a).sum()
            out.backward()
            return out.data.copy(), a.grad.copy(), b.grad.copy()

        r1 = run()
        r2 = run()
        for x, y in zip(r1, r2):
            assert np.array_equal(x, y)
