"""Differentiation engine: forward values, gradients vs finite differences,
finiteness policing, and graph bookkeeping."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rxf.autograd import Tensor, concat, no_grad, stack


def fd_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar-valued f at x (float64)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x)
        flat[i] = orig - h
        lo = f(x)
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * h)
    return g


def check_against_fd(build, x0: np.ndarray, h: float = 1e-6, rtol: float = 1e-6):
    """build(Tensor) -> scalar Tensor; compares backward against central FD."""
    t = Tensor(x0.copy(), requires_grad=True)
    build(t).backward()
    analytic = t.grad
    numeric = fd_grad(lambda x: build(Tensor(x)).item(), x0.copy(), h=h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    rel = np.abs(analytic - numeric) / denom
    assert rel.max() < rtol, f"max relative gradient error {rel.max():.3e}"


class TestForward:
    def test_arithmetic_matches_numpy(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        ta, tb = Tensor(a), Tensor(b)
        np.testing.assert_allclose((ta + tb).data, a + b)
        np.testing.assert_allclose((ta * tb).data, a * b)
        np.testing.assert_allclose((ta - tb).data, a - b)
        np.testing.assert_allclose((ta / (tb + 10.0)).data, a / (b + 10.0))
        np.testing.assert_allclose((ta ** 3).data, a ** 3)
        np.testing.assert_allclose((ta @ tb.swapaxes(0, 1)).data, a @ b.T)

    def test_reductions_and_shapes(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(2, 3, 4))
        t = Tensor(a)
        np.testing.assert_allclose(t.sum(axis=1).data, a.sum(axis=1))
        np.testing.assert_allclose(t.mean(axis=-1, keepdims=True).data, a.mean(axis=-1, keepdims=True))
        np.testing.assert_allclose(t.reshape(6, 4).data, a.reshape(6, 4))
        np.testing.assert_allclose(t.swapaxes(0, 2).data, a.swapaxes(0, 2))

    def test_softmax_rows_sum_to_one(self):
        t = Tensor(np.random.default_rng(2).normal(size=(5, 7)))
        np.testing.assert_allclose(t.softmax(axis=-1).data.sum(axis=-1), np.ones(5), atol=1e-12)

    def test_logsumexp_matches_direct(self):
        a = np.random.default_rng(3).normal(size=(4, 6))
        expected = np.log(np.exp(a).sum(axis=1))
        np.testing.assert_allclose(Tensor(a).logsumexp(axis=1).data, expected, atol=1e-12)

    def test_logsumexp_is_overflow_safe(self):
        a = np.array([[1000.0, 1000.0]])
        np.testing.assert_allclose(Tensor(a).logsumexp(axis=1).data, [1000.0 + np.log(2.0)])

    def test_int_input_becomes_float(self):
        assert Tensor([1, 2, 3]).dtype == np.float64


class TestGradients:
    @pytest.mark.parametrize(
        "name,build",
        [
            ("add", lambda t: (t + t * 2.0).sum()),
            ("mul", lambda t: (t * t).sum()),
            ("div", lambda t: (t / (t * t + 1.0)).sum()),
            ("pow", lambda t: (t ** 3).sum()),
            ("neg", lambda t: (-t).sum()),
            ("sub_bcast", lambda t: (t - t.sum(axis=0, keepdims=True)).sum()),
            ("mean", lambda t: t.mean()),
            ("mean_axis", lambda t: (t.mean(axis=1) ** 2).sum()),
            ("reshape", lambda t: (t.reshape(t.data.size) ** 2).sum()),
            ("swapaxes", lambda t: (t.swapaxes(0, 1) * 0.5).sum()),
            ("exp", lambda t: t.exp().sum()),
            ("tanh", lambda t: t.tanh().sum()),
            ("gelu", lambda t: t.gelu().sum()),
            ("softmax", lambda t: (t.softmax(axis=-1) ** 2).sum()),
            ("logsumexp", lambda t: t.logsumexp(axis=1).sum()),
            ("astype", lambda t: t.astype(np.float64).sum()),
        ],
    )
    def test_unary_ops_match_fd(self, name, build):
        x0 = np.random.default_rng(hash(name) % 2 ** 31).normal(size=(3, 4))
        check_against_fd(build, x0)

    def test_log_sqrt_on_positive_input(self):
        x0 = np.random.default_rng(7).uniform(0.5, 2.0, size=(3, 4))
        check_against_fd(lambda t: t.log().sum(), x0)
        check_against_fd(lambda t: t.sqrt().sum(), x0)

    def test_relu_and_clip_away_from_kinks(self):
        x0 = np.random.default_rng(8).choice([-2.0, -1.0, 1.0, 2.0], size=(4, 4))
        check_against_fd(lambda t: (t.relu() ** 2).sum(), x0)
        check_against_fd(lambda t: t.clip(-1.5, 1.5).sum(), x0)

    def test_matmul_batched(self):
        rng = np.random.default_rng(9)
        b = Tensor(rng.normal(size=(2, 4, 3)))
        check_against_fd(lambda t: ((t @ b) ** 2).sum(), rng.normal(size=(2, 5, 4)))

    def test_matmul_broadcast_weight(self):
        rng = np.random.default_rng(10)
        w0 = rng.normal(size=(4, 3))
        x = Tensor(rng.normal(size=(2, 5, 4)))
        check_against_fd(lambda w: ((x @ w) ** 2).sum(), w0)

    def test_take_rows(self):
        rng = np.random.default_rng(11)
        idx = np.array([0, 2, 2, 1])
        check_against_fd(lambda t: (t.take_rows(idx) ** 2).sum(), rng.normal(size=(3, 4)))

    def test_concat_and_stack(self):
        rng = np.random.default_rng(12)
        b = Tensor(rng.normal(size=(3, 2)))
        check_against_fd(lambda t: (concat([t, b], axis=1) ** 2).sum(), rng.normal(size=(3, 4)))
        check_against_fd(lambda t: (stack([t, t * 2.0], axis=1) ** 2).sum(), rng.normal(size=(3, 4)))

    def test_grad_accumulates_across_reuse(self):
        t = Tensor(np.array([3.0]), requires_grad=True)
        (t * t).sum().backward()
        np.testing.assert_allclose(t.grad, [6.0])

    def test_constant_loss_gives_zero_grad(self):
        t = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        (t * 0.0).sum().backward()
        np.testing.assert_allclose(t.grad, [0.0, 0.0])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.integers(1, 4), st.integers(1, 4))
    def test_composite_expression_matches_fd(self, seed, rows, cols):
        rng = np.random.default_rng(seed)
        b = Tensor(rng.normal(size=(rows, cols)))
        x0 = rng.normal(size=(rows, cols))
        check_against_fd(lambda t: ((t * b + t).tanh() * (t ** 2 + 1.0)).mean(), x0)


class TestFinitePolicy:
    def test_exp_overflow_raises(self):
        with pytest.raises(FloatingPointError, match="exp"):
            Tensor(np.array([1e6])).exp()

    def test_log_zero_raises(self):
        with pytest.raises(FloatingPointError, match="log"):
            Tensor(np.array([0.0])).log()

    def test_div_by_zero_raises(self):
        with pytest.raises(FloatingPointError, match="div"):
            Tensor(np.array([1.0])) / Tensor(np.array([0.0]))

    def test_nan_input_rejected_at_construction(self):
        with pytest.raises(FloatingPointError):
            Tensor(np.array([np.nan]))


class TestGraph:
    def test_backward_requires_scalar(self):
        t = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            (t * 2.0).backward()

    def test_no_grad_suppresses_graph(self):
        t = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            out = (t * 2.0).sum()
        assert not out.requires_grad and out._parents == ()

    def test_non_required_inputs_get_no_grad(self):
        a = Tensor(np.ones(3), requires_grad=True)
        b = Tensor(np.ones(3))
        (a * b).sum().backward()
        assert b.grad is None and a.grad is not None

    def test_dtype_mismatch_raises(self):
        with pytest.raises(TypeError, match="dtype"):
            Tensor(np.ones(3, dtype=np.float32)) + Tensor(np.ones(3, dtype=np.float64))

    def test_mixed_precision_via_astype(self):
        t = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        t.astype(np.float64).sum().backward()
        assert t.grad.dtype == np.float32

    def test_item_requires_scalar(self):
        with pytest.raises(ValueError, match="scalar"):
            Tensor(np.ones(2)).item()
