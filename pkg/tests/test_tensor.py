import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mrovseg.errors import ContractError
from mrovseg.gradcheck import check_gradients
from mrovseg.tensor import (Tensor, backward, concat, count_macs, default_dtype, exp,
                            get_default_dtype, getitem, mac_scope, matmul, no_grad, stack)

finite = st.floats(-10, 10, allow_nan=False, width=64)


class TestForward:
    def test_default_dtype_is_float32(self):
        assert get_default_dtype() == np.float32
        assert Tensor([1.0, 2.0]).dtype == np.float32

    def test_default_dtype_context(self):
        with default_dtype(np.float64):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32

    @given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4,), elements=finite))
    def test_broadcast_add_matches_numpy(self, a, b):
        with default_dtype(np.float64):
            out = Tensor(a) + Tensor(b)
        np.testing.assert_array_equal(out.data, a + b)

    def test_matmul_batched(self, rng):
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 5))
        with default_dtype(np.float64):
            np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, a @ b)

    def test_matmul_strided_operands(self, rng):
        a = rng.standard_normal((6, 8))[:, ::2]        # [6, 4], non-contiguous
        b = rng.standard_normal((6, 8)).T[::2]         # [4, 6], non-contiguous
        with default_dtype(np.float64):
            np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, a @ b)

    def test_concat_and_stack(self):
        a, b = Tensor(np.ones((2, 3))), Tensor(np.zeros((1, 3)))
        assert concat([a, b]).shape == (3, 3)
        assert stack([a, a]).shape == (2, 2, 3)


class TestBackward:
    def test_scalar_required(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            backward(x * 2.0)

    def test_disconnected_loss(self):
        with pytest.raises(ContractError):
            backward(Tensor(np.ones(3)).sum())

    def test_accumulates_over_shared_use(self):
        with default_dtype(np.float64):
            x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
            backward((x * x + x * 3.0).sum())
        np.testing.assert_allclose(x.grad, 2 * x.data + 3.0)

    def test_broadcast_gradient_reduces(self):
        with default_dtype(np.float64):
            a = Tensor(np.ones((3, 4)), requires_grad=True)
            b = Tensor(np.ones(4), requires_grad=True)
            backward((a * b).sum())
        np.testing.assert_allclose(b.grad, np.full(4, 3.0))

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_advanced_index_scatter(self, f64):
        x = Tensor(np.arange(5.0), requires_grad=True)
        backward(getitem(x, np.array([0, 0, 3])).sum())
        np.testing.assert_allclose(x.grad, [2, 0, 0, 1, 0])

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_random_composite_gradients(self, seed):
        rng = np.random.default_rng(seed)
        with default_dtype(np.float64):
            a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
            b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
            res = check_gradients(lambda: (exp(matmul(a, b) * 0.3) / (a.sum() ** 2 + 1.0)).sum(),
                                  [a, b])
        assert res.passed


class TestMacs:
    def test_matmul_counted_in_scope(self):
        a, b = Tensor(np.ones((3, 4))), Tensor(np.ones((4, 5)))
        with count_macs() as c:
            with mac_scope("outer"):
                with mac_scope("inner"):
                    matmul(a, b)
            matmul(a, b)
        assert c.under("outer") == 60
        assert c.under("outer/inner") == 60
        assert c.total == 120

    def test_nothing_counted_without_counter(self):
        matmul(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))))
