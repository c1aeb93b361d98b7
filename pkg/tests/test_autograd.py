import math

import numpy as np
import pytest

from scsnet.autograd import (
    Tensor,
    backward,
    elementwise,
    extract_windows,
    finite_difference_check,
    l2_norm,
    matmul,
    reduce,
)
from scsnet.errors import ContractError, DomainError, ShapeError


def t(data, rg=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=rg)


class TestElementwise:
    def test_add_componentwise(self):
        out = elementwise("add", t([1.0, 2.0]), t([3.0, 4.0]))
        assert np.array_equal(out.data, [4.0, 6.0])

    def test_sign_definition(self):
        out = elementwise("sign", t([-2.0, 0.0, 5.0]))
        assert np.array_equal(out.data, [-1.0, 0.0, 1.0])

    def test_power_tensor_exponent_value_and_grad(self):
        # d/d e of b**e is b**e * ln(b); at b=0.5, e=2 that is 0.25 * ln 0.5
        base = t([0.5])
        e = t([2.0], rg=True)
        out = elementwise("power", base, e)
        assert out.data == pytest.approx([0.25])
        backward(out.sum())
        assert e.grad == pytest.approx([0.25 * math.log(0.5)], abs=1e-12)

    def test_power_nonpositive_base_tensor_exponent(self):
        with pytest.raises(DomainError):
            elementwise("power", t([-1.0]), t([2.0], rg=True))
        with pytest.raises(DomainError):
            elementwise("power", t([0.0]), t([2.0], rg=True))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            elementwise("add", t([1.0, 2.0]), t([1.0, 2.0, 3.0]))

    def test_scalar_broadcast(self):
        out = t([[1.0, 2.0], [3.0, 4.0]]) * 2.0
        assert np.array_equal(out.data, [[2.0, 4.0], [6.0, 8.0]])
        x = t([1.0, 2.0, 3.0], rg=True)
        s = t([2.0], rg=True)
        backward((x * s).sum())
        assert np.array_equal(x.grad, [2.0, 2.0, 2.0])
        assert s.grad == pytest.approx([6.0])  # gradient sums back to the scalar

    def test_sign_gradient_is_zero(self):
        x = t([-2.0, 0.0, 3.0], rg=True)
        y = (x.sign() * x).sum()  # |x| via sign, but sign path carries no grad
        backward(y)
        assert np.array_equal(x.grad, [-1.0, 0.0, 1.0])

    def test_abs_subgradient_zero_at_origin(self):
        x = t([-2.0, 0.0, 3.0], rg=True)
        backward(x.abs().sum())
        assert np.array_equal(x.grad, [-1.0, 0.0, 1.0])

    def test_log_domain(self):
        with pytest.raises(DomainError):
            t([0.0]).log()

    def test_unknown_op(self):
        with pytest.raises(ContractError):
            elementwise("xor", t([1.0]), t([1.0]))


class TestMatmul:
    def test_identity(self):
        a = t([[1.0, 2.0], [3.0, 4.0]])
        out = matmul(t(np.eye(2)), a)
        assert np.array_equal(out.data, a.data)

    def test_hand_product(self):
        out = matmul(t([[1.0, 2.0]]), t([[3.0], [4.0]]))
        assert np.array_equal(out.data, [[11.0]])

    def test_zero_annihilator(self):
        out = matmul(t(np.zeros((2, 3))), t(np.arange(12.0).reshape(3, 4)))
        assert np.array_equal(out.data, np.zeros((2, 4)))

    def test_inner_dim_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(t(np.zeros((2, 3))), t(np.zeros((2, 3))))

    def test_backward_shapes(self):
        a = t(np.arange(6.0).reshape(2, 3), rg=True)
        b = t(np.arange(12.0).reshape(3, 4), rg=True)
        backward(matmul(a, b).sum())
        # dA = dC @ B^T with dC all-ones
        assert np.allclose(a.grad, np.ones((2, 4)) @ b.data.T)
        assert np.allclose(b.grad, a.data.T @ np.ones((2, 4)))


class TestReduce:
    def test_sum(self):
        assert reduce("sum", t([1.0, 2.0, 3.0])).item() == 6.0

    def test_mean_grad(self):
        x = t([2.0, 4.0], rg=True)
        out = reduce("mean", x)
        assert out.item() == 3.0
        backward(out)
        assert np.array_equal(x.grad, [0.5, 0.5])

    def test_max_tie_breaks_to_lowest_flat_index(self):
        x = t([1.0, 5.0, 5.0], rg=True)
        out = reduce("max", x)
        assert out.item() == 5.0
        backward(out)
        assert np.array_equal(x.grad, [0.0, 1.0, 0.0])

    def test_axis_reductions(self):
        x = t([[1.0, 2.0], [3.0, 4.0]], rg=True)
        out = x.sum(axis=0)
        assert np.array_equal(out.data, [4.0, 6.0])
        backward(out.sum())
        assert np.array_equal(x.grad, np.ones((2, 2)))

    def test_max_axis_grad(self):
        x = t([[1.0, 7.0], [7.0, 2.0]], rg=True)
        backward(x.max(axis=1).sum())
        assert np.array_equal(x.grad, [[0.0, 1.0], [1.0, 0.0]])

    def test_bad_axis(self):
        with pytest.raises(ShapeError):
            t([[1.0]]).sum(axis=2)


class TestBackward:
    def test_sum_grad_is_ones(self):
        x = t([1.0, 2.0, 3.0], rg=True)
        backward(x.sum())
        assert np.array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_square_grad(self):
        x = t([3.0], rg=True)
        backward((x * x).sum())
        assert np.array_equal(x.grad, [6.0])

    def test_fanout_accumulates(self):
        x = t([1.0], rg=True)
        backward(x.sum() + x.sum())
        assert np.array_equal(x.grad, [2.0])

    def test_duplicated_subexpression_doubles_grad(self):
        x = t(np.array([0.3, -0.7, 1.1]), rg=True)
        y = (x * x).sum()
        backward(y)
        single = x.grad.copy()
        x.zero_grad()
        a = x * x
        backward(a.sum() + a.sum())
        assert np.array_equal(x.grad, 2.0 * single)

    def test_non_scalar_root_rejected(self):
        x = t([1.0, 2.0], rg=True)
        with pytest.raises(ContractError):
            backward(x * 2.0)

    def test_root_must_require_grad(self):
        with pytest.raises(ContractError):
            backward(t([1.0]).sum())

    def test_deterministic_bit_identical(self):
        rng = np.random.default_rng(7)
        data = rng.uniform(-1, 1, (4, 5))
        grads = []
        for _ in range(2):
            x = t(data, rg=True)
            y = ((x * x).sum(axis=1) * 0.5 + x.sum(axis=1)).sum()
            backward(y)
            grads.append(x.grad.copy())
        assert np.array_equal(grads[0], grads[1])

    def test_graph_freed_after_backward(self):
        x = t([2.0], rg=True)
        y = (x * x).sum()
        backward(y)
        assert y._prev == () and y._backward is None


class TestStructural:
    def test_reshape_preserves_sum(self):
        x = t(np.arange(12.0))
        assert x.reshape((3, 4)).data.sum() == x.data.sum()

    def test_reshape_bad_length(self):
        with pytest.raises(ShapeError):
            t(np.arange(6.0)).reshape((4, 2))

    def test_reshape_grad(self):
        x = t(np.arange(6.0), rg=True)
        backward((x.reshape((2, 3)) * 2.0).sum())
        assert np.array_equal(x.grad, np.full(6, 2.0))

    def test_transpose_roundtrip_grad(self):
        x = t(np.arange(6.0).reshape(2, 3), rg=True)
        backward((x.transpose() * t(np.arange(6.0).reshape(3, 2))).sum())
        assert np.array_equal(x.grad, np.arange(6.0).reshape(3, 2).T)

    def test_l2_norm_value(self):
        assert l2_norm(t([3.0, 4.0])).item() == 5.0

    def test_l2_norm_axis(self):
        x = t([[3.0, 4.0], [0.0, 0.0]])
        out = l2_norm(x, axis=1)
        assert np.array_equal(out.data, [5.0, 0.0])

    def test_l2_norm_zero_subgradient(self):
        x = t([[3.0, 4.0], [0.0, 0.0]], rg=True)
        backward(l2_norm(x, axis=1).sum())
        assert np.allclose(x.grad, [[0.6, 0.8], [0.0, 0.0]])

    def test_detach_blocks_grad(self):
        x = t([2.0], rg=True)
        y = (x.detach() * x).sum()
        backward(y)
        assert np.array_equal(x.grad, [2.0])


class TestExtractWindows:
    def test_shapes_and_values(self):
        x = t(np.arange(2 * 4 * 4 * 3, dtype=np.float64).reshape(2, 4, 4, 3))
        cols = extract_windows(x, (3, 3), (1, 1))
        assert cols.shape == (2, 2, 2, 27)
        # brute-force the (n=1, i=1, j=0) window
        want = x.data[1, 1:4, 0:3, :].reshape(-1)
        assert np.array_equal(cols.data[1, 1, 0], want)

    def test_stride(self):
        x = t(np.zeros((1, 5, 7, 2)))
        cols = extract_windows(x, (3, 3), (2, 2))
        assert cols.shape == (1, 2, 3, 18)

    def test_underflow(self):
        with pytest.raises(ShapeError):
            extract_windows(t(np.zeros((1, 2, 2, 1))), (3, 3), (1, 1))

    def test_backward_counts_window_membership(self):
        # with all-ones upstream grad each input cell receives one unit per
        # window that contains it
        x = t(np.zeros((1, 3, 3, 1)), rg=True)
        cols = extract_windows(x, (2, 2), (1, 1))
        backward(cols.sum())
        assert np.array_equal(x.grad[0, :, :, 0],
                              [[1, 2, 1], [2, 4, 2], [1, 2, 1]])

    def test_3d_windows(self):
        x = t(np.arange(1 * 4 * 4 * 5 * 1, dtype=np.float64).reshape(1, 4, 4, 5, 1))
        cols = extract_windows(x, (2, 2, 3), (1, 1, 2))
        assert cols.shape == (1, 3, 3, 2, 12)
        want = x.data[0, 0:2, 0:2, 2:5, :].reshape(-1)
        assert np.array_equal(cols.data[0, 0, 0, 1], want)


class TestFiniteDifference:
    def test_polynomial_tight(self):
        rng = np.random.default_rng(11)
        x = t(rng.uniform(-1, 1, 5), rg=True)
        err = finite_difference_check(lambda v: (v * v).sum(), x, eps=1e-5)
        assert err <= 1e-6

    def test_linear_exact(self):
        # truncation error vanishes for linear f, so a larger step keeps the
        # roundoff term (ulp / eps) below the bound as well
        rng = np.random.default_rng(12)
        x = t(rng.uniform(-1, 1, 4), rg=True)
        err = finite_difference_check(lambda v: v.sum(), x, eps=1e-3)
        assert err <= 1e-12

    def test_restores_input(self):
        x = t([1.0, 2.0], rg=True)
        before = x.data.copy()
        finite_difference_check(lambda v: (v * v).sum(), x)
        assert np.array_equal(x.data, before)

    @pytest.mark.parametrize("name", ["add", "sub", "mul"])
    def test_binary_ops(self, name):
        rng = np.random.default_rng(hash(name) % 2**32)
        other = t(rng.uniform(0.5, 1.5, 6))
        x = t(rng.uniform(0.5, 1.5, 6), rg=True)
        err = finite_difference_check(
            lambda v: elementwise(name, v, other).sum(), x, eps=1e-6)
        assert err <= 1e-6

    @pytest.mark.parametrize("name", ["neg", "abs", "exp", "log"])
    def test_unary_ops(self, name):
        rng = np.random.default_rng(hash(name) % 2**32)
        x = t(rng.uniform(0.5, 1.5, 6), rg=True)
        err = finite_difference_check(
            lambda v: elementwise(name, v).sum(), x, eps=1e-6)
        assert err <= 1e-4

    def test_power_both_sides(self):
        rng = np.random.default_rng(21)
        base = t(rng.uniform(0.5, 1.5, 5), rg=True)
        expo = t(rng.uniform(0.5, 2.0, 5), rg=True)
        assert finite_difference_check(
            lambda v: elementwise("power", v, expo).sum(), base, eps=1e-6) <= 1e-4
        assert finite_difference_check(
            lambda e: elementwise("power", base, e).sum(), expo, eps=1e-6) <= 1e-4

    def test_matmul_and_reductions(self):
        rng = np.random.default_rng(31)
        b = t(rng.uniform(-1, 1, (3, 2)))
        x = t(rng.uniform(-1, 1, (2, 3)), rg=True)
        assert finite_difference_check(
            lambda v: matmul(v, b).sum(), x, eps=1e-6) <= 1e-6
        assert finite_difference_check(
            lambda v: v.mean(axis=1).sum(), x, eps=1e-6) <= 1e-6

    def test_l2_norm(self):
        rng = np.random.default_rng(41)
        x = t(rng.uniform(0.2, 1.0, (3, 4)), rg=True)
        assert finite_difference_check(
            lambda v: l2_norm(v, axis=1).sum(), x, eps=1e-6) <= 1e-4
