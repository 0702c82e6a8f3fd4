import numpy as np
import pytest

from osxray.errors import ContractError, DimensionError
from osxray.tensor import Tensor, grad_check


def test_add_componentwise():
    out = Tensor([1.0, 2.0]) + Tensor([3.0, 4.0])
    assert np.array_equal(out.data, [4.0, 6.0])


def test_mul_by_zero_annihilates_value_and_gradient():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    out = (x * Tensor([0.0, 0.0, 0.0])).sum()
    out.backward()
    assert np.array_equal(out.data, 0.0)
    assert np.array_equal(x.grad, [0.0, 0.0, 0.0])


def test_leaky_relu_negative_slope():
    out = Tensor([-1.0]).leaky_relu(alpha=0.1)
    assert out.data[0] == pytest.approx(-0.1)


def test_leaky_relu_gradcheck():
    # keep values away from the kink at 0
    x = Tensor(np.array([-2.0, -0.5, 0.7, 3.0]), dtype=np.float64)
    rep = grad_check(lambda t: t.leaky_relu(0.1).frobenius_sq(), x, tol=1e-6)
    assert rep["pass"], rep["max_rel_err"]


def test_matmul_identity_exact():
    rng = np.random.default_rng(3)
    a = Tensor(rng.normal(size=(2, 2)).astype(np.float32))
    b = Tensor(rng.normal(size=(2, 2)).astype(np.float32))
    eye = Tensor(np.eye(2, dtype=np.float32))
    left = (a @ eye) @ b
    right = a @ (eye @ b)
    direct = a @ b
    assert np.array_equal(left.data, direct.data)
    assert np.array_equal(right.data, direct.data)


def test_matmul_hand_example():
    m = Tensor([[1.0, 1.0], [1.0, 1.0]])
    out = m.T @ m
    assert np.array_equal(out.data, [[2.0, 2.0], [2.0, 2.0]])


def test_matmul_gradient_rowsums():
    # d sum(A B) / dA = matrix whose columns are the row-sums of B
    rng = np.random.default_rng(5)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype=np.float64)
    b_np = rng.normal(size=(4, 2))
    (a @ Tensor(b_np, dtype=np.float64)).sum().backward()
    expected = np.tile(b_np.sum(axis=1), (3, 1))
    assert np.allclose(a.grad, expected)


def test_matmul_inner_dim_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 2)))


def test_frobenius_sq_values():
    assert Tensor(np.zeros((3, 3))).frobenius_sq().data == 0.0
    assert Tensor(np.eye(3)).frobenius_sq().data == 3.0
    assert Tensor([[1.0, 2.0], [2.0, 1.0]]).frobenius_sq().data == 10.0


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_frobenius_gives_2x():
    x = Tensor(np.array([[1.0, -2.0], [0.5, 3.0]]), requires_grad=True)
    x.frobenius_sq().backward()
    assert np.allclose(x.grad, 2 * x.data)


def test_backward_constant_loss_no_gradients():
    c = Tensor(1.5)
    c.backward()  # detached scalar: no-op
    assert c.grad is None or np.array_equal(c.grad, 1.0)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError, match="scalar"):
        (x * 2.0).backward()


def test_double_backward_is_an_error():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = x.sum()
    loss.backward()
    with pytest.raises(ContractError, match="already ran"):
        loss.backward()


def test_non_finite_construction_rejected():
    with pytest.raises(ContractError, match="non-finite"):
        Tensor([1.0, float("nan")])
    with pytest.raises(ContractError, match="non-finite"):
        Tensor([float("inf")])


def test_grad_check_polynomial():
    x = Tensor(np.array([3.0]), dtype=np.float64)
    rep = grad_check(lambda t: (t * t).sum(), x, eps=1e-5, tol=1e-6)
    assert rep["pass"]
    assert rep["numeric"][0] == pytest.approx(6.0, abs=1e-6)


def test_grad_check_frobenius_random():
    x = Tensor(np.random.default_rng(9).normal(size=(4, 4)), dtype=np.float64)
    rep = grad_check(lambda t: t.frobenius_sq(), x, tol=1e-6)
    assert rep["pass"], rep["max_rel_err"]


def test_grad_check_rejects_vector_function():
    with pytest.raises(ContractError, match="scalar"):
        grad_check(lambda t: t * 2.0, Tensor(np.ones(3)))


def test_primitives_match_finite_differences_100_seeds():
    # composite touching add/sub/mul/div/matmul/sum/exp/log/leaky_relu/pow
    def f(t):
        a = t.reshape((2, 3))
        b = (a * 2.0 + 1.5).leaky_relu(0.1)
        c = b @ b.T
        d = (c / 3.0 - 0.25) ** 2
        return (d.sum() * 1e-2 + ((a * 0.3) ** 2).exp().sum() * 0.1
                + ((a * a) + 1.0).log().sum())

    worst = 0.0
    for seed in range(100):
        x = Tensor(np.random.default_rng(seed).normal(size=6) + 0.1, dtype=np.float64)
        rep = grad_check(f, x, eps=1e-6, tol=1e-6)
        worst = max(worst, rep["max_rel_err"])
    assert worst < 1e-6, worst


def test_broadcasting_preserves_operand_values():
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    b = np.array([10.0], dtype=np.float32)
    ta, tb = Tensor(a.copy()), Tensor(b.copy())
    out = ta + tb
    assert out.shape == (2, 3)
    assert np.array_equal(ta.data, a)
    assert np.array_equal(tb.data, b)


def test_broadcast_backward_sums_over_expanded_axes():
    bias = Tensor(np.zeros((1, 3)), requires_grad=True)
    x = Tensor(np.ones((4, 3)))
    (x + bias).sum().backward()
    assert np.array_equal(bias.grad, np.full((1, 3), 4.0))


def test_shape_mismatch_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4,\)"):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros(4))


def test_shared_subexpression_accumulation_vs_path_oracle():
    # 5-node graph: x -> a=3x, x -> b=2x, c=a+b, loss=sum(c*x)
    # paths: d(loss)/dx = (3x)' term... brute force by per-path chain rule:
    #   loss = (3x + 2x) * x = 5x^2, so dloss/dx = 10x.
    x_val = np.array([1.5, -0.5])
    x = Tensor(x_val, requires_grad=True, dtype=np.float64)
    a = x * 3.0
    b = x * 2.0
    c = a + b
    loss = (c * x).sum()
    loss.backward()
    # per-path oracle: path via a (3*x), via b (2*x), and the direct factor (c)
    oracle = 3.0 * x_val + 2.0 * x_val + (3.0 * x_val + 2.0 * x_val)
    assert np.allclose(x.grad, oracle)
    assert np.allclose(x.grad, 10.0 * x_val)
