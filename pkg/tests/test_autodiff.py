"""Gradient checks for every autodiff op against central finite differences."""

import numpy as np
import pytest
import scipy.sparse as sp

from mhcr import autodiff as ad
from mhcr.errors import ShapeError

from conftest import assert_grad_close, finite_difference

rng = np.random.default_rng(42)


def scalar_loss(t: ad.Tensor) -> ad.Tensor:
    return ad.mean(ad.mul(t, t))


@pytest.mark.parametrize(
    "op,shape",
    [
        (ad.exp, (3, 4)),
        (ad.softplus, (3, 4)),
        (ad.row_normalize, (4, 5)),
        (ad.transpose, (3, 4)),
    ],
)
def test_unary_gradients(op, shape):
    x = rng.normal(size=shape)
    x_t = ad.Tensor(x, requires_grad=True)
    scalar_loss(op(x_t)).backward()
    numeric = finite_difference(lambda: scalar_loss(op(ad.Tensor(x))).item(), x)
    assert_grad_close(x_t.grad, numeric, op.__name__)


def test_log_gradient():
    x = rng.uniform(0.5, 3.0, size=(3, 4))
    x_t = ad.Tensor(x, requires_grad=True)
    scalar_loss(ad.log(x_t)).backward()
    numeric = finite_difference(lambda: scalar_loss(ad.log(ad.Tensor(x))).item(), x)
    assert_grad_close(x_t.grad, numeric, "log")


def test_matmul_gradients_both_sides():
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    a_t, b_t = ad.Tensor(a, requires_grad=True), ad.Tensor(b, requires_grad=True)
    scalar_loss(ad.matmul(a_t, b_t)).backward()
    num_a = finite_difference(lambda: scalar_loss(ad.matmul(ad.Tensor(a), ad.Tensor(b))).item(), a)
    num_b = finite_difference(lambda: scalar_loss(ad.matmul(ad.Tensor(a), ad.Tensor(b))).item(), b)
    assert_grad_close(a_t.grad, num_a, "matmul/a")
    assert_grad_close(b_t.grad, num_b, "matmul/b")


def test_spmm_gradient():
    matrix = sp.random(5, 4, density=0.5, random_state=1, format="csr")
    x = rng.normal(size=(4, 3))
    x_t = ad.Tensor(x, requires_grad=True)
    scalar_loss(ad.spmm(matrix, x_t)).backward()
    numeric = finite_difference(lambda: scalar_loss(ad.spmm(matrix, ad.Tensor(x))).item(), x)
    assert_grad_close(x_t.grad, numeric, "spmm")


def test_add_mul_broadcast_gradients():
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 1))
    a_t, b_t = ad.Tensor(a, requires_grad=True), ad.Tensor(b, requires_grad=True)
    scalar_loss(ad.mul(ad.add(a_t, b_t), b_t)).backward()

    def f():
        return scalar_loss(ad.mul(ad.add(ad.Tensor(a), ad.Tensor(b)), ad.Tensor(b))).item()

    assert_grad_close(a_t.grad, finite_difference(f, a), "add/a")
    assert_grad_close(b_t.grad, finite_difference(f, b), "mul+add/b")


def test_gather_rows_accumulates_duplicates():
    x = rng.normal(size=(5, 3))
    idx = np.array([0, 2, 2, 4])
    x_t = ad.Tensor(x, requires_grad=True)
    scalar_loss(ad.gather_rows(x_t, idx)).backward()
    numeric = finite_difference(lambda: scalar_loss(ad.gather_rows(ad.Tensor(x), idx)).item(), x)
    assert_grad_close(x_t.grad, numeric, "gather_rows")


def test_concat_rows_gradient():
    a = rng.normal(size=(2, 3))
    b = rng.normal(size=(4, 3))
    a_t, b_t = ad.Tensor(a, requires_grad=True), ad.Tensor(b, requires_grad=True)
    scalar_loss(ad.concat_rows([a_t, b_t])).backward()

    def f():
        return scalar_loss(ad.concat_rows([ad.Tensor(a), ad.Tensor(b)])).item()

    assert_grad_close(a_t.grad, finite_difference(f, a), "concat/a")
    assert_grad_close(b_t.grad, finite_difference(f, b), "concat/b")


def test_sum_axis_and_mean_gradients():
    x = rng.normal(size=(4, 3))
    x_t = ad.Tensor(x, requires_grad=True)
    loss = ad.mean(ad.exp(ad.tensor_sum(x_t, axis=1)))
    loss.backward()
    numeric = finite_difference(
        lambda: ad.mean(ad.exp(ad.tensor_sum(ad.Tensor(x), axis=1))).item(), x
    )
    assert_grad_close(x_t.grad, numeric, "sum-axis")


def test_row_dot_gradient():
    a = rng.normal(size=(4, 3))
    b = rng.normal(size=(4, 3))
    a_t, b_t = ad.Tensor(a, requires_grad=True), ad.Tensor(b, requires_grad=True)
    ad.mean(ad.softplus(ad.row_dot(a_t, b_t))).backward()

    def f():
        return ad.mean(ad.softplus(ad.row_dot(ad.Tensor(a), ad.Tensor(b)))).item()

    assert_grad_close(a_t.grad, finite_difference(f, a), "row_dot/a")
    assert_grad_close(b_t.grad, finite_difference(f, b), "row_dot/b")


def test_reused_tensor_accumulates_both_paths():
    x = rng.normal(size=(3, 3))
    x_t = ad.Tensor(x, requires_grad=True)
    out = ad.add(ad.matmul(x_t, x_t), x_t)
    scalar_loss(out).backward()
    numeric = finite_difference(
        lambda: scalar_loss(ad.add(ad.matmul(ad.Tensor(x), ad.Tensor(x)), ad.Tensor(x))).item(), x
    )
    assert_grad_close(x_t.grad, numeric, "reuse")


def test_scale_and_python_operators():
    x = rng.normal(size=(2, 2))
    x_t = ad.Tensor(x, requires_grad=True)
    out = (x_t * 3.0 - x_t) * 0.5 + x_t
    scalar_loss(out).backward()
    numeric = finite_difference(
        lambda: scalar_loss((ad.Tensor(x) * 3.0 - ad.Tensor(x)) * 0.5 + ad.Tensor(x)).item(), x
    )
    assert_grad_close(x_t.grad, numeric, "operators")


def test_softplus_is_stable_for_large_inputs():
    x = ad.Tensor(np.array([[800.0, -800.0]]))
    out = ad.softplus(x)
    assert np.isfinite(out.data).all()
    assert out.data[0, 0] == pytest.approx(800.0)
    assert out.data[0, 1] == pytest.approx(0.0, abs=1e-12)


def test_row_normalize_zero_row_maps_to_zero():
    x = ad.Tensor(np.array([[0.0, 0.0], [3.0, 4.0]]), requires_grad=True)
    out = ad.row_normalize(x)
    assert np.allclose(out.data[0], 0.0)
    assert np.allclose(np.linalg.norm(out.data[1]), 1.0)


def test_backward_requires_scalar():
    x = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))


def test_no_graph_is_built_without_requires_grad():
    a = ad.Tensor(np.ones((2, 2)))
    out = ad.matmul(a, a)
    assert out._backward is None and out._parents == ()
