import numpy as np
import pytest

from tokenmark import tensor as T
from tokenmark.gradcheck import check_gradients
from tokenmark.optim import Optimizer
from tokenmark.tensor import GradientContractError, ShapeError, Tensor

TOL = 1e-6


def leaf(rng, *shape):
    return Tensor(rng.normal(0.0, 1.0, shape), requires_grad=True)


def test_elementwise_ops_gradcheck(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 3, 4)
    b.data = np.abs(b.data) + 0.5
    fn = lambda: T.tsum(T.exp(a * 0.3) * b / (b + 1.0) - T.sqrt(b) + T.log(b) + a ** 3)
    assert check_gradients(fn, [a, b], h=1e-6) < TOL


def test_broadcasting_gradcheck(rng):
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 4)
    fn = lambda: T.tsum(T.square(a + b) * b)
    assert check_gradients(fn, [a, b], h=1e-6) < TOL


def test_matmul_linear_gradcheck(rng):
    x, w, bias, m = leaf(rng, 2, 5, 3), leaf(rng, 4, 3), leaf(rng, 4), leaf(rng, 4, 6)
    fn = lambda: T.mean(T.matmul(T.linear(x, w, bias), m) ** 2)
    assert check_gradients(fn, [x, w, bias, m], h=1e-6) < TOL


def test_softmax_log_softmax_gradcheck(rng):
    x, r = leaf(rng, 3, 5), rng.normal(size=(3, 5))
    fn = lambda: T.tsum(T.softmax(x) * Tensor(r)) + T.tsum(T.log_softmax(x, axis=0) * Tensor(r))
    assert check_gradients(fn, [x], h=1e-6) < TOL


def test_layernorm_gradcheck(rng):
    x, g, b = leaf(rng, 2, 3, 6), leaf(rng, 6), leaf(rng, 6)
    r = Tensor(rng.normal(size=(2, 3, 6)))
    fn = lambda: T.tsum(T.layernorm(x, g, b) * r)
    assert check_gradients(fn, [x, g, b], h=1e-6) < TOL


def test_activations_gradcheck(rng):
    x = leaf(rng, 4, 5)
    x.data[np.abs(x.data) < 0.05] = 0.3  # keep away from the relu kink
    fn = lambda: T.tsum(T.relu(x) * 2.0 + T.gelu(x))
    assert check_gradients(fn, [x], h=1e-6) < TOL


def test_indexing_and_shape_ops_gradcheck(rng):
    x = leaf(rng, 2, 3, 4)
    idx = np.array([2, 0, 3, 1])
    fn = lambda: T.tsum(T.square(T.concat([T.take_columns(x, idx), T.transpose(x, (0, 2, 1)).reshape(2, 3, 4)],
                                          axis=-1)[:, 1]))
    assert check_gradients(fn, [x], h=1e-6) < TOL


def test_embedding_lookup_accumulates_repeated_ids(rng):
    table = leaf(rng, 5, 3)
    ids = np.array([[1, 1, 4]])
    T.tsum(T.embedding_lookup(table, ids)).backward()
    assert np.allclose(table.grad[1], 2.0)
    assert np.allclose(table.grad[4], 1.0)
    assert np.allclose(table.grad[0], 0.0)


def test_softmax_rows_sum_to_one_and_are_shift_invariant(rng):
    x = rng.normal(size=(4, 7)) * 50
    p = T.softmax(Tensor(x)).data
    assert np.allclose(p.sum(axis=-1), 1.0)
    assert np.allclose(T.softmax(Tensor(x + 1000.0)).data, p)


def test_layernorm_output_statistics(rng):
    x = Tensor(rng.normal(3.0, 5.0, size=(10, 16)))
    out = T.layernorm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    assert np.allclose(out.mean(axis=-1), 0.0, atol=1e-6)
    assert np.allclose(out.var(axis=-1), 1.0, atol=1e-3)


def test_layernorm_rejects_single_feature():
    with pytest.raises(ShapeError):
        T.layernorm(Tensor(np.ones((2, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)))


def test_backward_requires_scalar_or_seed(rng):
    x = leaf(rng, 3)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()
    with pytest.raises(GradientContractError):
        Tensor(np.ones(2)).sum().backward()


def test_no_grad_builds_no_graph(rng):
    x = leaf(rng, 3)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_gradients_accumulate_over_reused_nodes(rng):
    x = leaf(rng, 3)
    y = x * 3.0
    (y + y).sum().backward()
    assert np.allclose(x.grad, 6.0)


def test_sgd_step_matches_manual_update(rng):
    x = leaf(rng, 4)
    start = x.data.copy()
    opt = Optimizer([x], lr=0.1, kind="sgd")
    T.tsum(T.square(x)).backward()
    opt.step()
    assert np.allclose(x.data, start - 0.1 * 2 * start)


def test_adam_first_step_moves_by_lr(rng):
    x = leaf(rng, 4)
    start = x.data.copy()
    opt = Optimizer([x], lr=0.01)
    T.tsum(T.square(x)).backward()
    opt.step()
    assert np.allclose(np.abs(x.data - start), 0.01, atol=1e-6)


def test_optimizer_refuses_missing_gradient(rng):
    x = leaf(rng, 2)
    opt = Optimizer([x], lr=0.1)
    x.grad = None
    with pytest.raises(GradientContractError):
        opt.step()
    with pytest.raises(GradientContractError):
        Optimizer([Tensor(np.ones(2))], lr=0.1)


def test_gradcheck_detects_a_wrong_backward(rng):
    x = leaf(rng, 3)

    def bad_square(a):
        return Tensor._from_op(a.data ** 2, (a,), lambda g: (g * a.data,))  # missing factor 2

    assert check_gradients(lambda: T.tsum(bad_square(x)), [x], h=1e-6) > 0.1
