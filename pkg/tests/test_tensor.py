import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cots import tensor as T
from cots.errors import DegenerateInputError, DimensionError, DomainError, GraphError
from cots.tensor import Graph, Tensor, grad_check

# --------------------------------------------------------------------- matmul


def test_matmul_identity_and_forced_values():
    out = T.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.data, [[5, 6], [7, 8]])
    assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_is_ones_times_b_transpose(rng):
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = rng.standard_normal((4, 5))
    with Graph() as g:
        loss = T.sum(T.matmul(a, Tensor(b)))
    g.backward(loss)
    np.testing.assert_allclose(a.grad, np.ones((3, 5)) @ b.T, rtol=0, atol=1e-12)
    assert grad_check(lambda x: T.sum(T.matmul(x, Tensor(b))), a.data) < 1e-6


def test_batched_matmul_fast_path_matches_generic(rng):
    a = rng.standard_normal((2, 3, 4))
    w = rng.standard_normal((4, 5))
    assert grad_check(lambda x: T.sum(T.mul(T.matmul(x, Tensor(w)), Tensor(np.arange(30.0).reshape(2, 3, 5)))), a) < 1e-6
    assert grad_check(lambda x: T.sum(T.tanh(T.matmul(Tensor(a), x))), w) < 1e-6


# --------------------------------------------------------------------- softmax


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]], atol=1e-15)
    big = T.softmax_rows(Tensor([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(big)) and big[0, 0] == pytest.approx(1.0) and big[0, 1] < 1e-300
    np.testing.assert_allclose(T.softmax_rows(Tensor([[np.log(1.0), np.log(3.0)]])).data, [[0.25, 0.75]], atol=1e-15)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=8))
def test_softmax_rows_sum_to_one(row):
    y = T.softmax_rows(Tensor([row])).data
    assert np.all(y >= 0)
    assert abs(y.sum() - 1.0) < 1e-12


# --------------------------------------------------------------------- l2 normalize


def test_l2_normalize_examples(rng):
    np.testing.assert_allclose(T.l2_normalize_rows(Tensor([[3.0, 4.0]])).data, [[0.6, 0.8]], atol=1e-15)
    u = np.array([[0.6, 0.8]])
    np.testing.assert_allclose(T.l2_normalize_rows(Tensor(u)).data, u, atol=1e-15)
    with pytest.raises(DegenerateInputError):
        T.l2_normalize_rows(Tensor([[0.0, 0.0], [1.0, 1.0]]))
    w = rng.standard_normal((3, 4))
    assert grad_check(lambda x: T.sum(T.mul(T.l2_normalize_rows(x), Tensor(w))), rng.standard_normal((3, 4))) < 1e-5


@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_l2_normalize_unit_and_idempotent(m, n, seed):
    x = np.random.default_rng(seed).uniform(-2, 2, (m, n))
    x[np.abs(x).sum(axis=1) < 1e-3, 0] = 1.0
    y = T.l2_normalize_rows(Tensor(x)).data
    np.testing.assert_allclose(np.linalg.norm(y, axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(T.l2_normalize_rows(Tensor(y)).data, y, atol=1e-9)


# --------------------------------------------------------------------- embedding


def test_embedding_gather_empty_and_scatter():
    table = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    np.testing.assert_array_equal(T.embedding_lookup(table, [1, 0, 1]).data, [[3, 4], [1, 2], [3, 4]])
    assert T.embedding_lookup(table, []).shape == (0, 2)
    with Graph() as g:
        loss = T.sum(T.embedding_lookup(table, [0, 0]))
    g.backward(loss)
    np.testing.assert_array_equal(table.grad, [[2.0, 2.0], [0.0, 0.0]])
    with pytest.raises(IndexError):
        T.embedding_lookup(table, [2])
    with pytest.raises(IndexError):
        T.embedding_lookup(table, [-1])


# --------------------------------------------------------------------- elementwise suite


def test_log_exp_inverse_and_domain():
    x = np.linspace(-10, 10, 201)
    np.testing.assert_allclose(T.log(T.exp(Tensor(x))).data, x, rtol=0, atol=1e-12)
    with pytest.raises(DomainError):
        T.log(Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        T.log(Tensor([-1.0]))


def test_mean_simple():
    assert T.mean(Tensor([1.0, 2.0, 3.0])).item() == 2.0


def test_layer_norm_moments(rng):
    x = rng.uniform(-2, 2, (5, 8))
    y = T.layer_norm(Tensor(x), eps=0.0).data
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-9)
    np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-9)


def _dims():
    return st.tuples(st.integers(1, 8), st.integers(1, 8))


UNARY = {
    "exp": (T.exp, (-2, 2)),
    "log": (T.log, (0.1, 2)),
    "gelu": (T.gelu, (-2, 2)),
    "tanh": (T.tanh, (-2, 2)),
    "scale": (lambda x: T.scale(x, -1.7), (-2, 2)),
    "softmax_rows": (T.softmax_rows, (-2, 2)),
    "log_softmax_rows": (T.log_softmax_rows, (-2, 2)),
    "l2_normalize_rows": (T.l2_normalize_rows, (0.1, 2)),
    "layer_norm": (lambda x: T.layer_norm(x), (-2, 2)),
    "mean_rows": (lambda x: T.mean(x, axis=1, keepdims=True), (-2, 2)),
    "logsumexp": (lambda x: T.logsumexp(x, axis=1), (-2, 2)),
    "transpose": (lambda x: T.transpose(x, (1, 0)), (-2, 2)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=25)
@given(shape=_dims(), seed=st.integers(0, 2**31 - 1))
def test_unary_ops_pass_gradient_check(name, shape, seed):
    op, (lo, hi) = UNARY[name]
    r = np.random.default_rng(seed)
    x = r.uniform(lo, hi, shape)
    if name == "layer_norm" and shape[1] > 1:
        x[:, 0] += 1.0  # keep the row variance away from zero
    probe = op(Tensor(x))
    w = Tensor(r.uniform(-2, 2, probe.shape))
    assert grad_check(lambda t: T.sum(T.mul(op(t), w)), x) < 1e-4


BINARY = {
    "add": T.add,
    "sub": T.sub,
    "mul": T.mul,
    "matmul_t": lambda a, b: T.matmul(a, T.transpose(b, (1, 0))),
    "concat": lambda a, b: T.concat([a, b], axis=0),
}


@pytest.mark.parametrize("name", sorted(BINARY))
@settings(max_examples=25)
@given(shape=_dims(), seed=st.integers(0, 2**31 - 1))
def test_binary_ops_pass_gradient_check(name, shape, seed):
    op = BINARY[name]
    r = np.random.default_rng(seed)
    a, b = r.uniform(-2, 2, shape), r.uniform(-2, 2, shape)
    w = Tensor(r.uniform(-2, 2, op(Tensor(a), Tensor(b)).shape))
    assert grad_check(lambda t: T.sum(T.mul(op(t, Tensor(b)), w)), a) < 1e-4
    assert grad_check(lambda t: T.sum(T.mul(op(Tensor(a), t), w)), b) < 1e-4


def test_row_vector_broadcast_gradient(rng):
    m = rng.standard_normal((4, 3))
    w = Tensor(rng.standard_normal((4, 3)))
    assert grad_check(lambda v: T.sum(T.mul(T.add(Tensor(m), v), w)), rng.standard_normal((1, 3))) < 1e-6
    assert grad_check(lambda v: T.sum(T.mul(T.mul(Tensor(m), v), w)), rng.standard_normal(3)) < 1e-6


# --------------------------------------------------------------------- grad_check itself


def test_grad_check_examples():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Graph() as g:
        y = T.sum(T.mul(x, x))
    g.backward(y)
    np.testing.assert_allclose(x.grad, [2.0, 4.0])
    assert grad_check(lambda t: T.sum(T.mul(t, t)), [1.0, 2.0], eps=1e-5) < 1e-8

    probe = Tensor([1.0, 2.0], requires_grad=True)
    with Graph() as g:
        y = T.add(T.scale(T.sum(probe), 0.0), 3.0)
    g.backward(y)
    np.testing.assert_array_equal(probe.grad, [0.0, 0.0])


# --------------------------------------------------------------------- graph semantics


def test_backward_twice_is_an_error():
    x = Tensor([1.0], requires_grad=True)
    with Graph() as g:
        y = T.sum(T.mul(x, x))
    g.backward(y)
    with pytest.raises(GraphError):
        g.backward(y)
    g.reset()
    with g:
        y = T.sum(x)
    g.backward(y)


def test_backward_visits_nodes_in_reverse_execution_order():
    seen = []
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Graph() as g:
        a = T.exp(x)
        b = T.tanh(a)
        c = T.sum(b)
    for node in g.nodes:
        original = node.backward

        def wrapped(grad, _op=node.op, _orig=original):
            seen.append(_op)
            return _orig(grad)

        node.backward = wrapped
    g.backward(c)
    assert seen == ["sum", "tanh", "exp"]
    assert [n.op for n in g.nodes] == ["exp", "tanh", "sum"]


def test_gradient_accumulation_is_additive(rng):
    """Backward of f(x) + h(y) equals the separate backwards; shared uses accumulate."""
    x0, y0 = rng.standard_normal(4), rng.standard_normal(3)

    def grads(which):
        x, y = Tensor(x0, requires_grad=True), Tensor(y0, requires_grad=True)
        with Graph() as g:
            fx = T.sum(T.exp(x))
            hy = T.sum(T.mul(y, y))
            loss = {"both": lambda: T.add(fx, hy), "f": lambda: fx, "h": lambda: hy}[which]()
        g.backward(loss)
        return x.grad, y.grad

    gx, gy = grads("both")
    np.testing.assert_array_equal(gx, grads("f")[0])
    np.testing.assert_array_equal(gy, grads("h")[1])
    assert grads("f")[1] is None

    x = Tensor(x0, requires_grad=True)
    with Graph() as g:
        loss = T.add(T.sum(x), T.sum(x))
    g.backward(loss)
    np.testing.assert_array_equal(x.grad, 2 * np.ones(4))


def test_no_grad_suspends_recording():
    x = Tensor([1.0], requires_grad=True)
    with Graph() as g:
        with T.no_grad():
            y = T.exp(x)
        z = T.exp(x)
    assert not y.requires_grad and z.requires_grad
    assert [n.op for n in g.nodes] == ["exp"]


def test_values_are_row_major_and_finite(rng):
    t = Tensor(np.arange(6.0).reshape(2, 3))
    assert t.values.tolist() == [0, 1, 2, 3, 4, 5]
    assert t.size == 6
    out = T.gelu(T.layer_norm(Tensor(rng.standard_normal((3, 5)))))
    assert np.all(np.isfinite(out.data))
