import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dynfuse import tensor as T
from dynfuse.losses import binary_cross_entropy, cross_entropy, mae, mse
from dynfuse.nn import Mlp, init_parameters
from dynfuse.tensor import DimensionError, Tape, Tensor
from oracles import REL_TOL, grad_check

SEEDS = range(10)


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def away_from_kink(rng, *shape):
    x = rng.normal(size=shape)
    return Tensor(np.where(np.abs(x) < 0.05, 0.5, x), requires_grad=True)


# Each builder(rng) returns (loss_fn, leaves); non-scalar outputs are read out with fixed random weights.
def _matmul(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
    return (lambda: T.sum(T.matmul(a, b))), [a, b]


def _affine(rng):
    x, w, b = leaf(rng, 5, 3), leaf(rng, 3, 4), leaf(rng, 4)
    w_out = rng.normal(size=(5, 4))
    return (lambda: T.sum(T.mul(T.affine(x, w, b), Tensor(w_out)))), [x, w, b]


def _binary(op):
    def build(rng):
        a, b = leaf(rng, 8), leaf(rng, 8)
        w = rng.normal(size=8)
        return (lambda: T.sum(T.mul(T.elementwise(op, a, b), Tensor(w)))), [a, b]
    return build


def _scalar_broadcast(rng):
    s, x = leaf(rng, 1), leaf(rng, 3, 2)
    w = rng.normal(size=(3, 2))
    return (lambda: T.sum(T.mul(T.mul(s, x), Tensor(w)))), [s, x]


def _activation(kind):
    def build(rng):
        x = away_from_kink(rng, 4, 5)
        w = rng.normal(size=(4, 5))
        return (lambda: T.sum(T.mul(T.activation(kind, x), Tensor(w)))), [x]
    return build


def _softmax(rng):
    x = leaf(rng, 5)
    w = rng.normal(size=5)
    return (lambda: T.sum(T.mul(T.softmax(x), Tensor(w)))), [x]


def _log_softmax(rng):
    x = leaf(rng, 3, 5)
    w = rng.normal(size=(3, 5))
    return (lambda: T.sum(T.mul(T.log_softmax(x, axis=1), Tensor(w)))), [x]


def _sum_axis(rng):
    x = leaf(rng, 3, 4)
    w = rng.normal(size=4)
    return (lambda: T.sum(T.mul(T.sum(x, axis=0), Tensor(w)))), [x]


def _mean(rng):
    x = leaf(rng, 3, 4)
    w = rng.normal(size=3)
    return (lambda: T.sum(T.mul(T.mean(x, axis=1), Tensor(w)))), [x]


def _concat(rng):
    a, b = leaf(rng, 2, 3), leaf(rng, 2, 5)
    w = rng.normal(size=(2, 8))
    return (lambda: T.sum(T.mul(T.concat([a, b], axis=1), Tensor(w)))), [a, b]


def _reshape_take_column(rng):
    x = leaf(rng, 4, 3)
    idx = np.array([2, 0, 2, 3])
    w = rng.normal(size=4)
    return (lambda: T.sum(T.mul(T.column(T.take_rows(T.reshape(T.reshape(x, (12,)), (4, 3)), idx), 1),
                                Tensor(w)))), [x]


def _scale_rows(rng):
    x, s = leaf(rng, 4, 3), leaf(rng, 4)
    w = rng.normal(size=(4, 3))
    return (lambda: T.sum(T.mul(T.scale_rows(x, s), Tensor(w)))), [x, s]


def _cross_entropy(rng):
    logits = leaf(rng, 6, 3)
    y = rng.integers(0, 3, size=6)
    return (lambda: cross_entropy(logits, y)), [logits]


def _bce(rng):
    logits = leaf(rng, 6, 1)
    y = rng.integers(0, 2, size=6)
    return (lambda: binary_cross_entropy(logits, y)), [logits]


def _mse(rng):
    p = leaf(rng, 6, 1)
    y = rng.normal(size=6)
    return (lambda: mse(p, y)), [p]


def _mae(rng):
    y = rng.normal(size=6)
    off = rng.normal(size=6)
    p = Tensor((y + np.where(np.abs(off) < 0.05, 0.5, off))[:, None], requires_grad=True)
    return (lambda: mae(p, y)), [p]


CASES = {
    "matmul": _matmul,
    "affine": _affine,
    "add": _binary("add"),
    "sub": _binary("sub"),
    "mul": _binary("mul"),
    "scalar_broadcast": _scalar_broadcast,
    "relu": _activation("relu"),
    "sigmoid": _activation("sigmoid"),
    "tanh": _activation("tanh"),
    "softmax": _softmax,
    "log_softmax": _log_softmax,
    "sum_axis": _sum_axis,
    "mean": _mean,
    "concat": _concat,
    "reshape_take_column": _reshape_take_column,
    "scale_rows": _scale_rows,
    "cross_entropy": _cross_entropy,
    "binary_cross_entropy": _bce,
    "mse": _mse,
    "mae": _mae,
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_op_gradient_matches_central_differences(name):
    for seed in SEEDS:
        loss, leaves = CASES[name](np.random.default_rng(seed))
        assert grad_check(loss, leaves) < REL_TOL, (name, seed)


@pytest.mark.parametrize("dims", [[5, 7, 3], [5, 7, 6, 3]], ids=["2-layer", "3-layer"])
def test_mlp_cross_entropy_pipeline_gradient(dims):
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        net = Mlp(dims, activation="tanh")
        init_parameters(net, seed)
        for p in net.parameters():
            p.data += rng.normal(scale=0.1, size=p.shape)
        x = Tensor(rng.normal(size=(8, 5)))
        y = rng.integers(0, 3, size=8)
        assert grad_check(lambda: cross_entropy(net(x), y), net.parameters()) < REL_TOL


def test_matmul_examples():
    np.testing.assert_array_equal(T.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]])).data,
                                  [[3, 4], [5, 6]])
    assert T.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_elementwise_examples_and_errors():
    assert T.add(Tensor([1, 2]), Tensor([0, 0])).data.tolist() == [1, 2]
    assert T.mul(Tensor([2, 3]), Tensor([4, 5])).data.tolist() == [8, 15]
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(DimensionError):
        T.mul(Tensor(np.ones((2, 1))), Tensor(np.ones((2, 3))))
    with pytest.raises(ValueError):
        T.elementwise("div", Tensor([1.0]), Tensor([1.0]))


def test_activation_examples():
    assert T.relu(Tensor([-1, 0, 2])).data.tolist() == [0, 0, 2]
    assert T.sigmoid(Tensor(0.0)).item() == 0.5
    x = Tensor([0.0], requires_grad=True)
    T.sum(T.relu(x)).backward()
    assert x.grad.tolist() == [0.0]


def test_sigmoid_is_stable_for_large_inputs():
    with np.errstate(over="raise", invalid="raise"):
        out = T.sigmoid(Tensor([-800.0, 800.0])).data
    assert out.tolist() == [0.0, 1.0]


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)
    out = T.softmax(Tensor([1000.0, 0.0])).data
    assert abs(out[0] - 1) < 1e-12 and abs(out[1]) < 1e-12


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)))
def test_softmax_is_a_distribution(x):
    p = T.softmax(Tensor(x)).data
    assert abs(p.sum() - 1) <= 1e-9
    assert np.all(p >= 0) and np.all(p <= 1)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-20, 20)))
def test_softmax_components_strictly_inside_unit_interval(x):
    p = T.softmax(Tensor(x)).data
    if x.size > 1:
        assert np.all(p > 0) and np.all(p < 1)


def test_reductions_examples():
    assert T.sum(Tensor([1, 2, 3])).item() == 6
    assert T.max_index([0.2, 0.5, 0.3]) == 1
    assert T.max_index([0.5, 0.5]) == 0
    assert T.reduce("max_index", Tensor([[1.0, 3.0, 3.0]]), axis=1).tolist() == [1]
    with pytest.raises(DimensionError):
        T.sum(Tensor(np.ones((2, 2))), axis=2)
    with pytest.raises(DimensionError):
        T.max_index(np.ones(3), axis=1)


def test_max_index_breaks_the_tape():
    idx = T.max_index(Tensor([[1.0, 2.0]], requires_grad=True))
    assert isinstance(idx, np.ndarray) and idx.dtype.kind == "i"


def test_concat_examples_and_errors():
    assert T.concat([Tensor([1.0]), Tensor([2.0])]).data.tolist() == [1, 2]
    assert T.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 5)))], axis=1).shape == (2, 8)
    with pytest.raises(DimensionError):
        T.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))], axis=1)


def test_backward_examples():
    x = Tensor(np.zeros(4), requires_grad=True)
    T.sum(x).backward()
    assert x.grad.tolist() == [1, 1, 1, 1]
    x = Tensor([1.0, 2.0], requires_grad=True)
    T.sum(T.mul(x, x)).backward()
    assert x.grad.tolist() == [2, 4]


def test_backward_rejects_non_scalar_loss():
    with pytest.raises(DimensionError):
        T.backward(Tensor([1.0, 2.0], requires_grad=True))


def test_repeated_backward_accumulates():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = T.sum(T.mul(x, x))
    loss.backward()
    loss.backward()
    assert x.grad.tolist() == [4, 8]


def test_two_consumers_sum_contributions():
    # y = x*a + x*b by two separate paths; dy/dx = a + b
    x = Tensor([3.0], requires_grad=True)
    a, b = Tensor([2.0]), Tensor([5.0])
    loss = T.sum(T.add(T.mul(x, a), T.mul(x, b)))
    loss.backward()
    assert x.grad.tolist() == [7.0]


def test_every_reachable_requires_grad_tensor_gets_grad():
    rng = np.random.default_rng(0)
    a, b = leaf(rng, 2, 3), leaf(rng, 3, 2)
    h = T.relu(T.matmul(a, b))
    loss = T.sum(h)
    loss.backward()
    for t in Tape.from_output(loss).nodes:
        assert t.grad is not None and t.grad.shape == t.data.shape


def test_tape_is_topologically_ordered():
    rng = np.random.default_rng(1)
    a = leaf(rng, 2, 2)
    h = T.add(T.mul(a, a), T.tanh(a))
    loss = T.sum(T.concat([h, a], axis=1))
    nodes = Tape.from_output(loss).nodes
    pos = {id(n): i for i, n in enumerate(nodes)}
    for n in nodes:
        for p in n._parents:
            assert pos[id(p)] < pos[id(n)]


def test_grad_shape_matches_data():
    x = Tensor(np.ones((3, 2)), requires_grad=True)
    T.sum(T.matmul(x, Tensor(np.ones((2, 4))))).backward()
    assert x.grad.shape == x.data.shape and x.grad.size == x.size


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(7)
        a, b = leaf(rng, 5, 6), leaf(rng, 6, 3)
        loss = T.sum(T.softmax(T.matmul(a, b), axis=1))
        loss.backward()
        return loss.data.tobytes() + a.grad.tobytes()
    assert run() == run()


def test_rowwise_matmul_is_batch_independent():
    rng = np.random.default_rng(3)
    x, w = rng.normal(size=(37, 64)), Tensor(rng.normal(size=(64, 33)))
    full = T.matmul(Tensor(x), w).data
    for idx in ([0], [5, 17], list(range(1, 37, 3))):
        np.testing.assert_array_equal(T.matmul(Tensor(x[idx]), w).data, full[idx])


def test_count_madds_context():
    with T.count_madds() as c:
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))))
        T.add(Tensor(np.ones(5)), Tensor(np.ones(5)))
        T.relu(Tensor(np.ones(5)))
        T.softmax(Tensor(np.ones(5)))
    assert c.total == 2 * 3 * 4 + 5
