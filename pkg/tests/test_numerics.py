import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stagnn import numerics as nx
from stagnn.numerics import DimensionError, Tensor

from oracles import central_diff, rel_error, softmax, topk_renorm

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def grad_error(build, inputs, seed=0):
    """Max relative error between tape and finite-difference gradients of a random projection."""
    rng = np.random.default_rng(seed)
    out = build(*inputs)
    w = Tensor(rng.normal(size=out.shape))

    def scalar():
        return nx.sum_all(nx.mul(build(*inputs), w))

    nx.backward(scalar())
    worst = 0.0
    for t in inputs:
        num = central_diff(lambda: scalar().item(), t.data)
        worst = max(worst, rel_error(t.grad.reshape(-1).tolist(), num))
    return worst


# ---------------------------------------------------------------------------
# forward examples
# ---------------------------------------------------------------------------

def test_matmul_identity():
    out = nx.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
    assert out.data.tolist() == [[3, 4], [5, 6]]


def test_matmul_row_column():
    assert nx.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11]]


def test_matmul_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_batch_broadcast():
    a = np.arange(24.0).reshape(2, 3, 4)
    b = np.arange(8.0).reshape(4, 2)
    np.testing.assert_array_equal(nx.matmul(Tensor(a), Tensor(b)).data, a @ b)


def test_softmax_uniform():
    np.testing.assert_allclose(nx.softmax_lastaxis(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3,
                               atol=1e-15)


def test_softmax_log3():
    np.testing.assert_allclose(nx.softmax_lastaxis(Tensor([0.0, math.log(3)])).data,
                               [0.25, 0.75], atol=1e-15)


def test_softmax_masked_entry_is_exact_zero():
    out = nx.softmax_lastaxis(Tensor([5.0, 2.0, 9.0]), mask=np.array([True, True, False])).data
    e = math.exp(-3)
    np.testing.assert_allclose(out[:2], [1 / (1 + e), e / (1 + e)], atol=1e-15)
    assert out[2] == 0.0


def test_softmax_fully_masked_slice_raises():
    with pytest.raises(ValueError):
        nx.softmax_lastaxis(Tensor([[1.0, 2.0], [3.0, 4.0]]),
                            mask=np.array([[True, False], [False, False]]))


def test_layer_norm_constant_slice_is_zero():
    out = nx.layer_norm(Tensor([4.0, 4.0, 4.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    assert out.data.tolist() == [0.0, 0.0, 0.0]


def test_layer_norm_two_values():
    out = nx.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    np.testing.assert_allclose(out, [-1.0, 1.0], atol=1e-4)
    # the stabilizer pulls the result slightly inside: 1/sqrt(1 + 1e-5)
    np.testing.assert_allclose(out[1], 1 / math.sqrt(1 + 1e-5), rtol=1e-12)


def test_layer_norm_gain_shape_checked():
    with pytest.raises(DimensionError):
        nx.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(3)))


def test_relu_sigmoid_mean():
    assert nx.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    assert nx.sigmoid(Tensor(0.0)).item() == 0.5
    assert nx.mean_axis(Tensor(np.ones((2, 6, 3))), axis=1).data.tolist() == [[1.0] * 3] * 2


def test_sigmoid_is_stable_at_extremes():
    out = nx.sigmoid(Tensor([-800.0, 800.0])).data
    assert out[0] == 0.0 and out[1] == 1.0


def test_add_rejects_non_suffix_broadcast():
    with pytest.raises(DimensionError):
        nx.add(Tensor(np.ones((3, 4))), Tensor(np.ones(3)))
    with pytest.raises(DimensionError):
        nx.mul(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 1))))


def test_concat_and_transpose():
    a, b = Tensor(np.zeros((2, 1))), Tensor(np.ones((2, 2)))
    assert nx.concat_lastaxis([a, b]).data.tolist() == [[0, 1, 1], [0, 1, 1]]
    x = np.arange(6.0).reshape(1, 2, 3)
    np.testing.assert_array_equal(nx.transpose_last_two(Tensor(x)).data, x.swapaxes(-1, -2))


def test_topk_renormalize_matches_sort_truncate():
    row = [0.1, 0.4, 0.2, 0.3]
    np.testing.assert_allclose(nx.topk_renormalize(Tensor(row), 2).data, topk_renorm(row, 2),
                               atol=1e-15)


def test_topk_ties_keep_lower_index():
    out = nx.topk_renormalize(Tensor([0.25, 0.25, 0.25, 0.25]), 2).data
    assert out.tolist() == [0.5, 0.5, 0.0, 0.0]


def test_topk_rejects_zero():
    with pytest.raises(ValueError):
        nx.topk_renormalize(Tensor([1.0, 2.0]), 0)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def test_backward_square_sum():
    x = leaf([1.0, 2.0])
    nx.backward(nx.sum_all(nx.square(x)))
    assert x.grad.tolist() == [2.0, 4.0]


def test_backward_rejects_non_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(ValueError):
        nx.backward(nx.square(x))


def test_detached_leaf_has_no_grad():
    x = leaf([1.0, 2.0])
    c = Tensor([3.0, 4.0])
    nx.backward(nx.sum_all(nx.mul(x, c)))
    assert c.grad is None
    assert x.grad.tolist() == [3.0, 4.0]
    assert x.detach().requires_grad is False


def test_tape_is_topologically_ordered():
    x = leaf([1.0, 2.0])
    y = nx.exp(x)
    z = nx.sum_all(nx.mul(y, y))
    tape = nx.backward(z)
    ids = [t._id for t in tape.nodes]
    assert ids == sorted(ids)
    assert tape.leaves() == [x]


def test_shared_subexpression_gradients_accumulate():
    x = leaf([0.3, -0.7])
    y = nx.sigmoid(x)
    loss = nx.sum_all(nx.add(nx.mul(y, y), y))
    nx.backward(loss)
    s = 1 / (1 + np.exp(-x.data))
    np.testing.assert_allclose(x.grad, (2 * s + 1) * s * (1 - s), rtol=1e-14)


def test_two_backward_passes_bitwise_identical():
    rng = np.random.default_rng(1)
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))

    def run():
        nx.backward(nx.sum_all(nx.softmax_lastaxis(nx.matmul(a, b))))
        return a.grad.copy(), b.grad.copy()

    g1, g2 = run(), run()
    assert all(np.array_equal(x, y) for x, y in zip(g1, g2))


# ---------------------------------------------------------------------------
# gradient checks, one per differentiable op, at several random points
# ---------------------------------------------------------------------------

def _cases(rng):
    pos = lambda *s: leaf(rng.uniform(0.5, 2.0, size=s))
    nrm = lambda *s: leaf(rng.normal(size=s))
    away = lambda *s: leaf(rng.choice([-1, 1], size=s) * rng.uniform(0.2, 2.0, size=s))
    mask = np.array([[True, True, False, True]] * 3)
    distinct = leaf(rng.permutation(12).reshape(3, 4) / 12.0 + 0.05 + rng.uniform(0, 0.01, (3, 4)))
    return {
        "add": (nx.add, [nrm(3, 4), nrm(3, 4)]),
        "add_suffix": (nx.add, [nrm(2, 3, 4), nrm(4)]),
        "sub": (nx.sub, [nrm(3, 4), nrm(4)]),
        "mul": (nx.mul, [nrm(3, 4), nrm(3, 4)]),
        "div": (nx.div, [nrm(3, 4), pos(3, 4)]),
        "scale": (lambda a: nx.scale(a, -1.7), [nrm(5)]),
        "relu": (nx.relu, [away(3, 4)]),
        "sigmoid": (nx.sigmoid, [nrm(3, 4)]),
        "exp": (nx.exp, [nrm(3, 4)]),
        "log": (nx.log, [pos(3, 4)]),
        "clip": (lambda a: nx.clip(a, -10.0, 10.0), [nrm(6)]),
        "square": (nx.square, [nrm(3, 4)]),
        "sum_all": (nx.sum_all, [nrm(3, 4)]),
        "mean_axis": (lambda a: nx.mean_axis(a, 1), [nrm(2, 5, 3)]),
        "reshape": (lambda a: nx.reshape(a, (4, 3)), [nrm(3, 4)]),
        "broadcast_to": (lambda a: nx.broadcast_to(a, (2, 3, 4)), [nrm(3, 1)]),
        "permute": (lambda a: nx.permute(a, (2, 0, 1)), [nrm(2, 3, 4)]),
        "transpose_last_two": (nx.transpose_last_two, [nrm(2, 3, 4)]),
        "concat_lastaxis": (lambda a, b: nx.concat_lastaxis([a, b]), [nrm(2, 3), nrm(2, 2)]),
        "matmul": (nx.matmul, [nrm(5, 7), nrm(7, 3)]),
        "matmul_batched": (nx.matmul, [nrm(2, 3, 4, 5), nrm(5, 2)]),
        "softmax": (nx.softmax_lastaxis, [nrm(3, 4)]),
        "softmax_masked": (lambda a: nx.softmax_lastaxis(a, mask), [nrm(3, 4)]),
        "layer_norm": (nx.layer_norm, [nrm(2, 3, 5), nrm(5), nrm(5)]),
        "l2_normalize": (nx.l2_normalize_lastaxis, [nrm(3, 4)]),
        "topk_renormalize": (lambda a: nx.topk_renormalize(a, 2), [distinct]),
    }


OPS = sorted(_cases(np.random.default_rng(0)))


@pytest.mark.parametrize("op", OPS)
@pytest.mark.parametrize("point", range(10))
def test_gradients_match_finite_differences(op, point):
    rng = np.random.default_rng(1000 * point + OPS.index(op))
    fn, inputs = _cases(rng)[op]
    assert grad_error(fn, inputs, seed=point) < 1e-4


def test_matmul_gradient_tight():
    rng = np.random.default_rng(5)
    assert grad_error(nx.matmul, [leaf(rng.normal(size=(5, 7))), leaf(rng.normal(size=(7, 3)))]) < 1e-6


def test_layer_norm_gradient_tight():
    rng = np.random.default_rng(6)
    ins = [leaf(rng.normal(size=(4, 6))), leaf(rng.normal(size=6)), leaf(rng.normal(size=6))]
    assert grad_error(nx.layer_norm, ins) < 1e-5


# ---------------------------------------------------------------------------
# properties
# ---------------------------------------------------------------------------

rows = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 8)), elements=finite)


@given(rows)
def test_softmax_rows_are_probabilities(x):
    out = nx.softmax_lastaxis(Tensor(x)).data
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)
    for r_in, r_out in zip(x, out):
        np.testing.assert_allclose(r_out, softmax(list(r_in)), atol=1e-12)


@given(rows, st.randoms(use_true_random=False))
def test_softmax_permutation_equivariant(x, rnd):
    perm = list(range(x.shape[-1]))
    rnd.shuffle(perm)
    a = nx.softmax_lastaxis(Tensor(x[:, perm])).data
    b = nx.softmax_lastaxis(Tensor(x)).data[:, perm]
    np.testing.assert_allclose(a, b, atol=1e-15)


@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(2, 6)), elements=finite),
       st.floats(-100, 100))
def test_layer_norm_shift_invariant(x, c):
    d = x.shape[-1]
    g, b = Tensor(np.ones(d)), Tensor(np.zeros(d))
    np.testing.assert_allclose(nx.layer_norm(Tensor(x + c), g, b).data,
                               nx.layer_norm(Tensor(x), g, b).data, atol=1e-9)


@settings(max_examples=50)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(2, 8)),
              elements=st.floats(0.001, 1.0)), st.integers(1, 8))
def test_topk_support_and_sum(x, k):
    out = nx.topk_renormalize(Tensor(x), k).data
    assert ((out > 0).sum(axis=-1) <= k).all()
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
    for r_in, r_out in zip(x, out):
        np.testing.assert_allclose(r_out, topk_renorm(list(r_in), k), atol=1e-12)
