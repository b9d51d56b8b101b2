import math

import numpy as np
import numpy.testing as npt
import pytest

from vcrnet import tensor as T
from vcrnet.tensor import Tensor, Tape, ShapeError


@pytest.fixture(autouse=True)
def _float64_default():
    T.set_default_dtype(np.float64)
    yield
    T.set_default_dtype(np.float64)


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(11)
    for _ in range(100):
        n, k, m = rng.integers(1, 6, size=3)
        a = rng.standard_normal((n, k))
        b = rng.standard_normal((k, m))
        got = (Tensor(a) @ Tensor(b)).data
        want = np.zeros((n, m))
        for i in range(n):
            for j in range(m):
                for p in range(k):
                    want[i, j] += a[i, p] * b[p, j]
        npt.assert_allclose(got, want, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as err:
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((4, 5)))
    assert "(2, 3)" in str(err.value) and "(4, 5)" in str(err.value)


def test_softmax_two_to_one_odds():
    # softmax([ln 2, 0]) puts exactly twice the mass on the first entry
    y = T.softmax(Tensor([math.log(2.0), 0.0]), axis=0).data
    npt.assert_allclose(y, [2.0 / 3.0, 1.0 / 3.0], atol=1e-12)


def test_softmax_survives_large_inputs():
    y = T.softmax(Tensor([1000.0, 1000.0]), axis=0).data
    assert np.isfinite(y).all()
    npt.assert_allclose(y, [0.5, 0.5], atol=1e-12)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    for _ in range(25):
        x = rng.standard_normal((4, 7)) * rng.uniform(0.1, 50.0)
        y = T.softmax(Tensor(x), axis=-1).data
        npt.assert_allclose(y.sum(axis=-1), np.ones(4), atol=1e-12)
        assert (y >= 0).all()


def test_add_bias_broadcast_and_gradient():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    b = Tensor([10.0, 20.0, 30.0], requires_grad=True)
    with Tape() as tape:
        out = x + b
        loss = (out * out).sum()
    npt.assert_allclose(out.data, x.data + b.data)
    tape.backward(loss)
    npt.assert_allclose(x.grad, 2.0 * out.data)
    npt.assert_allclose(b.grad, (2.0 * out.data).sum(axis=0))


def test_add_rejects_mismatched_shapes():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros((3, 2)))
    with pytest.raises(ShapeError):
        # leading-axis broadcast is not supported, only trailing bias
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros(2))


def test_backward_through_matmul_sum():
    a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
    b = Tensor(np.array([[5.0], [6.0]]), requires_grad=True)
    with Tape() as tape:
        loss = (a @ b).sum()
    tape.backward(loss)
    npt.assert_allclose(a.grad, np.ones((2, 1)) @ b.data.T)
    npt.assert_allclose(b.grad, a.data.T @ np.ones((2, 1)))


def test_relu_gradient_is_input_mask():
    x = Tensor(np.array([-2.0, -0.5, 0.0, 0.5, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = T.relu(x).sum()
    tape.backward(loss)
    npt.assert_allclose(x.grad, [0.0, 0.0, 0.0, 1.0, 1.0])


def test_backward_twice_accumulates():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
    first = x.grad.copy()
    tape.backward(loss)
    npt.assert_allclose(x.grad, 2.0 * first)


def test_value_used_twice_gets_summed_gradient():
    x = Tensor(np.array([3.0]), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
        loss = (y + y).sum()
    tape.backward(loss)
    npt.assert_allclose(x.grad, [4.0])


def test_backward_rejects_non_scalar_loss():
    x = Tensor(np.zeros(3), requires_grad=True)
    with Tape() as tape:
        y = x * 1.0
    with pytest.raises(ValueError):
        tape.backward(y)


def test_constant_loss_leaves_grads_unset():
    x = Tensor(np.ones(4), requires_grad=True)
    with Tape() as tape:
        loss = Tensor(np.array(7.0))
    tape.backward(loss)
    assert x.grad is None


def test_ops_outside_tape_record_nothing():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = T.relu(x @ x)
    assert y.grad is None and x.grad is None
    with Tape() as tape:
        pass
    assert len(tape) == 0


def test_inner_tape_shadows_outer():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as outer:
        with Tape() as inner:
            (x * x).sum()
        assert len(outer) == 0
        assert len(inner) == 2


# -- finite-difference verification of every backward rule -----------------


def _check_many(make, count=30, tol=1e-7):
    worst = 0.0
    for seed in range(count):
        rng = np.random.default_rng(1000 + seed)
        f, x = make(rng)
        worst = max(worst, T.grad_check(f, x, seed=seed))
    assert worst < tol, f"worst relative error {worst:.3e}"


def test_grad_check_matmul():
    def make(rng):
        n, k, m = rng.integers(1, 5, size=3)
        b = Tensor(rng.standard_normal((k, m)))
        return (lambda t: t @ b), Tensor(rng.standard_normal((n, k)))

    _check_many(make, count=100)


def test_grad_check_softmax():
    def make(rng):
        shape = (int(rng.integers(1, 4)), int(rng.integers(2, 6)))
        return (lambda t: T.softmax(t, axis=-1)), Tensor(rng.standard_normal(shape))

    _check_many(make, count=100)


def test_grad_check_elementwise():
    def tanh_make(rng):
        return T.tanh, Tensor(rng.standard_normal((3, 4)))

    def sigmoid_make(rng):
        return T.sigmoid, Tensor(rng.standard_normal((3, 4)))

    def log_make(rng):
        # keep arguments well inside the positive domain
        return T.log, Tensor(rng.uniform(0.5, 3.0, size=(3, 4)))

    def mul_make(rng):
        other = Tensor(rng.standard_normal((3, 4)))
        return (lambda t: t * other), Tensor(rng.standard_normal((3, 4)))

    def sub_make(rng):
        other = Tensor(rng.standard_normal((3, 4)))
        return (lambda t: (t - other) * 2.0 + 1.5), Tensor(rng.standard_normal((3, 4)))

    for make in (tanh_make, sigmoid_make, log_make, mul_make, sub_make):
        _check_many(make, count=20)


def test_grad_check_relu_away_from_kink():
    def make(rng):
        x = rng.standard_normal((3, 4))
        x[np.abs(x) < 1e-3] = 0.5
        return T.relu, Tensor(x)

    _check_many(make, count=20)


def test_grad_check_structural_ops():
    def reshape_make(rng):
        return (lambda t: t.reshape(6, 2)), Tensor(rng.standard_normal((3, 4)))

    def transpose_make(rng):
        return (lambda t: t.T @ t), Tensor(rng.standard_normal((3, 4)))

    def slice_make(rng):
        return (lambda t: t.slice(1, 1, 3)), Tensor(rng.standard_normal((3, 4)))

    def concat_make(rng):
        other = Tensor(rng.standard_normal((2, 4)))
        return (lambda t: T.concat([t, other], axis=0)), Tensor(rng.standard_normal((3, 4)))

    def reduce_make(rng):
        return (lambda t: t.mean(axis=0) + t.sum(axis=1).reshape(1, 3).slice(1, 0, 3).reshape(3)), \
            Tensor(rng.standard_normal((3, 3)))

    def bias_make(rng):
        x = Tensor(rng.standard_normal((4, 3)))
        return (lambda t: x + t), Tensor(rng.standard_normal(3))

    for make in (reshape_make, transpose_make, slice_make, concat_make, reduce_make, bias_make):
        _check_many(make, count=20)


def test_grad_check_embedding():
    ids = [0, 2, 2, 1]

    def make(rng):
        return (lambda t: T.embedding_lookup(t, ids)), Tensor(rng.standard_normal((4, 5)))

    _check_many(make, count=20)


def test_grad_check_catches_broken_backward():
    """A deliberately wrong rule must trip the checker, not slip through."""

    def bad_double(t):
        return T.record_op(t.data * 2.0, [t], lambda g: (g * 3.0,))

    err = T.grad_check(bad_double, Tensor(np.array([1.0, -2.0, 0.5])))
    assert err > 1e-2


def test_concat_slice_round_trip():
    a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    b = Tensor(np.arange(6.0, 14.0).reshape(2, 4), requires_grad=True)
    with Tape() as tape:
        joined = T.concat([a, b], axis=1)
        back = joined.slice(1, 0, 3)
        loss = back.sum()
    npt.assert_allclose(back.data, a.data)
    tape.backward(loss)
    npt.assert_allclose(a.grad, np.ones((2, 3)))
    npt.assert_allclose(b.grad, np.zeros((2, 4)))


def test_slice_rejects_bad_bounds():
    x = Tensor(np.zeros((2, 5)))
    for start, stop in [(-1, 2), (3, 3), (0, 6), (4, 2)]:
        with pytest.raises(ShapeError):
            x.slice(1, start, stop)


def test_transpose_requires_rank_two():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 2, 2))).transpose()


def test_dropout_eval_is_identity():
    x = Tensor(np.ones((3, 3)))
    assert T.dropout(x, 0.5, training=False) is x
    assert T.dropout(x, 0.0, training=True) is x


def test_dropout_train_scales_survivors():
    rng = np.random.default_rng(9)
    x = Tensor(np.ones((200, 50)), requires_grad=True)
    with Tape() as tape:
        y = T.dropout(x, 0.25, training=True, rng=rng)
        loss = y.sum()
    kept = y.data != 0.0
    npt.assert_allclose(y.data[kept], 1.0 / 0.75)
    assert abs(kept.mean() - 0.75) < 0.02
    tape.backward(loss)
    npt.assert_allclose(x.grad, np.where(kept, 1.0 / 0.75, 0.0))


def test_embedding_lookup_gathers_and_scatters():
    table = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
    with Tape() as tape:
        rows = T.embedding_lookup(table, [2, 0, 2])
        loss = rows.sum()
    npt.assert_allclose(rows.data, table.data[[2, 0, 2]])
    tape.backward(loss)
    # row 2 was gathered twice, so its gradient doubles
    npt.assert_allclose(table.grad, np.array([[1.0] * 3, [0.0] * 3, [2.0] * 3, [0.0] * 3]))


def test_embedding_rejects_out_of_range_ids():
    table = Tensor(np.zeros((4, 3)))
    with pytest.raises(IndexError):
        T.embedding_lookup(table, [0, 4])
    with pytest.raises(IndexError):
        T.embedding_lookup(table, [-1])


def test_mean_and_sum_axes():
    x = np.arange(12.0).reshape(3, 4)
    npt.assert_allclose(Tensor(x).mean().data, x.mean())
    npt.assert_allclose(Tensor(x).sum(axis=0).data, x.sum(axis=0))
    npt.assert_allclose(Tensor(x).mean(axis=1).data, x.mean(axis=1))


def test_default_dtype_switch():
    T.set_default_dtype(np.float32)
    assert Tensor(np.zeros(2)).data.dtype == np.float32
    T.set_default_dtype(np.float64)
    assert Tensor(np.zeros(2)).data.dtype == np.float64
    with pytest.raises(ValueError):
        T.set_default_dtype(np.int32)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_finite_check_mode_flags_nan():
    T.set_finite_checks(True)
    try:
        with pytest.raises(FloatingPointError):
            T.log(Tensor([-1.0]))
    finally:
        T.set_finite_checks(False)
