import doctest

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import saca.tensor as T
from saca.errors import CheckpointError, NonFiniteError, ShapeError


def leaf(rng, *shape):
    return T.Tensor(rng.normal(size=shape), requires_grad=True)


def weighted_sum(out, rng):
    """Project an output onto fixed random weights so every entry matters."""
    w = rng.normal(size=out.shape)
    return T.sum_(T.mul(out, w))


def _rng(seed):
    return np.random.default_rng(seed)


# each case: builder(rng) -> (params, f) with f() the composite under test
def case_matmul(rng):
    n, k, m = rng.integers(1, 5, 3)
    a, b = leaf(rng, n, k), leaf(rng, k, m)
    return [a, b], lambda: T.matmul(a, b)


def case_batched_matmul(rng):
    B, n, k, m = rng.integers(1, 4, 4)
    a, b = leaf(rng, B, 2, n, k), leaf(rng, B, 2, k, m)
    return [a, b], lambda: T.matmul(a, b)


def case_shared_matmul(rng):
    B, n, k, m = rng.integers(1, 4, 4)
    a, b = leaf(rng, B, n, k), leaf(rng, k, m)
    return [a, b], lambda: T.matmul(a, b)


def case_add_mul_broadcast(rng):
    n, m = rng.integers(1, 5, 2)
    a, b, c = leaf(rng, n, m), leaf(rng, m), leaf(rng, n, 1)
    return [a, b, c], lambda: T.mul(T.add(a, b), T.sub(c, a))


def case_scale_transpose_reshape(rng):
    n, m, k = rng.integers(1, 4, 3)
    a = leaf(rng, n, m, k)
    return [a], lambda: T.reshape(T.transpose(T.scale(a, 1.7), (2, 0, 1)), (k, n * m))


def case_concat_slice(rng):
    n, m, k = rng.integers(1, 4, 3)
    a, b = leaf(rng, 2, n, k), leaf(rng, 2, m, k)
    return [a, b], lambda: T.slice_rows(T.concat([a, b], axis=1), 0, 1)


def case_gather_scatter(rng):
    n, d = rng.integers(2, 6, 2)
    a = leaf(rng, n, d)
    idx = rng.integers(0, n, size=(3, 2))
    flat = rng.integers(0, n, size=7)
    return [a], lambda: T.add(T.sum_(T.gather_rows(a, idx), axis=1),
                              T.slice_rows(T.scatter_add_rows(T.gather_rows(a, flat), flat[::-1].copy(), n), 0, 3)
                              if n >= 3 else T.sum_(T.gather_rows(a, idx), axis=1))


def case_sum_mean(rng):
    n, m = rng.integers(1, 5, 2)
    a = leaf(rng, n, m)
    return [a], lambda: T.add(T.sum_(a, axis=0, keepdims=True), T.mean(a, axis=1, keepdims=True))


def case_activations(rng):
    n, m = rng.integers(1, 5, 2)
    a = T.Tensor(rng.normal(size=(n, m)) + np.where(rng.random((n, m)) < 0.5, 0.3, -0.3),
                 requires_grad=True)
    return [a], lambda: T.add(T.add(T.relu(a), T.gelu(a)), T.leaky_relu(a, 0.1))


def case_softmax(rng):
    n, m = rng.integers(1, 5, 2)
    a = leaf(rng, n, m + 1)
    mask = np.where(rng.random((n, m + 1)) < 0.3, -np.inf, 0.0)
    mask[:, 0] = 0.0
    return [a], lambda: T.softmax(a, mask)


def case_layernorm(rng):
    # width 2 is degenerate: the output is ~(+-1) whatever the input, so the true
    # input gradient is O(eps) and the relative check only measures noise
    n, m = rng.integers(1, 4), int(rng.integers(3, 6))
    a, g, b = leaf(rng, n, m), leaf(rng, m), leaf(rng, m)
    return [a, g, b], lambda: T.layernorm(a, g, b)


def case_embedding(rng):
    rows, d = rng.integers(2, 5, 2)
    tabs = [leaf(rng, rows, d), leaf(rng, rows + 1, d)]
    idx = np.stack([rng.integers(0, rows, 6), rng.integers(0, rows + 1, 6)], axis=1)
    return tabs, lambda: T.embedding(tabs, idx)


def case_dropout(rng):
    n, m = rng.integers(1, 5, 2)
    a = leaf(rng, n, m)
    seed = int(rng.integers(1 << 30))
    return [a], lambda: T.dropout(a, 0.3, np.random.default_rng(seed), train=True)


def case_mse(rng):
    n, m = rng.integers(1, 5, 2)
    a = leaf(rng, n, m)
    target = rng.normal(size=(n, m))
    mask = rng.random((n, m)) < 0.7
    return [a], lambda: T.mse_loss(a, target, mask)


def case_bce(rng):
    n, m = rng.integers(1, 5, 2)
    a = leaf(rng, n, m)
    labels = (rng.random((n, m)) < 0.5).astype(float)
    labels[rng.random((n, m)) < 0.3] = np.nan
    return [a], lambda: T.bce_with_logits_loss(a, labels)


CASES = [case_matmul, case_batched_matmul, case_shared_matmul, case_add_mul_broadcast,
         case_scale_transpose_reshape, case_concat_slice, case_gather_scatter, case_sum_mean,
         case_activations, case_softmax, case_layernorm, case_embedding, case_dropout, case_mse,
         case_bce]


@pytest.mark.parametrize("case", CASES, ids=lambda c: c.__name__[5:])
@settings(max_examples=100)
@given(seed=st.integers(0, 2**31 - 1))
def test_primitive_gradients(case, seed):
    rng = _rng(seed)
    params, f = case(rng)
    wrng_seed = int(rng.integers(1 << 30))

    def loss():
        out = f()
        if out.data.size == 1:
            return out
        return weighted_sum(out, _rng(wrng_seed))

    assert T.grad_check(loss, params, eps=1e-6) <= 1e-6


def test_sum_of_squares():
    x = leaf(_rng(0), 3, 3)
    assert T.grad_check(lambda: T.sum_(T.mul(x, x)), [x]) <= 1e-7


def test_broken_backward_is_caught():
    a, b = leaf(_rng(1), 3, 4), leaf(_rng(2), 4, 2)

    def bad_matmul(x, y):
        # forward is right, backward forgets to transpose
        return T._make(x.data @ y.data, "bad", (x, y),
                       lambda g: (g @ y.data.T, (g.T @ x.data).T[::-1].copy()))

    assert T.grad_check(lambda: T.sum_(T.mul(bad_matmul(a, b), np.arange(6.0).reshape(3, 2))),
                        [a, b]) > 1e-2


def test_softmax_examples():
    y = T.softmax(T.Tensor(np.zeros(3))).data
    np.testing.assert_allclose(y, [1 / 3] * 3, atol=1e-15)
    y = T.softmax(T.Tensor(np.array([5.0, 100.0, 5.0])), np.array([0.0, -np.inf, 0.0])).data
    np.testing.assert_allclose(y, [0.5, 0.0, 0.5], atol=1e-15)
    with pytest.raises(ShapeError):
        T.softmax(T.Tensor(np.zeros((1, 2))), np.full((1, 2), -np.inf))
    with pytest.raises(ValueError):
        T.softmax(T.Tensor(np.zeros(2)), np.array([0.0, 1.0]))


@given(st.integers(0, 10_000))
def test_softmax_rows_sum_to_one(seed):
    rng = _rng(seed)
    x = rng.normal(scale=5, size=(4, 7))
    mask = np.where(rng.random((4, 7)) < 0.5, -np.inf, 0.0)
    mask[:, 3] = 0.0
    y = T.softmax(T.Tensor(x), mask).data
    assert np.all(np.abs(y.sum(axis=-1) - 1) <= 1e-12)
    assert np.all(y[np.isneginf(mask)] == 0)


@given(st.integers(0, 10_000))
def test_layernorm_normalizes(seed):
    rng = _rng(seed)
    d = int(rng.integers(2, 16))
    x = rng.normal(loc=3, scale=4, size=(5, d))
    y = T.layernorm(T.Tensor(x), T.Tensor(np.ones(d)), T.Tensor(np.zeros(d)), eps=0.0).data
    assert np.all(np.abs(y.mean(axis=-1)) <= 1e-10)
    assert np.all(np.abs(y.var(axis=-1) - 1) <= 1e-8)


def test_mse_gradient_example():
    x = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with T.Tape() as tape:
        loss = T.mse_loss(x, np.zeros(2))
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, [1.0, 2.0])


def test_masked_bce_gradient_is_exactly_zero():
    z = T.Tensor(np.array([[0.3, -1.2], [2.0, 0.1]]), requires_grad=True)
    labels = np.array([[1.0, np.nan], [0.0, np.nan]])
    with T.Tape() as tape:
        loss = T.bce_with_logits_loss(z, labels)
    tape.backward(loss)
    assert np.all(z.grad[:, 1] == 0.0)
    assert np.all(z.grad[:, 0] != 0.0)


def test_no_tape_means_no_recording():
    a = leaf(_rng(0), 2, 2)
    out = T.matmul(a, a)
    assert not out.requires_grad
    with T.Tape() as tape:
        with T.no_grad():
            T.matmul(a, a)
        assert tape.records == []


def test_non_finite_detection():
    with pytest.raises(NonFiniteError):
        T.mul(T.Tensor(np.array([np.inf])), 1.0)
    with pytest.raises(NonFiniteError):
        with np.errstate(over="ignore"):
            T.scale(T.Tensor(np.array([1e308])), 1e10)


def test_shape_errors():
    with pytest.raises(ShapeError):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        T.mse_loss(T.Tensor(np.ones(2)), np.ones(3))
    with pytest.raises(ShapeError):
        T.embedding([T.Tensor(np.ones((2, 2)))], np.zeros((3, 2), int))


def test_gradients_accumulate_across_backward_calls():
    a = T.Tensor(np.ones(3), requires_grad=True)
    for _ in range(2):
        with T.Tape() as tape:
            loss = T.sum_(T.scale(a, 2.0))
        tape.backward(loss)
    np.testing.assert_allclose(a.grad, [4.0] * 3)


def test_backward_without_accumulation_returns_grads():
    a = T.Tensor(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum_(T.mul(a, a))
    grads = tape.backward(loss, accumulate=False)
    assert a.grad is None
    np.testing.assert_allclose(grads[id(a)], [2.0] * 3)


def test_dropout_is_inverted_and_eval_identity():
    a = T.Tensor(np.ones((200, 50)))
    assert T.dropout(a, 0.5, None, train=False) is a
    y = T.dropout(a, 0.25, _rng(0), train=True).data
    assert set(np.unique(y)) <= {0.0, 1 / 0.75}
    assert abs(y.mean() - 1.0) < 0.03


def test_grad_check_preconditions():
    x = leaf(_rng(0), 2)
    with pytest.raises(ValueError):
        T.grad_check(lambda: T.sum_(x), [x], eps=1e-3)
    x32 = T.Tensor(np.ones(2, np.float32), requires_grad=True)
    with pytest.raises(TypeError):
        T.grad_check(lambda: T.sum_(x32), [x32])


def test_forward_determinism():
    def run():
        rng = _rng(42)
        a, b = leaf(rng, 5, 6), leaf(rng, 6, 3)
        return T.softmax(T.matmul(a, b)).data
    assert np.array_equal(run(), run())


def test_checkpoint_round_trip(tmp_path):
    arrays = {"w": np.arange(6.0).reshape(2, 3), "b": np.ones(4, np.float32), "i": np.arange(3)}
    T.save_tensors(tmp_path / "ck", arrays, meta={"note": 1})
    back, meta = T.load_tensors(tmp_path / "ck")
    assert meta == {"note": 1}
    for k, v in arrays.items():
        assert back[k].dtype == v.dtype and np.array_equal(back[k], v)
    blob = tmp_path / "ck.bin"
    blob.write_bytes(blob.read_bytes()[:-1])
    with pytest.raises(CheckpointError):
        T.load_tensors(tmp_path / "ck")


def test_module_doctest():
    result = doctest.testmod(T)
    assert result.attempted > 0 and result.failed == 0
