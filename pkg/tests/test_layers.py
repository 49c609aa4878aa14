import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import saca.tensor as T
from saca.errors import ShapeError
from saca.layers import (AttentionParams, BlockParams, cross_attention, self_attention,
                         transformer_block)


def scalar_attention(Q_src, KV_src, Wq, Wk, Wv, Wo):
    """Single-head attention written with explicit loops over python floats."""
    def mm(A, B):
        return [[sum(A[i][k] * B[k][j] for k in range(len(B))) for j in range(len(B[0]))]
                for i in range(len(A))]

    q, k, v = mm(Q_src, Wq), mm(KV_src, Wk), mm(KV_src, Wv)
    dk = len(Wq[0])
    attn = []
    for qi in q:
        logits = [sum(a * b for a, b in zip(qi, kj)) / math.sqrt(dk) for kj in k]
        top = max(logits)
        ex = [math.exp(x - top) for x in logits]
        s = sum(ex)
        attn.append([e / s for e in ex])
    ctx = mm(attn, v)
    return mm(ctx, Wo), attn


def make_params(rng, d, h, scale=1.0):
    return AttentionParams(*(T.Tensor(rng.normal(scale=scale, size=(d, d)), requires_grad=True)
                             for _ in range(4)), heads=h)


def zero_block(rng, d, h, d_ffn=4):
    p = BlockParams.init(rng, d, h, d_ffn)
    for t in list(p.attention.tensors().values()) + [p.W1, p.b1, p.W2, p.b2]:
        t.data[...] = 0.0
    return p


def batch(x):
    return T.Tensor(np.asarray(x, float)[None])


def test_cross_attention_against_scalar_oracle():
    Es = [[0.5, -1.0], [2.0, 0.25]]
    En = [[1.0, 0.0], [-0.5, 1.5], [0.3, 0.7]]
    Wq = [[0.2, -0.4], [1.1, 0.3]]
    Wk = [[-0.7, 0.5], [0.9, 0.1]]
    Wv = [[1.0, 2.0], [-1.0, 0.5]]
    Wo = [[0.6, -0.2], [0.4, 1.3]]
    params = AttentionParams(*(T.Tensor(np.array(w)) for w in (Wq, Wk, Wv, Wo)), heads=1)
    out, attn = cross_attention(batch(Es), batch(En), params)
    want_out, want_attn = scalar_attention(Es, En, Wq, Wk, Wv, Wo)
    np.testing.assert_allclose(attn[0, 0], want_attn, atol=1e-14)
    np.testing.assert_allclose(out.data[0], want_out, atol=1e-14)


def test_self_attention_three_tokens_against_scalar_oracle():
    rng = np.random.default_rng(3)
    E = rng.normal(size=(3, 2)).tolist()
    Ws = [rng.normal(size=(2, 2)).tolist() for _ in range(4)]
    params = AttentionParams(*(T.Tensor(np.array(w)) for w in Ws), heads=1)
    out, attn = self_attention(batch(E), params)
    want_out, want_attn = scalar_attention(E, E, *Ws)
    np.testing.assert_allclose(attn[0, 0], want_attn, atol=1e-14)
    np.testing.assert_allclose(out.data[0], want_out, atol=1e-14)


def test_single_node_rows_are_one():
    rng = np.random.default_rng(0)
    p = make_params(rng, 4, 2)
    Es, En = rng.normal(size=(3, 4)), rng.normal(size=(1, 4))
    out, attn = cross_attention(batch(Es), batch(En), p)
    assert np.all(attn == 1.0)
    expected = En @ p.W_V.data @ p.W_O.data
    np.testing.assert_allclose(out.data[0], np.repeat(expected, 3, axis=0), atol=1e-12)


def test_zero_query_weights_give_uniform_attention():
    rng = np.random.default_rng(1)
    p = make_params(rng, 4, 2)
    p.W_Q.data[...] = 0
    Es, En = rng.normal(size=(2, 4)), rng.normal(size=(5, 4))
    valid = np.array([[True, True, False, True, True]])
    out, attn = cross_attention(batch(Es), batch(En), p, valid)
    np.testing.assert_allclose(attn[0, :, :, [0, 1, 3, 4]], 0.25, atol=1e-15)
    assert np.all(attn[0, :, :, 2] == 0)
    mean_v = En[valid[0]].mean(axis=0) @ p.W_V.data @ p.W_O.data
    np.testing.assert_allclose(out.data[0], np.tile(mean_v, (2, 1)), atol=1e-12)


def test_fully_masked_and_shape_errors():
    rng = np.random.default_rng(2)
    p = make_params(rng, 4, 2)
    with pytest.raises(ShapeError):
        cross_attention(batch(np.ones((2, 4))), batch(np.ones((3, 4))), p, np.zeros((1, 3), bool))
    with pytest.raises(ShapeError):
        cross_attention(batch(np.ones((2, 4))), batch(np.ones((3, 6))), p)
    with pytest.raises(ShapeError):
        make_params(rng, 6, 4)


def test_zero_sublayers_reduce_to_double_layernorm():
    rng = np.random.default_rng(4)
    d = 6
    p = zero_block(rng, d, 2)
    E = rng.normal(size=(1, 3, d))
    E_s0 = rng.normal(size=(1, 3, d))
    E_n = rng.normal(size=(1, 5, d))

    def ln(x):
        mu = x.mean(-1, keepdims=True)
        return (x - mu) / np.sqrt(x.var(-1, keepdims=True) + 1e-5)

    out, _ = transformer_block(T.Tensor(E), p, None, "self")
    np.testing.assert_allclose(out.data, ln(ln(E)), atol=1e-12)
    out, _ = transformer_block(T.Tensor(E), p, None, "fuse", E_n=T.Tensor(E_n), E_s0=T.Tensor(E_s0))
    np.testing.assert_allclose(out.data, ln(ln(E)) + E_s0, atol=1e-12)


def test_fuse_requires_inputs():
    p = BlockParams.init(np.random.default_rng(0), 4, 2, 4)
    with pytest.raises(ValueError):
        transformer_block(T.Tensor(np.ones((1, 2, 4))), p, None, "fuse")
    with pytest.raises(ValueError):
        BlockParams.init(np.random.default_rng(0), 4, 2, 0)


@given(st.integers(0, 10_000))
def test_node_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    d, n = 8, int(rng.integers(2, 9))
    p = make_params(rng, d, 4, scale=0.5)
    Es, En = rng.normal(size=(3, d)), rng.normal(size=(n, d))
    valid = rng.random((1, n)) < 0.8
    valid[0, 0] = True
    perm = rng.permutation(n)
    out, attn = cross_attention(batch(Es), batch(En), p, valid)
    out2, attn2 = cross_attention(batch(Es), batch(En[perm]), p, valid[:, perm])
    assert np.max(np.abs(out.data - out2.data)) <= 1e-10
    np.testing.assert_allclose(attn[..., perm], attn2, atol=1e-12)
    # rows over unmasked entries sum to one
    assert np.all(np.abs(attn.sum(-1) - 1) <= 1e-6)


def test_node_permutation_invariance_float32():
    rng = np.random.default_rng(9)
    d, n = 8, 7
    p = AttentionParams(*(T.Tensor(rng.normal(scale=0.5, size=(d, d)).astype(np.float32))
                          for _ in range(4)), heads=2)
    Es = T.Tensor(rng.normal(size=(1, 3, d)).astype(np.float32))
    En = rng.normal(size=(1, n, d)).astype(np.float32)
    perm = rng.permutation(n)
    out, _ = cross_attention(Es, T.Tensor(En), p)
    out2, _ = cross_attention(Es, T.Tensor(En[:, perm]), p)
    assert out.data.dtype == np.float32
    assert np.max(np.abs(out.data - out2.data)) <= 1e-6


@given(st.integers(0, 10_000))
def test_self_attention_equivariance(seed):
    rng = np.random.default_rng(seed)
    d, t = 8, int(rng.integers(1, 7))
    p = BlockParams.init(rng, d, 2, 16)
    E = rng.normal(size=(1, t, d))
    perm = rng.permutation(t)
    out, _ = transformer_block(T.Tensor(E), p, None, "self")
    out2, _ = transformer_block(T.Tensor(E[:, perm]), p, None, "self")
    np.testing.assert_allclose(out.data[:, perm], out2.data, atol=1e-10)


def test_doubling_nodes_doubles_attention_entries():
    rng = np.random.default_rng(5)
    p = make_params(rng, 4, 2)
    Es = batch(rng.normal(size=(3, 4)))
    sizes = [cross_attention(Es, batch(rng.normal(size=(n, 4))), p)[1].size for n in (5, 10, 20)]
    assert sizes == [2 * 3 * 5, 2 * 3 * 10, 2 * 3 * 20]


@pytest.mark.parametrize("pre_ln", [False, True])
def test_fuse_block_gradients(pre_ln):
    rng = np.random.default_rng(6)
    d = 4
    p = BlockParams.init(rng, d, 2, 6)
    for t in (p.b1, p.b2, p.ln1.gain, p.ln1.bias, p.ln2.gain, p.ln2.bias):
        t.data[...] += rng.normal(scale=0.3, size=t.shape)
    E = T.Tensor(rng.normal(size=(1, 3, d)), requires_grad=True)
    E_n = T.Tensor(rng.normal(size=(1, 4, d)), requires_grad=True)
    E_s0 = T.Tensor(rng.normal(size=(1, 3, d)), requires_grad=True)
    w = rng.normal(size=(1, 3, d))
    valid = np.array([[True, True, False, True]])

    def loss():
        out, _ = transformer_block(E, p, None, "fuse", E_n=E_n, node_valid=valid, E_s0=E_s0,
                                   pre_ln=pre_ln)
        return T.sum_(T.mul(out, w))

    params = [E, E_n, E_s0] + list(p.tensors().values())
    assert T.grad_check(loss, params) <= 1e-5
