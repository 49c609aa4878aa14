"""Multi-head attention and Transformer blocks on top of :mod:`saca.tensor`.

All layers take batched inputs of shape ``(B, tokens, d)`` together with a
boolean validity mask of shape ``(B, tokens)`` for the key/value side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError


def xavier(rng, fan_in, fan_out, dtype=np.float64):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def param(data, name):
    return T.Tensor(data, requires_grad=True, name=name)


@dataclass
class AttentionParams:
    W_Q: T.Tensor
    W_K: T.Tensor
    W_V: T.Tensor
    W_O: T.Tensor
    heads: int

    def __post_init__(self):
        d = self.W_Q.shape[0]
        if d % self.heads:
            raise ShapeError(f"d={d} not divisible by heads={self.heads}")

    @property
    def d(self):
        return self.W_Q.shape[0]

    @classmethod
    def init(cls, rng, d, heads, prefix="attn"):
        return cls(*(param(xavier(rng, d, d), f"{prefix}.{n}") for n in ("W_Q", "W_K", "W_V", "W_O")),
                   heads=heads)

    def tensors(self):
        return {"W_Q": self.W_Q, "W_K": self.W_K, "W_V": self.W_V, "W_O": self.W_O}


@dataclass
class LayerNormParams:
    gain: T.Tensor
    bias: T.Tensor

    @classmethod
    def init(cls, d, prefix="ln"):
        return cls(param(np.ones(d), f"{prefix}.gain"), param(np.zeros(d), f"{prefix}.bias"))

    def tensors(self):
        return {"gain": self.gain, "bias": self.bias}


@dataclass
class BlockParams:
    attention: AttentionParams
    W1: T.Tensor
    b1: T.Tensor
    W2: T.Tensor
    b2: T.Tensor
    ln1: LayerNormParams
    ln2: LayerNormParams

    @classmethod
    def init(cls, rng, d, heads, d_ffn, prefix="block"):
        if d_ffn < 1:
            raise ValueError("d_ffn must be >= 1")
        return cls(
            AttentionParams.init(rng, d, heads, f"{prefix}.attn"),
            param(xavier(rng, d, d_ffn), f"{prefix}.ffn.W1"),
            param(np.zeros(d_ffn), f"{prefix}.ffn.b1"),
            param(xavier(rng, d_ffn, d), f"{prefix}.ffn.W2"),
            param(np.zeros(d), f"{prefix}.ffn.b2"),
            LayerNormParams.init(d, f"{prefix}.ln1"),
            LayerNormParams.init(d, f"{prefix}.ln2"),
        )

    def tensors(self):
        out = {f"attn.{k}": v for k, v in self.attention.tensors().items()}
        out.update({"ffn.W1": self.W1, "ffn.b1": self.b1, "ffn.W2": self.W2, "ffn.b2": self.b2})
        out.update({f"ln1.{k}": v for k, v in self.ln1.tensors().items()})
        out.update({f"ln2.{k}": v for k, v in self.ln2.tensors().items()})
        return out


def key_mask(valid):
    """Additive mask (B, 1, 1, n) from a boolean validity array (B, n)."""
    valid = np.asarray(valid, bool)
    return np.where(valid, 0.0, -np.inf)[:, None, None, :]


def _split_heads(x, heads):
    B, t, d = x.shape
    return T.transpose(T.reshape(x, (B, t, heads, d // heads)), (0, 2, 1, 3))


def multi_head_attention(query_src, kv_src, params, kv_valid):
    """Scaled dot-product attention with head split and output projection.

    Returns the projected output ``(B, m, d)`` and the attention weights as a
    plain array ``(B, h, m, n)``.
    """
    if query_src.data.ndim != 3 or kv_src.data.ndim != 3:
        raise ShapeError("attention inputs must be (B, tokens, d)")
    B, m, d = query_src.shape
    n = kv_src.shape[1]
    if kv_src.shape[0] != B or kv_src.shape[2] != d or d != params.d:
        raise ShapeError(f"attention shapes {query_src.shape} / {kv_src.shape} with d={params.d}")
    if n < 1 or m < 1:
        raise ShapeError("attention needs at least one query and one key")
    if kv_valid is None:
        kv_valid = np.ones((B, n), bool)
    h = params.heads
    dk = d // h
    q = _split_heads(T.matmul(query_src, params.W_Q), h)
    k = _split_heads(T.matmul(kv_src, params.W_K), h)
    v = _split_heads(T.matmul(kv_src, params.W_V), h)
    logits = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dk))
    attn = T.softmax(logits, key_mask(kv_valid))
    ctx = T.matmul(attn, v)  # (B, h, m, dk)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, m, d))
    return T.matmul(ctx, params.W_O), attn.data


def cross_attention(E_s, E_n, params, node_valid=None):
    """Substructure tokens attend over node embeddings (queries from ``E_s``)."""
    return multi_head_attention(E_s, E_n, params, node_valid)


def self_attention(E, params, token_valid=None):
    return multi_head_attention(E, E, params, token_valid)


def feed_forward(x, p, dropout=0.0, rng=None, train=False):
    hidden = T.gelu(T.add(T.matmul(x, p.W1), p.b1))
    hidden = T.dropout(hidden, dropout, rng, train)
    return T.add(T.matmul(hidden, p.W2), p.b2)


def transformer_block(E, params, valid, kind="self", E_n=None, node_valid=None, E_s0=None,
                      dropout=0.0, rng=None, train=False, pre_ln=False):
    """One attention + feed-forward block.

    ``kind="self"`` attends within ``E``; ``kind="fuse"`` lets ``E`` query the
    node embeddings ``E_n`` and finally adds the original input tokens
    ``E_s0``.  Post-layernorm ordering unless ``pre_ln`` is set.
    Returns ``(E', attention_weights)``.
    """
    if kind == "fuse":
        if E_n is None or E_s0 is None:
            raise ValueError("fuse blocks need node embeddings and the input tokens")
    elif kind != "self":
        raise ValueError(f"unknown block kind {kind!r}")

    def attend(x):
        if kind == "fuse":
            return cross_attention(x, E_n, params.attention, node_valid)
        return self_attention(x, params.attention, valid)

    if pre_ln:
        a, weights = attend(T.layernorm(E, params.ln1.gain, params.ln1.bias))
        x1 = T.add(E, T.dropout(a, dropout, rng, train))
        f = feed_forward(T.layernorm(x1, params.ln2.gain, params.ln2.bias), params, dropout, rng, train)
        x2 = T.add(x1, T.dropout(f, dropout, rng, train))
    else:
        a, weights = attend(E)
        x1 = T.layernorm(T.add(E, T.dropout(a, dropout, rng, train)), params.ln1.gain, params.ln1.bias)
        f = feed_forward(x1, params, dropout, rng, train)
        x2 = T.layernorm(T.add(x1, T.dropout(f, dropout, rng, train)), params.ln2.gain, params.ln2.bias)
    if kind == "fuse":
        x2 = T.add(x2, E_s0)
    return x2, weights
