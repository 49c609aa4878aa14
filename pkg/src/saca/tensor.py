"""Dense tensors with tape-based reverse-mode differentiation.

Operations run eagerly on numpy arrays.  When a :class:`Tape` is active in
the current thread and some input requires gradients, the op appends a
record holding its backward closure; :meth:`Tape.backward` then walks the
records in reverse.  Outside a tape nothing is recorded, which is the
inference path.

    >>> w = Tensor(np.ones((2, 2)), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_(matmul(w, w))
    >>> tape.backward(loss)
    >>> w.grad.tolist()
    [[4.0, 4.0], [4.0, 4.0]]
"""

from __future__ import annotations

import json
import math
import threading
from pathlib import Path

import numpy as np

from .errors import CheckpointError, NonFiniteError, ShapeError

_local = threading.local()

GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim > 4:
            raise ShapeError(f"rank {arr.ndim} exceeds 4")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Single-owner record of differentiable operations.

    Use as a context manager; it becomes the active tape for the current
    thread only, so independent tapes may run in parallel threads.
    """

    def __init__(self):
        self.records = []
        self._prev = None

    def __enter__(self):
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev
        return False

    def record(self, out, inputs, backward):
        self.records.append((out, inputs, backward))

    def backward(self, loss, seed=None, accumulate=True):
        """Propagate from ``loss``; leaf tensors receive accumulated ``.grad``.

        With ``accumulate=False`` nothing is written and ``{id(leaf): grad}``
        is returned instead, which lets threads share parameters safely.
        """
        if loss.data.size != 1 and seed is None:
            raise ShapeError("backward needs a scalar loss or an explicit seed gradient")
        grads = {id(loss): np.ones_like(loss.data) if seed is None else np.asarray(seed, loss.dtype)}
        produced = {id(out) for out, _, _ in self.records}
        leaves = {}
        for out, inputs, backward in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
                if key not in produced:
                    leaves[key] = inp
        if not accumulate:
            return {key: grads[key] for key in leaves}
        for key, t in leaves.items():
            g = grads[key]
            t.grad = g.copy() if t.grad is None else t.grad + g
        return None


def active_tape():
    return getattr(_local, "tape", None)


def no_grad():
    """Context manager that suspends recording in the current thread."""
    return _NoGrad()


class _NoGrad:
    def __enter__(self):
        self._prev = getattr(_local, "tape", None)
        _local.tape = None

    def __exit__(self, *exc):
        _local.tape = self._prev
        return False


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b):
    """Promote a raw operand to the dtype of its tensor partner."""
    if not isinstance(a, Tensor):
        a = _as_tensor(a, like=_as_tensor(b))
    return a, _as_tensor(b, like=a)


def _finite(data, op):
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by {op}")
    return data


def _make(data, op, inputs, backward):
    _finite(data, op)
    tape = active_tape()
    needs = tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# Elementwise and linear algebra


def add(a, b):
    a, b = _pair(a, b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from exc
    return _make(out, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _pair(a, b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}") from exc
    return _make(out, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _pair(a, b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from exc
    return _make(out, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a, c):
    c = float(c)
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def matmul(a, b):
    """Matrix product over the last two axes; ``b`` may be a shared rank-2 matrix."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul needs rank >= 2 operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    if b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, "matmul", (a, b), backward)


def transpose(a, axes=None):
    """Swap the last two axes, or permute by ``axes``."""
    if axes is None:
        axes = list(range(a.data.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), "transpose", (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape):
    if len(shape) > 4:
        raise ShapeError("rank exceeds 4")
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape {old} -> {shape}") from exc
    return _make(out, "reshape", (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}") from exc
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, "concat", tuple(tensors), backward)


def slice_rows(a, start, stop):
    """Rows ``start:stop`` along the second-to-last axis."""
    out = a.data[..., start:stop, :]

    def backward(g):
        full = np.zeros_like(a.data)
        full[..., start:stop, :] = g
        return (full,)

    return _make(out, "slice", (a,), backward)


def gather_rows(a, index):
    """Rows of a rank-2 tensor selected by an integer array of any shape."""
    if a.data.ndim != 2:
        raise ShapeError("gather_rows expects a rank-2 source")
    index = np.asarray(index, dtype=np.int64)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index.reshape(-1), g.reshape(-1, a.shape[1]))
        return (full,)

    return _make(out, "gather", (a,), backward)


def scatter_add_rows(a, index, num_rows):
    """Sum rows of ``a`` into ``num_rows`` buckets given by ``index``."""
    index = np.asarray(index, dtype=np.int64)
    if a.data.ndim != 2 or index.shape != (a.shape[0],):
        raise ShapeError("scatter_add_rows expects (E, d) source and (E,) index")
    out = np.zeros((num_rows, a.shape[1]), dtype=a.dtype)
    np.add.at(out, index, a.data)
    return _make(out, "scatter_add", (a,), lambda g: (g[index],))


def sum_(a, axis=None, keepdims=False):
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), "sum", (a,), backward)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis, keepdims), 1.0 / n)


# ----------------------------------------------------------------------------
# Nonlinearities and normalization


def relu(a):
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0).astype(a.dtype), "relu", (a,), lambda g: (g * pos,))


def leaky_relu(a, slope=0.2):
    pos = a.data > 0
    factor = np.where(pos, 1.0, slope).astype(a.dtype)
    return _make(a.data * factor, "leaky_relu", (a,), lambda g: (g * factor,))


def gelu(a):
    """GELU, tanh approximation."""
    x = a.data
    inner = GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, "gelu", (a,), backward)


def softmax(a, mask=None):
    """Softmax over the last axis with an optional additive 0/-inf mask.

    The mask is a plain array broadcastable to ``a``; it never enters the
    tape.  A row whose entries are all masked raises ``ShapeError``.
    """
    x = a.data
    if mask is not None:
        mask = np.asarray(mask)
        if not np.all((mask == 0) | np.isneginf(mask)):
            raise ValueError("mask entries must be 0 or -inf")
        x = x + mask
        if np.any(np.all(np.isneginf(x), axis=-1)):
            raise ShapeError("softmax row is fully masked")
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _make(y.astype(a.dtype, copy=False), "softmax", (a,), backward)


def layernorm(a, gain, bias, eps=1e-5):
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        ggain = _unbroadcast(g * xhat, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        return gx, ggain, gbias

    return _make(out, "layernorm", (a, gain, bias), backward)


def embedding(tables, index):
    """Sum of per-column lookups: ``out[i] = sum_k tables[k][index[i, k]]``."""
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 2 or index.shape[1] != len(tables):
        raise ShapeError("embedding index must be (n, number of tables)")
    out = np.zeros((index.shape[0], tables[0].shape[1]), dtype=tables[0].dtype)
    for k, t in enumerate(tables):
        out += t.data[index[:, k]]

    def backward(g):
        grads = []
        for k, t in enumerate(tables):
            full = np.zeros_like(t.data)
            np.add.at(full, index[:, k], g)
            grads.append(full)
        return tuple(grads)

    return _make(out, "embedding", tuple(tables), backward)


def dropout(a, p, rng, train=True):
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not train or p == 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must be in [0, 1)")
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
    return _make(a.data * keep, "dropout", (a,), lambda g: (g * keep,))


# ----------------------------------------------------------------------------
# Losses


def mse_loss(pred, target, mask=None):
    """Mean squared error over entries where ``mask`` is true (all by default)."""
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ShapeError(f"mse_loss: {pred.shape} vs {target.shape}")
    valid = np.ones(pred.shape, bool) if mask is None else np.asarray(mask, bool)
    n = max(int(valid.sum()), 1)
    diff = np.where(valid, pred.data - np.where(valid, target, 0.0), 0.0)
    out = np.asarray((diff * diff).sum() / n, dtype=pred.dtype)
    return _make(out, "mse_loss", (pred,), lambda g: (g * 2.0 * diff / n,))


def bce_with_logits_loss(logits, labels):
    """Mean binary cross-entropy over non-NaN labels; NaN labels contribute nothing."""
    labels = np.asarray(labels, dtype=logits.dtype)
    if labels.shape != logits.shape:
        raise ShapeError(f"bce: {logits.shape} vs {labels.shape}")
    valid = ~np.isnan(labels)
    y = np.where(valid, labels, 0.0)
    z = logits.data
    n = max(int(valid.sum()), 1)
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(np.where(valid, per, 0.0).sum() / n, dtype=logits.dtype)
    sig = 1.0 / (1.0 + np.exp(-z))

    def backward(g):
        return (g * np.where(valid, sig - y, 0.0) / n,)

    return _make(out, "bce_with_logits", (logits,), backward)


# ----------------------------------------------------------------------------
# Gradient check


def grad_check(f, params, eps=1e-6, return_all=False):
    """Compare tape gradients of scalar ``f()`` with central differences.

    For each parameter tensor the error is ``|a - n| / max(|a|, |n|, 1e-8)``
    with ``|.|`` the Euclidean norm over its entries; the maximum over
    parameters is returned.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError("eps must lie in [1e-7, 1e-4]")
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError("grad_check requires float64 parameters")
        p.grad = None
    with Tape() as tape:
        out = f()
    tape.backward(out)
    errors = []
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                nflat[i] = (fp - fm) / (2 * eps)
        num = np.linalg.norm(analytic - numeric)
        den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
        errors.append(num / den)
    for p in params:
        p.grad = None
    if return_all:
        return max(errors), errors
    return max(errors)


# ----------------------------------------------------------------------------
# Checkpoints


def save_tensors(path, arrays, meta=None):
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian blob)."""
    path = Path(path)
    entries = []
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": "saca-tensors-1", "total_bytes": offset, "tensors": entries,
                "meta": meta or {}}
    path.with_suffix(".bin").write_bytes(b"".join(chunks))
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path.with_suffix(".json"), path.with_suffix(".bin")


def load_tensors(path):
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    blob = path.with_suffix(".bin").read_bytes()
    if len(blob) != manifest.get("total_bytes"):
        raise CheckpointError(f"blob has {len(blob)} bytes, manifest says {manifest.get('total_bytes')}")
    arrays = {}
    expect = 0
    for e in manifest["tensors"]:
        dtype = np.dtype(e["dtype"]).newbyteorder("<")
        count = int(np.prod(e["shape"], dtype=np.int64))
        nbytes = count * dtype.itemsize
        if e["offset"] != expect or e.get("nbytes", nbytes) != nbytes:
            raise CheckpointError(f"bad offset/size for {e['name']}")
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(dtype.newbyteorder("="))
        expect += nbytes
    if expect != len(blob):
        raise CheckpointError("manifest does not cover the whole blob")
    return arrays, manifest.get("meta", {})
