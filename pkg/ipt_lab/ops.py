"""Differentiable operations.

Every op computes its forward value with numpy and, when a tape is active
and any input requires a gradient, records a vector-Jacobian product on it.
Outside a tape the ops are plain numpy evaluations.
"""

import math
from typing import Any, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, active_tape

ArrayLike = Union[Tensor, np.ndarray, float, int]

_GELU_C = math.sqrt(2.0 / math.pi)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"non-finite {what}")


# elementwise

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make("exp", y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    y = 0.5 * x * (1.0 + t)

    def vjp(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _make("gelu", y, (a,), vjp)


def dropout(a: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    if rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul(a, keep)


# structural

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim == 0 or b.data.ndim == 0:
        raise ValueError("matmul needs at least 1-D operands")

    def vjp(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 1:
            return _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape), _unbroadcast(ad[:, None] * g[..., None, :], bd.shape)
        if bd.ndim == 1:
            n = bd.shape[0]
            return g[..., None] * bd, (ad * g[..., None]).reshape(-1, n).sum(axis=0)
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make("matmul", a.data @ b.data, (a, b), vjp)


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = list(range(a.data.ndim))
        if len(axes) >= 2:
            axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if len(ts) == 1:
        return ts[0]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _make("concat", np.concatenate([t.data for t in ts], axis=axis), ts,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return _make("stack", np.stack([t.data for t in ts], axis=axis), ts,
                 lambda g: tuple(np.moveaxis(g, axis, 0)))


def _is_basic(key: Any) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(p is None or p is Ellipsis or isinstance(p, (slice, int, np.integer)) for p in parts)


def take(a: Tensor, key: Any) -> Tensor:
    """Basic or advanced indexing; the backward scatter-adds into a zero buffer."""
    basic = _is_basic(key)

    def vjp(g):
        full = np.zeros_like(a.data)
        if basic:
            full[key] += g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _make("take", np.array(a.data[key]), (a,), vjp)


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of ``table``; repeated ids accumulate their gradients."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValueError(f"embedding index out of range [0, {table.shape[0]})")

    def vjp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make("embedding", table.data[idx], (table,), vjp)


def sum(a: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# normalisation and probabilities

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * rstd
    y = xhat * gamma.data + beta.data

    def vjp(g):
        d = x.shape[-1]
        dxhat = g * gamma.data
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        dgamma = (g * xhat).reshape(-1, d).sum(axis=0)
        dbeta = g.reshape(-1, d).sum(axis=0)
        return dx, dgamma, dbeta

    return _make("layer_norm", y, (x, gamma, beta), vjp)


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    _check_finite(logits.data, "logits")
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _make("softmax", s, (logits,),
                 lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    _check_finite(logits.data, "logits")
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    return _make("log_softmax", y, (logits,),
                 lambda g: (g - np.exp(y) * g.sum(axis=axis, keepdims=True),))


def cross_entropy(predicted: Tensor, target: Any) -> Tensor:
    """Mean over the batch of ``-log softmax(predicted)[target]``.

    ``target`` is either class indices ``[B]`` or a one-hot / probability
    matrix with the same shape as ``predicted``.
    """
    logits = predicted.data
    if logits.ndim == 1:
        logits = logits[None, :]
    _check_finite(logits, "logits")
    batch, classes = logits.shape
    tgt = np.asarray(target)
    soft = tgt.shape == predicted.shape and (tgt.ndim == 2 or tgt.dtype.kind == "f")
    if soft:
        onehot = tgt.reshape(batch, classes).astype(np.float64)
    else:
        idx = tgt.reshape(-1).astype(np.int64)
        if idx.shape[0] != batch:
            raise ValueError(f"expected {batch} targets, got {idx.shape[0]}")
        if idx.min() < 0 or idx.max() >= classes:
            raise ValueError(f"target index out of range [0, {classes})")
        onehot = np.zeros((batch, classes))
        onehot[np.arange(batch), idx] = 1.0
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -(onehot * logp).sum() / batch

    def vjp(g):
        grad = (np.exp(logp) * onehot.sum(axis=1, keepdims=True) - onehot) * (g / batch)
        return (grad.reshape(predicted.shape),)

    return _make("cross_entropy", np.asarray(max(loss, 0.0)), (predicted,), vjp)


# sequence layers

def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, padding: int = 0) -> Tensor:
    """1-D convolution of ``x [T × C_in]`` with ``weight [K × C_in × C_out]``."""
    k, c_in, c_out = weight.shape
    t = x.shape[0]
    xp = np.pad(x.data, ((padding, padding), (0, 0))) if padding else x.data
    t_out = xp.shape[0] - k + 1
    if t_out < 1:
        raise ValueError(f"sequence of length {t} too short for kernel {k} with padding {padding}")
    cols = sliding_window_view(xp, k, axis=0).transpose(0, 2, 1).reshape(t_out, k * c_in)
    w = weight.data.reshape(k * c_in, c_out)
    y = cols @ w
    if bias is not None:
        y = y + bias.data

    def vjp(g):
        gw = (cols.T @ g).reshape(k, c_in, c_out)
        gcols = (g @ w.T).reshape(t_out, k, c_in)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[j:j + t_out] += gcols[:, j, :]
        gx = gxp[padding:padding + t] if padding else gxp
        grads: List[Optional[np.ndarray]] = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make("conv1d", y, inputs, vjp)


def _window_max(x: Tensor, windows: Sequence[Tuple[int, int]], op: str) -> Tensor:
    channels = x.shape[1]
    rows = np.empty((len(windows), channels), dtype=np.int64)
    for i, (s, e) in enumerate(windows):
        rows[i] = s + x.data[s:e].argmax(axis=0)
    cols = np.broadcast_to(np.arange(channels), rows.shape)
    y = x.data[rows, cols]

    def vjp(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (rows, cols), g)
        return (full,)

    return _make(op, y, (x,), vjp)


def max_pool1d(x: Tensor, kernel: int, stride: Optional[int] = None) -> Tensor:
    """Max pooling over time of ``x [T × C]``; a sequence shorter than the
    kernel pools into a single window."""
    stride = stride or kernel
    t = x.shape[0]
    if t <= kernel:
        windows = [(0, t)]
    else:
        windows = [(s, s + kernel) for s in range(0, t - kernel + 1, stride)]
    return _window_max(x, windows, "max_pool1d")


def adaptive_max_pool1d(x: Tensor, out_len: int) -> Tensor:
    """Max pooling of ``x [T × C]`` into exactly ``out_len`` windows."""
    t = x.shape[0]
    windows = [(math.floor(i * t / out_len), math.ceil((i + 1) * t / out_len)) for i in range(out_len)]
    return _window_max(x, windows, "adaptive_max_pool1d")


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, weight: Tensor, bias: Tensor) -> Tuple[Tensor, Tensor]:
    """One LSTM step. ``weight`` is ``[(d_in + H) × 4H]``, gate order i, f, g, o."""
    hidden = h.shape[-1]
    z = add(matmul(concat([x, h], axis=-1), weight), bias)
    i = sigmoid(take(z, np.s_[..., 0:hidden]))
    f = sigmoid(take(z, np.s_[..., hidden:2 * hidden]))
    g = tanh(take(z, np.s_[..., 2 * hidden:3 * hidden]))
    o = sigmoid(take(z, np.s_[..., 3 * hidden:4 * hidden]))
    c_next = add(mul(f, c), mul(i, g))
    h_next = mul(o, tanh(c_next))
    return h_next, c_next
