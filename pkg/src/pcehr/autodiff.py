"""Dense tensors with reverse-mode automatic differentiation.

The engine records every differentiable operation on an implicit tape (the
graph of ``Tensor`` objects linked through their inputs).  Calling
``backward()`` on a scalar loss walks that graph once in reverse topological
order and accumulates gradients into every tensor created with
``requires_grad=True``.  Gradients are strictly additive across backward
passes until cleared with ``zero_grad()``.

Arrays are float32 by default; pass ``dtype=np.float64`` for gradient-check
precision.  Inputs with a leading batch axis are supported by ``conv1d`` and
``lstm_cell`` in addition to the unbatched shapes.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32

BCE_CLAMP = 1e-7


class AutodiffError(ValueError):
    """Shape, axis, or tape misuse detected by an operation."""


class NonFiniteError(FloatingPointError):
    """A forward value that must be finite was NaN or infinite."""


def _as_array(data, dtype):
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(DEFAULT_DTYPE)
    return arr


class Tensor:
    """N-dimensional real array that participates in the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are lifted to constant tensors
    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)


def _lift(value, like):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _result(data, parents, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _accumulate(tensor, grad):
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.zeros_like(tensor.data)
    tensor.grad += grad


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, emitted = stack.pop()
        if emitted:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Populate gradients of every requires_grad tensor reachable from ``loss``."""
    if loss._backward is None and not loss._parents:
        raise AutodiffError("backward called on a tensor not produced by the tape")
    if loss.data.size != 1:
        raise AutodiffError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    order = _toposort(loss)
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad += np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise and shape operations


def add(a, b):
    out_data = a.data + b.data

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _result(out_data, (a, b), backward_fn)


def sub(a, b):
    out_data = a.data - b.data

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _result(out_data, (a, b), backward_fn)


def neg(a):
    def backward_fn(g):
        _accumulate(a, -g)

    return _result(-a.data, (a,), backward_fn)


def mul(a, b):
    out_data = a.data * b.data

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _result(out_data, (a, b), backward_fn)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise AutodiffError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise AutodiffError(f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def backward_fn(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _result(out_data, (a, b), backward_fn)


def transpose(a, axes=None):
    out_data = np.transpose(a.data, axes)
    if axes is None:
        inverse = None
    else:
        inverse = np.argsort(axes)

    def backward_fn(g):
        _accumulate(a, np.transpose(g, inverse))

    return _result(out_data, (a,), backward_fn)


def reshape(a, shape):
    out_data = a.data.reshape(shape)

    def backward_fn(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _result(out_data, (a,), backward_fn)


def concat(tensors, axis):
    if not tensors:
        raise AutodiffError("concat of an empty tensor list")
    ndim = tensors[0].data.ndim
    if not -ndim <= axis < ndim:
        raise AutodiffError(f"concat axis {axis} out of range for {ndim}-D tensors")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(start, stop)
            _accumulate(t, g[tuple(index)])

    return _result(out_data, tuple(tensors), backward_fn)


def take(a, key):
    """Basic slicing / indexing; gradient scatters back into the source."""
    out_data = a.data[key]

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[key] += g
        _accumulate(a, full)

    return _result(out_data, (a,), backward_fn)


def reduce_sum(a, axis=None, keepdims=False):
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape).copy())

    return _result(out_data, (a,), backward_fn)


def reduce_mean(a, axis=None, keepdims=False):
    count = a.data.size if axis is None else a.data.shape[axis]
    summed = reduce_sum(a, axis=axis, keepdims=keepdims)
    scale = np.asarray(1.0 / count, dtype=a.dtype)
    return mul(summed, Tensor(scale))


def relu(a):
    mask = a.data > 0
    out_data = np.where(mask, a.data, 0)

    def backward_fn(g):
        _accumulate(a, g * mask)

    return _result(out_data, (a,), backward_fn)


def leaky_relu(a, negative_slope=0.01):
    mask = a.data > 0
    out_data = np.where(mask, a.data, a.data * negative_slope)

    def backward_fn(g):
        _accumulate(a, g * np.where(mask, 1.0, negative_slope).astype(a.dtype))

    return _result(out_data, (a,), backward_fn)


def _sigmoid_values(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    s = _sigmoid_values(a.data)

    def backward_fn(g):
        _accumulate(a, g * s * (1.0 - s))

    return _result(s, (a,), backward_fn)


def tanh(a):
    t = np.tanh(a.data)

    def backward_fn(g):
        _accumulate(a, g * (1.0 - t * t))

    return _result(t, (a,), backward_fn)


def dropout(a, rate, train_mode, rng):
    """Inverted dropout: kept activations are scaled by 1/(1-rate) in train
    mode so eval mode is the identity."""
    if not 0.0 <= rate < 1.0:
        raise AutodiffError(f"dropout rate must be in [0, 1), got {rate}")
    if not train_mode or rate == 0.0:
        return a
    keep = (rng.random(a.data.shape) >= rate).astype(a.dtype)
    scale = np.asarray(1.0 / (1.0 - rate), dtype=a.dtype)
    factor = keep * scale

    def backward_fn(g):
        _accumulate(a, g * factor)

    return _result(a.data * factor, (a,), backward_fn)


def l1_loss(pred, target):
    """Mean absolute error; subgradient at zero residual is defined as 0."""
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    diff = pred.data - target.data
    out_data = np.asarray(np.mean(np.abs(diff)), dtype=pred.dtype)
    sign = np.sign(diff) / diff.size

    def backward_fn(g):
        _accumulate(pred, (g * sign).astype(pred.dtype, copy=False))
        _accumulate(target, (-g * sign).astype(target.dtype, copy=False))

    return _result(out_data, (pred, target), backward_fn)


def binary_cross_entropy(p, label):
    """Elementwise-mean BCE; probabilities are clamped to [1e-7, 1-1e-7] and
    the gradient is zero where the clamp is active."""
    label_arr = label.data if isinstance(label, Tensor) else np.asarray(label, dtype=p.dtype)
    lo, hi = BCE_CLAMP, 1.0 - BCE_CLAMP
    clamped = np.clip(p.data, lo, hi)
    inside = ((p.data > lo) & (p.data < hi)).astype(p.dtype)
    losses = -(label_arr * np.log(clamped) + (1.0 - label_arr) * np.log1p(-clamped))
    out_data = np.asarray(np.mean(losses), dtype=p.dtype)
    n = p.data.size

    def backward_fn(g):
        gp = (clamped - label_arr) / (clamped * (1.0 - clamped)) / n
        _accumulate(p, (g * gp * inside).astype(p.dtype, copy=False))

    return _result(out_data, (p,), backward_fn)


# ---------------------------------------------------------------------------
# structured operations


def conv1d(x, kernels, bias, stride=1, padding=0):
    """1-D cross-correlation along the last axis.

    ``x`` is (C_in, L) or (B, C_in, L); ``kernels`` is (C_out, C_in, K);
    ``bias`` is (C_out,).  Zero padding; output length is
    floor((L + 2*padding - K) / stride) + 1.
    """
    if stride < 1:
        raise AutodiffError(f"conv1d stride must be >= 1, got {stride}")
    if padding < 0:
        raise AutodiffError(f"conv1d padding must be >= 0, got {padding}")
    squeeze = x.data.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or kernels.data.ndim != 3:
        raise AutodiffError(f"conv1d expects (B, C, L) input and (F, C, K) kernels, got {x.data.shape} and {kernels.data.shape}")
    batch, c_in, length = xd.shape
    filters, c_k, k = kernels.data.shape
    if c_in != c_k:
        raise AutodiffError(f"conv1d channel mismatch: input has {c_in} channels {x.data.shape}, kernels expect {c_k} {kernels.data.shape}")
    if k > length + 2 * padding:
        raise AutodiffError(f"conv1d kernel {k} longer than padded input {length + 2 * padding}")

    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding)))
    else:
        xp = xd
    l_out = (length + 2 * padding - k) // stride + 1

    s0, s1, s2 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, shape=(batch, l_out, c_in, k), strides=(s0, s2 * stride, s1, s2)
    )
    cols = windows.reshape(batch * l_out, c_in * k)
    kmat = kernels.data.reshape(filters, c_in * k)
    out = cols @ kmat.T
    out = out.reshape(batch, l_out, filters).transpose(0, 2, 1)
    out = out + bias.data[None, :, None]
    if squeeze:
        out = out[0]

    def backward_fn(g):
        gb = g[None] if squeeze else g
        g2 = gb.transpose(0, 2, 1).reshape(batch * l_out, filters)
        _accumulate(kernels, (g2.T @ cols).reshape(filters, c_in, k))
        _accumulate(bias, gb.sum(axis=(0, 2)))
        gcols = (g2 @ kmat).reshape(batch, l_out, c_in, k)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, :, j : j + l_out * stride : stride] += gcols[:, :, :, j].transpose(0, 2, 1)
        gx = gxp[:, :, padding : padding + length] if padding else gxp
        _accumulate(x, gx[0] if squeeze else gx)

    return _result(out, (x, kernels, bias), backward_fn)


def lstm_cell(x, h_prev, c_prev, w_ih, w_hh, bias):
    """One LSTM step with gate order (input, forget, candidate, output).

    ``x`` is (D,) or (B, D); ``h_prev``/``c_prev`` follow with (H,) or (B, H).
    ``w_ih`` is (4H, D), ``w_hh`` is (4H, H), ``bias`` is (4H,).  Aborts if
    any gate pre-activation is non-finite.
    """
    squeeze = x.data.ndim == 1
    if squeeze:
        x = reshape(x, (1, x.data.shape[0]))
        h_prev = reshape(h_prev, (1, h_prev.data.shape[0]))
        c_prev = reshape(c_prev, (1, c_prev.data.shape[0]))
    hidden = h_prev.data.shape[1]
    if w_ih.data.shape != (4 * hidden, x.data.shape[1]):
        raise AutodiffError(f"lstm_cell w_ih shape {w_ih.data.shape} inconsistent with input {x.data.shape} and hidden {hidden}")
    if w_hh.data.shape != (4 * hidden, hidden):
        raise AutodiffError(f"lstm_cell w_hh shape {w_hh.data.shape} inconsistent with hidden {hidden}")

    z = add(add(matmul(x, transpose(w_ih)), matmul(h_prev, transpose(w_hh))), bias)
    if not np.all(np.isfinite(z.data)):
        where = np.argwhere(~np.isfinite(z.data))[0]
        raise NonFiniteError(f"non-finite LSTM gate pre-activation at index {tuple(int(i) for i in where)}")
    gate_i = sigmoid(z[:, :hidden])
    gate_f = sigmoid(z[:, hidden : 2 * hidden])
    gate_g = tanh(z[:, 2 * hidden : 3 * hidden])
    gate_o = sigmoid(z[:, 3 * hidden :])
    c = add(mul(gate_f, c_prev), mul(gate_i, gate_g))
    h = mul(gate_o, tanh(c))
    if squeeze:
        h = reshape(h, (hidden,))
        c = reshape(c, (hidden,))
    return h, c
