"""Layers, deterministic initialization, Adam, and checkpoint files.

Parameters live in a ParameterStore: an insertion-ordered name -> Tensor map.
Iteration order is declaration order and is stable across runs, which makes
the optimizer trajectory bitwise-reproducible for a fixed (config, seed).
"""

from __future__ import annotations

import json
import struct

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"pcehr-ckpt-v1\n"


class ParameterStore:
    """Ordered, unique-named collection of trainable tensors."""

    def __init__(self, rng_seed: int = 0):
        self.rng_seed = int(rng_seed)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def tensors(self):
        return list(self._params.values())

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def load_values(self, values: dict[str, np.ndarray]):
        """Overwrite parameter data in place from name -> array."""
        missing = [n for n in self._params if n not in values]
        if missing:
            raise ValueError(f"checkpoint missing parameters: {missing[:5]}")
        for name, param in self._params.items():
            arr = np.asarray(values[name])
            if arr.shape != param.data.shape:
                raise ValueError(f"parameter {name!r} shape {arr.shape} != expected {param.data.shape}")
            param.data = arr.astype(param.data.dtype, copy=True)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}


def count_parameters(store: ParameterStore) -> int:
    return sum(p.data.size for p in store.tensors())


def parameter_breakdown(store: ParameterStore):
    """Per-parameter (name, shape, count) rows in declaration order."""
    return [(name, tuple(p.data.shape), int(p.data.size)) for name, p in store.items()]


def _uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear:
    """y = x W^T + b with weight shape (out_features, in_features)."""

    def __init__(self, store, name, in_features, out_features, rng, dtype=np.float32):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = store.add(name + ".weight", Tensor(_uniform_init(rng, (out_features, in_features), in_features, dtype)))
        self.bias = store.add(name + ".bias", Tensor(np.zeros(out_features, dtype=dtype)))

    def __call__(self, x: Tensor) -> Tensor:
        single = x.data.ndim == 1
        if single:
            x = ad.reshape(x, (1, x.data.shape[0]))
        out = ad.add(ad.matmul(x, ad.transpose(self.weight)), self.bias)
        if single:
            out = ad.reshape(out, (self.out_features,))
        return out


class Conv1d:
    """1-D convolution layer; kernels shape (out_channels, in_channels, k)."""

    def __init__(self, store, name, in_channels, out_channels, kernel_size, stride=1, padding=0, rng=None, dtype=np.float32):
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size
        self.kernels = store.add(name + ".kernel", Tensor(_uniform_init(rng, (out_channels, in_channels, kernel_size), fan_in, dtype)))
        self.bias = store.add(name + ".bias", Tensor(np.zeros(out_channels, dtype=dtype)))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv1d(x, self.kernels, self.bias, stride=self.stride, padding=self.padding)


class LstmCell:
    """Single LSTM cell with separate input/hidden biases (both added each
    step, so their sum is the effective gate bias)."""

    def __init__(self, store, name, input_size, hidden_size, rng, dtype=np.float32):
        self.hidden_size = hidden_size
        h4 = 4 * hidden_size
        self.w_ih = store.add(name + ".w_ih", Tensor(_uniform_init(rng, (h4, input_size), input_size, dtype)))
        self.w_hh = store.add(name + ".w_hh", Tensor(_uniform_init(rng, (h4, hidden_size), hidden_size, dtype)))
        b_ih = np.zeros(h4, dtype=dtype)
        b_ih[hidden_size : 2 * hidden_size] = 1.0  # forget gate starts open
        self.b_ih = store.add(name + ".b_ih", Tensor(b_ih))
        self.b_hh = store.add(name + ".b_hh", Tensor(np.zeros(h4, dtype=dtype)))

    def __call__(self, x: Tensor, h: Tensor, c: Tensor):
        bias = ad.add(self.b_ih, self.b_hh)
        return ad.lstm_cell(x, h, c, self.w_ih, self.w_hh, bias)


class Dropout:
    def __init__(self, rate):
        self.rate = rate

    def __call__(self, x: Tensor, train_mode: bool, rng) -> Tensor:
        return ad.dropout(x, self.rate, train_mode, rng)


class AdamState:
    """Classic Adam with bias correction and coupled (L2-style) weight decay
    folded into the gradient before the moment updates."""

    def __init__(self, store: ParameterStore, learning_rate=5e-3, beta1=0.9, beta2=0.999, epsilon=1e-8, weight_decay=5e-5):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in store.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in store.items()}


def adam_step(store: ParameterStore, state: AdamState):
    """One optimizer step over every parameter; gradients cleared afterwards.

    A parameter whose grad is None is treated as having a zero gradient
    (weight decay still applies).  A non-finite gradient aborts the step
    before any parameter is touched, naming the offender.
    """
    for name, p in store.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise ad.NonFiniteError(f"non-finite gradient in parameter {name!r}")
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for name, p in store.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / bias1
        v_hat = v / bias2
        p.data -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    store.zero_grad()


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, store: ParameterStore, config: dict, extra: dict | None = None):
    """Binary container: magic line, 8-byte LE header length, JSON header
    (config echo, extras such as normalization statistics, parameter table),
    then flat little-endian value blobs in declaration order."""
    entries = []
    blobs = []
    offset = 0
    for name, p in store.items():
        arr = np.ascontiguousarray(p.data)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": arr.dtype.name,
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"config": config, "extra": extra or {}, "params": entries}).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path):
    """Returns (values: name -> ndarray, config: dict, extra: dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file (bad magic {magic!r}): {path}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode())
        body = fh.read()
    values = {}
    for entry in header["params"]:
        raw = body[entry["offset"] : entry["offset"] + entry["nbytes"]]
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        arr = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"])
        values[entry["name"]] = arr.astype(np.dtype(entry["dtype"]))
    return values, header["config"], header["extra"]
