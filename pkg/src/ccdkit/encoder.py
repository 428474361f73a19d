"""Feed-forward networks with reverse-mode gradients, freezing and snapshots.

The backbone and the projector are both instances of :class:`FeedForwardNet`.
A forward pass in training mode returns a :class:`ForwardTrace` that the
matching backward pass consumes exactly once. Once a net is frozen, any
attempt to update its parameters is a hard error; forward passes stay legal
and bitwise reproducible.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"CCDN"
FORMAT_VERSION = 1

_ACT_CODES = {"identity": 0, "tanh": 1, "sigmoid": 2}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


class FrozenNetError(RuntimeError):
    """Raised when a training step touches a frozen net."""


class TraceError(RuntimeError):
    """Raised on a stale, reused or foreign forward trace."""


def _apply_activation(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return z
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    raise ValueError(f"unknown activation {name!r}")


def _activation_grad(name: str, a: np.ndarray) -> np.ndarray:
    # Derivatives expressed through the activation value a = act(z).
    if name == "identity":
        return np.ones_like(a)
    if name == "tanh":
        return 1.0 - a * a
    if name == "sigmoid":
        return a * (1.0 - a)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class Layer:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    activation: str


class ForwardTrace:
    """Per-layer inputs and activations retained for one backward pass."""

    def __init__(self, net_id: int, inputs: list, activations: list):
        self.net_id = net_id
        self.inputs = inputs
        self.activations = activations
        self.consumed = False


class FeedForwardNet:
    """Dense net: x -> act(W_L(...act(W_1 x + b_1)...) + b_L)."""

    def __init__(self, layers: list[Layer], frozen: bool = False):
        if not layers:
            raise ValueError("need at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if nxt.W.shape[1] != prev.W.shape[0]:
                raise ValueError("adjacent layer dimensions do not chain")
        self.layers = layers
        self.frozen = frozen

    @classmethod
    def build(cls, dims: list[int], activations: list[str], rng: np.random.Generator):
        """Seeded init: W, b ~ uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))."""
        if len(activations) != len(dims) - 1:
            raise ValueError("need one activation per layer")
        layers = []
        for fan_in, fan_out, act in zip(dims, dims[1:], activations):
            if act not in _ACT_CODES:
                raise ValueError(f"unknown activation {act!r}")
            bound = 1.0 / np.sqrt(fan_in)
            W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            b = rng.uniform(-bound, bound, size=fan_out)
            layers.append(Layer(W, b, act))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].W.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].W.shape[0]

    def forward(self, X: np.ndarray, want_trace: bool = False):
        """Batch forward pass; X is (n, input_dim) or a single (input_dim,) vector.

        With ``want_trace`` returns (output, ForwardTrace) for a later
        backward pass.
        """
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        if single:
            X = X[None, :]
        if X.shape[1] != self.input_dim:
            raise ValueError(f"input dim {X.shape[1]} != expected {self.input_dim}")
        inputs = []
        activations = []
        a = X
        for layer in self.layers:
            inputs.append(a)
            z = a @ layer.W.T + layer.b
            a = _apply_activation(layer.activation, z)
            activations.append(a)
        out = a[0] if single else a
        if want_trace:
            return out, ForwardTrace(id(self), inputs, activations)
        return out

    def backward(self, trace: ForwardTrace, upstream: np.ndarray):
        """Backprop an upstream dL/dout through the recorded forward pass.

        Returns (param_grads, input_grad) where param_grads matches
        ``self.params()`` ordering. The trace is consumed.
        """
        if trace.net_id != id(self):
            raise TraceError("trace belongs to a different net")
        if trace.consumed:
            raise TraceError("trace already consumed")
        trace.consumed = True
        delta = np.asarray(upstream, dtype=np.float64)
        if delta.ndim == 1:
            delta = delta[None, :]
        grads = []
        for i in reversed(range(len(self.layers))):
            layer = self.layers[i]
            delta = delta * _activation_grad(layer.activation, trace.activations[i])
            gW = delta.T @ trace.inputs[i]
            gb = delta.sum(axis=0)
            grads.append((gW, gb))
            delta = delta @ layer.W
        param_grads = []
        for gW, gb in reversed(grads):
            param_grads.extend([gW, gb])
        return param_grads, delta

    def params(self) -> list[np.ndarray]:
        """Flat [W0, b0, W1, b1, ...] list of the live parameter arrays."""
        out = []
        for layer in self.layers:
            out.extend([layer.W, layer.b])
        return out

    def set_params(self, arrays) -> None:
        """Replace parameters; hard error when the net is frozen."""
        if self.frozen:
            raise FrozenNetError("cannot update parameters of a frozen net")
        arrays = list(arrays)
        if len(arrays) != 2 * len(self.layers):
            raise ValueError("wrong number of parameter arrays")
        for i, layer in enumerate(self.layers):
            W, b = arrays[2 * i], arrays[2 * i + 1]
            if W.shape != layer.W.shape or b.shape != layer.b.shape:
                raise ValueError("parameter shape mismatch")
            layer.W = np.asarray(W, dtype=np.float64)
            layer.b = np.asarray(b, dtype=np.float64)

    def freeze(self) -> "FeedForwardNet":
        self.frozen = True
        return self

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params()))

    def param_bytes(self) -> int:
        return int(sum(p.nbytes for p in self.params()))

    def snapshot(self) -> list[np.ndarray]:
        return [p.copy() for p in self.params()]

    # Binary layout: magic, u8 version, u8 frozen, u32 layer count, then per
    # layer u32 in, u32 out, u8 activation, row-major float64 W, then b.
    # Little-endian throughout; round-trips bit-exact.
    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<BB", FORMAT_VERSION, int(self.frozen)))
        buf.write(struct.pack("<I", len(self.layers)))
        for layer in self.layers:
            fan_out, fan_in = layer.W.shape
            buf.write(struct.pack("<IIB", fan_in, fan_out, _ACT_CODES[layer.activation]))
            buf.write(np.ascontiguousarray(layer.W, dtype="<f8").tobytes())
            buf.write(np.ascontiguousarray(layer.b, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "FeedForwardNet":
        buf = io.BytesIO(data)
        if buf.read(4) != MAGIC:
            raise ValueError("bad magic bytes for net snapshot")
        version, frozen = struct.unpack("<BB", buf.read(2))
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported snapshot version {version}")
        (n_layers,) = struct.unpack("<I", buf.read(4))
        layers = []
        for _ in range(n_layers):
            fan_in, fan_out, act = struct.unpack("<IIB", buf.read(9))
            W = np.frombuffer(buf.read(8 * fan_in * fan_out), dtype="<f8")
            W = W.reshape(fan_out, fan_in).copy()
            b = np.frombuffer(buf.read(8 * fan_out), dtype="<f8").copy()
            layers.append(Layer(W, b, _ACT_NAMES[act]))
        return cls(layers, frozen=bool(frozen))
