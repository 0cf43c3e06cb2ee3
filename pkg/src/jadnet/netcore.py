"""Fully-connected layer networks with activation tracing and reverse-mode gradients.

A network is the composition ``g = a_n o ... o a_1`` with ``a_i(z) = f_i(W_i z + b_i)``.
Inputs are flat float64 vectors of length ``layers[0].in_dim``; a 2-D array is
treated as a batch with one sample per row.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, FormatError, ParameterError, UnsupportedLossError

IDENTITY = "identity"
LEAKY_RELU = "leaky_relu"

_TAGS = {IDENTITY: 0, LEAKY_RELU: 1}
_MAGIC = b"JADN"
_VERSION = 1


@dataclass(frozen=True)
class Activation:
    kind: str = IDENTITY
    alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in _TAGS:
            raise ParameterError(f"unknown activation {self.kind!r}")
        if self.kind == LEAKY_RELU and not self.alpha > 0:
            raise ParameterError(f"leaky relu needs alpha > 0, got {self.alpha}")

    @classmethod
    def leaky(cls, alpha: float = 0.01) -> "Activation":
        return cls(LEAKY_RELU, float(alpha))

    @property
    def expansion_bound(self) -> float:
        """Smallest slope of the activation, i.e. L_f."""
        return self.alpha if self.kind == LEAKY_RELU else 1.0

    def __call__(self, u: np.ndarray) -> np.ndarray:
        if self.kind == LEAKY_RELU:
            return leaky_relu(u, self.alpha)
        return u

    def slope(self, u: np.ndarray) -> np.ndarray:
        if self.kind == LEAKY_RELU:
            return np.where(u >= 0, 1.0, self.alpha)
        return np.ones_like(u)


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    activation: Activation = field(default_factory=Activation)

    def __post_init__(self):
        self.W = np.array(self.W, dtype=np.float64, ndmin=2)
        self.b = np.array(self.b, dtype=np.float64).reshape(-1)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise DimensionError(f"bias shape {self.b.shape} does not match W {self.W.shape}")

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]


@dataclass
class Network:
    layers: list[Layer]

    def __post_init__(self):
        if not self.layers:
            raise DimensionError("a network needs at least one layer")
        for i in range(1, len(self.layers)):
            if self.layers[i].in_dim != self.layers[i - 1].out_dim:
                raise DimensionError(
                    f"layer {i + 1} expects {self.layers[i].in_dim} inputs, "
                    f"layer {i} produces {self.layers[i - 1].out_dim}"
                )

    @property
    def n(self) -> int:
        return len(self.layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def copy(self) -> "Network":
        return Network([Layer(l.W.copy(), l.b.copy(), l.activation) for l in self.layers])

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward_with_trace(self, x)[0]


def init_mlp(dims: Sequence[int], alpha: float = 0.01, seed: int = 0,
             hidden: Activation | None = None) -> Network:
    """He-initialised MLP with ``hidden`` activations and an Identity head."""
    if len(dims) < 2:
        raise DimensionError("dims needs an input and an output size")
    hidden = hidden or Activation.leaky(alpha)
    rng = np.random.default_rng(seed)
    layers = []
    for i in range(len(dims) - 1):
        W = rng.normal(0.0, np.sqrt(2.0 / dims[i]), size=(dims[i + 1], dims[i]))
        act = hidden if i < len(dims) - 2 else Activation()
        layers.append(Layer(W, np.zeros(dims[i + 1]), act))
    return Network(layers)


def leaky_relu(u, alpha: float) -> np.ndarray:
    if not alpha > 0:
        raise ParameterError(f"alpha must be positive, got {alpha}")
    u = np.asarray(u, dtype=np.float64)
    return np.where(u >= 0, u, alpha * u)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class Tape:
    """Values recorded on a forward pass, consumed by :func:`backward`."""

    x: np.ndarray
    pre: list[np.ndarray]
    z: list[np.ndarray]


def _as_batch(net: Network, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != net.in_dim:
        raise DimensionError(f"input shape {x.shape} does not match in_dim {net.in_dim}")
    if not np.all(np.isfinite(xb)):
        raise ParameterError("input contains NaN or Inf")
    return xb, single


def record(net: Network, x) -> Tape:
    xb, _ = _as_batch(net, x)
    pre, z = [], []
    h = xb
    for layer in net.layers:
        u = h @ layer.W.T + layer.b
        h = layer.activation(u)
        pre.append(u)
        z.append(h)
    return Tape(xb, pre, z)


def forward_with_trace(net: Network, x, softmax_head: bool = False):
    """Return ``(logits, trace)`` where ``trace[i]`` is the output of layer i+1.

    With ``softmax_head`` the class probabilities are appended as an extra
    trace entry; the logits are unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    tape = record(net, x)
    trace = list(tape.z)
    if softmax_head:
        trace.append(softmax(trace[-1]))
    if x.ndim == 1:
        trace = [t[0] for t in trace]
    return trace[net.n - 1], trace


def backward(net: Network, tape: Tape, upstream: dict[int, np.ndarray],
             want_params: bool = False):
    """Reverse sweep from gradients on layer outputs.

    ``upstream`` maps a 0-based layer index to dLoss/dz_i (batch-shaped).
    Returns the input gradient and, with ``want_params``, a list of
    ``(dW, db)`` summed over the batch.
    """
    g = None
    params: list[tuple[np.ndarray, np.ndarray]] = [None] * net.n  # type: ignore[list-item]
    for i in range(net.n - 1, -1, -1):
        if i in upstream:
            g = upstream[i] if g is None else g + upstream[i]
        if g is None:
            if want_params:
                layer = net.layers[i]
                params[i] = (np.zeros_like(layer.W), np.zeros_like(layer.b))
            continue
        layer = net.layers[i]
        g = g * layer.activation.slope(tape.pre[i])
        if want_params:
            inp = tape.x if i == 0 else tape.z[i - 1]
            params[i] = (g.T @ inp, g.sum(axis=0))
        g = g @ layer.W
    if g is None:
        g = np.zeros_like(tape.x)
    return (g, params) if want_params else g


# ---------------------------------------------------------------------------
# losses: each returns (per-sample loss, dLoss/dlogits)


def cross_entropy(logits: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(labels))
    loss = logsum - shifted[rows, labels]
    grad = softmax(logits)
    grad[rows, labels] -= 1.0
    return loss, grad


def squared_error(logits: np.ndarray, target) -> tuple[np.ndarray, np.ndarray]:
    diff = logits - np.broadcast_to(np.asarray(target, dtype=np.float64), logits.shape)
    return (diff**2).sum(axis=1), 2.0 * diff


LOSSES: dict[str, Callable] = {
    "cross_entropy": cross_entropy,
    "squared_error": squared_error,
}


def input_gradient(net: Network, x, loss_kind: str = "cross_entropy", target=None,
                   **kwargs) -> np.ndarray:
    """Exact gradient of the loss w.r.t. the input.

    For a batch the per-sample losses are summed, so each row receives the
    gradient of its own loss. ``jad_ratio`` and ``composite`` delegate to
    :mod:`jadnet.objectives`; extra keyword arguments go there.
    """
    x = np.asarray(x, dtype=np.float64)
    if loss_kind in ("jad_ratio", "composite"):
        from . import objectives

        fn = objectives.jad_ratio if loss_kind == "jad_ratio" else objectives.composite
        return fn(net, x, target, **kwargs)[1]
    if loss_kind not in LOSSES:
        raise UnsupportedLossError(f"unsupported loss {loss_kind!r}")
    tape = record(net, x)
    _, g_logits = LOSSES[loss_kind](tape.z[-1], target)
    g = backward(net, tape, {net.n - 1: g_logits})
    return g[0] if x.ndim == 1 else g


def loss_value(net: Network, x, loss_kind: str, target) -> float:
    if loss_kind not in LOSSES:
        raise UnsupportedLossError(f"unsupported loss {loss_kind!r}")
    tape = record(net, x)
    return float(LOSSES[loss_kind](tape.z[-1], target)[0].sum())


def param_gradients(net: Network, x, target, loss_kind: str = "cross_entropy"):
    """Batch-mean loss and its gradients ``[(dW_i, db_i), ...]``."""
    if loss_kind not in LOSSES:
        raise UnsupportedLossError(f"unsupported loss {loss_kind!r}")
    tape = record(net, x)
    loss, g_logits = LOSSES[loss_kind](tape.z[-1], target)
    m = tape.x.shape[0]
    _, params = backward(net, tape, {net.n - 1: g_logits / m}, want_params=True)
    return float(loss.mean()), params


# ---------------------------------------------------------------------------
# checkpoints


def dumps_checkpoint(net: Network) -> bytes:
    out = [_MAGIC, bytes([_VERSION]), struct.pack("<I", net.n)]
    for layer in net.layers:
        act = layer.activation
        out.append(struct.pack("<IIBd", layer.out_dim, layer.in_dim, _TAGS[act.kind], act.alpha))
        out.append(np.ascontiguousarray(layer.W, dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(layer.b, dtype="<f8").tobytes())
    return b"".join(out)


def loads_checkpoint(blob: bytes) -> Network:
    if blob[:4] != _MAGIC:
        raise FormatError("bad magic: not a JADN checkpoint")
    if len(blob) < 9:
        raise FormatError("truncated header")
    if blob[4] != _VERSION:
        raise FormatError(f"unsupported checkpoint version {blob[4]}")
    (count,) = struct.unpack_from("<I", blob, 5)
    pos = 9
    kinds = {v: k for k, v in _TAGS.items()}
    layers = []
    head = struct.calcsize("<IIBd")
    for i in range(count):
        if pos + head > len(blob):
            raise FormatError(f"truncated header of layer {i + 1}")
        out_dim, in_dim, tag, alpha = struct.unpack_from("<IIBd", blob, pos)
        pos += head
        if tag not in kinds:
            raise FormatError(f"unknown activation tag {tag}")
        size = 8 * (out_dim * in_dim + out_dim)
        if out_dim == 0 or in_dim == 0 or pos + size > len(blob):
            raise FormatError(f"truncated payload in layer {i + 1}")
        W = np.frombuffer(blob, "<f8", out_dim * in_dim, pos).reshape(out_dim, in_dim)
        b = np.frombuffer(blob, "<f8", out_dim, pos + 8 * out_dim * in_dim)
        pos += size
        try:
            act = Activation(kinds[tag], alpha)
        except ParameterError as exc:
            raise FormatError(str(exc)) from exc
        layers.append(Layer(W.astype(np.float64), b.astype(np.float64), act))
    if pos != len(blob):
        raise FormatError(f"{len(blob) - pos} trailing bytes")
    try:
        return Network(layers)
    except DimensionError as exc:
        raise FormatError(str(exc)) from exc


def save_checkpoint(net: Network, path) -> None:
    Path(path).write_bytes(dumps_checkpoint(net))


def load_checkpoint(path) -> Network:
    return loads_checkpoint(Path(path).read_bytes())
