"""Dense feed-forward networks with hand-written reverse-mode gradients.

Only the fixed encoder/decoder topology of the VAE is differentiated here,
so there is no graph machinery: ``forward`` records what ``backward`` needs
and the caller chains the pieces by hand.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Sequence

import numpy as np

ACTIVATIONS = ("identity", "tanh", "relu")
_TAG = {"identity": 0, "tanh": 1, "relu": 2}
_NAME = {v: k for k, v in _TAG.items()}

MAGIC = b"DVAE"
FORMAT_VERSION = 1


class ShapeError(ValueError):
    pass


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.activation not in _TAG:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.weight.shape[0] != self.bias.shape[0]:
            raise ShapeError(
                f"weight {self.weight.shape} and bias {self.bias.shape} do not match")

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class DenseNetwork:
    layers: list[Layer]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if b.n_in != a.n_out:
                raise ShapeError(
                    f"layer {i + 1} expects {b.n_in} inputs but layer {i} "
                    f"produces {a.n_out}")

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    def parameters(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order (W0, b0, W1, b1, ...)."""
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def copy(self) -> "DenseNetwork":
        return DenseNetwork([Layer(l.weight.copy(), l.bias.copy(), l.activation)
                             for l in self.layers])

    @classmethod
    def init(cls, sizes: Sequence[int], activation: str = "tanh",
             out_activation: str = "identity", seed: int = 0) -> "DenseNetwork":
        """Glorot-uniform initialised network with zero biases.

        ``sizes`` lists every width including input and output, e.g.
        ``(64, 256, 256, 32)``.
        """
        if len(sizes) < 2:
            raise ValueError("sizes must include input and output widths")
        rng = np.random.default_rng(seed)
        layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            limit = np.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-limit, limit, size=(n_out, n_in))
            act = out_activation if i == len(sizes) - 2 else activation
            layers.append(Layer(w, np.zeros(n_out), act))
        return cls(layers)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]  # input of each layer
    preacts: list[np.ndarray]  # affine output of each layer
    output: np.ndarray


@dataclass
class GradientSet:
    """Gradients aligned with ``DenseNetwork.parameters()``.

    ``d_input`` is the gradient with respect to the network input, which the
    VAE needs to chain the decoder into the encoder.
    """
    grads: list[np.ndarray]
    d_input: np.ndarray | None = None

    def __iter__(self):
        return iter(self.grads)

    def __len__(self):
        return len(self.grads)


def _activate(z: np.ndarray, name: str) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _activation_grad(z: np.ndarray, a: np.ndarray, name: str) -> np.ndarray:
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0).astype(np.float64)
    return np.ones_like(z)


def forward(net: DenseNetwork, batch: np.ndarray, return_cache: bool = False):
    """Evaluate ``net`` on a ``(B, n_in)`` batch.

    With ``return_cache=True`` returns ``(output, cache)`` for ``backward``.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.n_in:
        raise ShapeError(f"batch of shape {x.shape} does not match network "
                         f"input width {net.n_in}")
    inputs, preacts = [], []
    h = x
    for layer in net.layers:
        inputs.append(h)
        z = h @ layer.weight.T + layer.bias
        preacts.append(z)
        h = _activate(z, layer.activation)
    if return_cache:
        return h, ForwardCache(inputs, preacts, h)
    return h


def backward(net: DenseNetwork, cache: ForwardCache | None,
             upstream_grad: np.ndarray) -> GradientSet:
    """Reverse-mode gradients given dLoss/dOutput for a cached forward pass."""
    if cache is None or len(cache.inputs) != len(net.layers):
        raise ValueError("backward needs the cache of a forward pass on this network")
    g = np.asarray(upstream_grad, dtype=np.float64)
    if g.shape != cache.output.shape:
        raise ShapeError(f"upstream gradient {g.shape} does not match output "
                         f"{cache.output.shape}")
    grads: list[np.ndarray] = [None] * (2 * len(net.layers))  # type: ignore[list-item]
    n_layers = len(net.layers)
    for i in range(n_layers - 1, -1, -1):
        layer = net.layers[i]
        z = cache.preacts[i]
        a = cache.output if i == n_layers - 1 else cache.inputs[i + 1]
        dz = g * _activation_grad(z, a, layer.activation)
        grads[2 * i] = dz.T @ cache.inputs[i]
        grads[2 * i + 1] = dz.sum(axis=0)
        g = dz @ layer.weight
    return GradientSet(grads, d_input=g)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState) -> AdamState:
    """Bias-corrected adaptive-moment update, applied to ``params`` in place.

    A step with any non-finite gradient is rejected before touching the
    parameters or the moment accumulators.
    """
    grads = list(grads)
    if len(grads) != len(params):
        raise ShapeError(f"{len(grads)} gradients for {len(params)} parameters")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ShapeError(f"gradient {i} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {i}; step rejected")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]

    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if state.lr == 0.0:
            continue
        p -= (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
    return state


def finite_difference_check(net, loss_fn: Callable, inputs, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``net`` is anything with a ``parameters()`` method returning mutable
    arrays; ``loss_fn(net, inputs)`` must return ``(loss, grads)`` with grads
    aligned to those parameters.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = net.parameters()
    _, analytic = loss_fn(net, inputs)
    analytic = [np.array(g, dtype=np.float64) for g in analytic]
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up, _ = loss_fn(net, inputs)
            flat[j] = orig - eps
            down, _ = loss_fn(net, inputs)
            flat[j] = orig
            numeric = (up - down) / (2.0 * eps)
            denom = max(abs(gflat[j]), abs(numeric), 1e-8)
            worst = max(worst, abs(gflat[j] - numeric) / denom)
    return worst


# -- checkpoint format -------------------------------------------------------
# little-endian: b"DVAE", u32 version, u32 layer count, then per layer
# u8 activation tag, u32 rows, u32 cols, rows*cols f64 (row-major W), rows f64 (b)

def write_network(fh: BinaryIO, net: DenseNetwork) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<II", FORMAT_VERSION, len(net.layers)))
    for layer in net.layers:
        rows, cols = layer.weight.shape
        fh.write(struct.pack("<BII", _TAG[layer.activation], rows, cols))
        fh.write(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("truncated checkpoint")
    return buf


def read_network(fh: BinaryIO) -> DenseNetwork:
    if _read_exact(fh, 4) != MAGIC:
        raise ValueError("not a DVAE checkpoint (bad magic)")
    version, n_layers = struct.unpack("<II", _read_exact(fh, 8))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    layers = []
    for _ in range(n_layers):
        tag, rows, cols = struct.unpack("<BII", _read_exact(fh, 9))
        if tag not in _NAME:
            raise ValueError(f"unknown activation tag {tag}")
        w = np.frombuffer(_read_exact(fh, 8 * rows * cols), dtype="<f8")
        b = np.frombuffer(_read_exact(fh, 8 * rows), dtype="<f8")
        layers.append(Layer(w.reshape(rows, cols).astype(np.float64),
                            b.astype(np.float64), _NAME[tag]))
    return DenseNetwork(layers)


def save_network(path, net: DenseNetwork) -> None:
    with open(path, "wb") as fh:
        write_network(fh, net)


def load_network(path) -> DenseNetwork:
    with open(path, "rb") as fh:
        return read_network(fh)
