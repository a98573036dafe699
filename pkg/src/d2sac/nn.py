"""Dense network substrate: tape-based reverse-mode autodiff, Mish/Tanh layers,
sinusoidal step embeddings, Adam with decoupled weight decay, and a flat binary
checkpoint format.

Everything is float64. Tensors are at most 2-D (batch x features); the only
broadcast supported is adding a bias vector to every row.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np

ACTIVATIONS = ("none", "mish", "tanh")
_ACT_TAG = {name: i for i, name in enumerate(ACTIVATIONS)}

CHECKPOINT_MAGIC = b"AGOD"
CHECKPOINT_VERSION = 1


class GraphError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("values", "requires_grad", "name", "__weakref__")

    def __init__(self, values, requires_grad: bool = False, name: str = ""):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.values.reshape(()))

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


def _mish_parts(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # tanh(softplus(x)) = n(n+2) / (n(n+2) + 2) with n = e^x; saturates to 1 past x=20.
    n = np.exp(np.minimum(x, 20.0))
    q = n * (n + 2.0)
    t = np.where(x > 20.0, 1.0, q / (q + 2.0))
    return t, n


def mish(x):
    """x * tanh(softplus(x)), elementwise; scalars in, scalars out."""
    arr = np.asarray(x, dtype=np.float64)
    t, _ = _mish_parts(arr)
    out = arr * t
    return float(out) if out.ndim == 0 else out


def _mish_grad(x: np.ndarray, t: np.ndarray, n: np.ndarray) -> np.ndarray:
    sig = np.where(x > 20.0, 1.0, n / (1.0 + n))
    return t + x * (1.0 - t * t) * sig


def sinusoidal_pos_emb(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of step index ``t`` (scalar or 1-D array).

    Returns ``(dim,)`` for a scalar ``t`` and ``(len(t), dim)`` otherwise; the
    first half holds sin(t * f_k), the second half cos(t * f_k) with
    f_k = 10000^(-2k/dim).
    """
    if dim <= 0 or dim % 2:
        raise ValueError(f"embedding dim must be a positive even number, got {dim}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0):
        raise ValueError("step index must be nonnegative")
    k = np.arange(dim // 2, dtype=np.float64)
    freqs = 10000.0 ** (-2.0 * k / dim)
    args = t_arr[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Backward
    op: str


class ComputeGraph:
    """Records primitive ops in execution order so gradients can be replayed.

    With ``enabled=False`` the same calls just compute values (inference path).
    """

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.tape: list[_Node] = []
        self._recorded: set[int] = set()

    def __len__(self) -> int:
        return len(self.tape)

    def _emit(self, op: str, values: np.ndarray, inputs: tuple[Tensor, ...], backward: Backward) -> Tensor:
        track = self.enabled and any(t.requires_grad for t in inputs)
        out = Tensor(values, requires_grad=track)
        if track:
            self.tape.append(_Node(out, inputs, backward, op))
            self._recorded.add(id(out))
        return out

    # -- primitives -------------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
        av, bv = a.values, b.values
        bm = bv.T if transpose_b else bv
        if av.ndim != 2 or bm.ndim != 2 or av.shape[1] != bm.shape[0]:
            raise ValueError(f"matmul shape mismatch: {av.shape} x {bm.shape}")

        def backward(g):
            ga = g @ bm.T if a.requires_grad else None
            gb = None
            if b.requires_grad:
                gb = g.T @ av if transpose_b else av.T @ g
            return ga, gb

        return self._emit("matmul", av @ bm, (a, b), backward)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        av, bv = a.values, b.values
        row_bias = av.ndim == 2 and bv.ndim == 1
        if not row_bias and av.shape != bv.shape:
            raise ValueError(f"add shape mismatch: {av.shape} + {bv.shape}")
        if row_bias and av.shape[1] != bv.shape[0]:
            raise ValueError(f"bias shape mismatch: {av.shape} + {bv.shape}")

        def backward(g):
            return g, (g.sum(axis=0) if row_bias else g)

        return self._emit("add", av + bv, (a, b), backward)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ValueError(f"sub shape mismatch: {a.shape} - {b.shape}")
        return self._emit("sub", a.values - b.values, (a, b), lambda g: (g, -g))

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ValueError(f"mul shape mismatch: {a.shape} * {b.shape}")
        av, bv = a.values, b.values
        return self._emit("mul", av * bv, (a, b), lambda g: (g * bv, g * av))

    def scale(self, a: Tensor, c) -> Tensor:
        """Multiply by a constant (scalar, or array broadcastable against ``a``)."""
        c = np.asarray(c, dtype=np.float64)
        return self._emit("scale", a.values * c, (a,), lambda g: (g * c,))

    def shift(self, a: Tensor, c) -> Tensor:
        """Add a constant array that carries no gradient."""
        c = np.asarray(c, dtype=np.float64)
        return self._emit("shift", a.values + c, (a,), lambda g: (g,))

    def mish(self, a: Tensor) -> Tensor:
        x = a.values
        t, n = _mish_parts(x)
        return self._emit("mish", x * t, (a,), lambda g: (g * _mish_grad(x, t, n),))

    def tanh(self, a: Tensor) -> Tensor:
        y = np.tanh(a.values)
        return self._emit("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))

    def concat(self, parts: Sequence[Tensor]) -> Tensor:
        vals = [p.values for p in parts]
        if any(v.ndim != 2 for v in vals) or len({v.shape[0] for v in vals}) != 1:
            raise ValueError("concat expects 2-D tensors with equal row counts")
        bounds = np.cumsum([0] + [v.shape[1] for v in vals])

        def backward(g):
            return [g[:, bounds[i]:bounds[i + 1]] for i in range(len(vals))]

        return self._emit("concat", np.concatenate(vals, axis=1), tuple(parts), backward)

    def softmax(self, a: Tensor) -> Tensor:
        x = a.values
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        p = e / e.sum(axis=-1, keepdims=True)

        def backward(g):
            return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

        return self._emit("softmax", p, (a,), backward)

    def log_softmax(self, a: Tensor) -> Tensor:
        x = a.values
        z = x - x.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
        out = z - lse
        p = np.exp(out)

        def backward(g):
            return (g - p * g.sum(axis=-1, keepdims=True),)

        return self._emit("log_softmax", out, (a,), backward)

    def log(self, a: Tensor) -> Tensor:
        x = a.values
        if np.any(x <= 0):
            raise FloatingPointError("log of a nonpositive value")
        return self._emit("log", np.log(x), (a,), lambda g: (g / x,))

    def square(self, a: Tensor) -> Tensor:
        x = a.values
        return self._emit("square", x * x, (a,), lambda g: (2.0 * g * x,))

    def rowdot(self, a: Tensor, b: Tensor) -> Tensor:
        """Per-row dot product of two (B, n) tensors -> (B,)."""
        if a.shape != b.shape or a.values.ndim != 2:
            raise ValueError(f"rowdot shape mismatch: {a.shape} . {b.shape}")
        av, bv = a.values, b.values

        def backward(g):
            return g[:, None] * bv, g[:, None] * av

        return self._emit("rowdot", np.einsum("ij,ij->i", av, bv), (a, b), backward)

    def gather(self, a: Tensor, index) -> Tensor:
        """Pick column ``index[i]`` from row ``i`` -> (B,)."""
        idx = np.asarray(index, dtype=np.int64)
        x = a.values
        rows = np.arange(x.shape[0])

        def backward(g):
            out = np.zeros_like(x)
            np.add.at(out, (rows, idx), g)
            return (out,)

        return self._emit("gather", x[rows, idx], (a,), backward)

    def sum(self, a: Tensor) -> Tensor:
        shape = a.shape
        return self._emit("sum", np.asarray(a.values.sum()), (a,), lambda g: (np.full(shape, g),))

    def mean(self, a: Tensor) -> Tensor:
        shape, n = a.shape, a.values.size
        return self._emit("mean", np.asarray(a.values.mean()), (a,), lambda g: (np.full(shape, g / n),))

    @staticmethod
    def detach(a: Tensor) -> Tensor:
        return Tensor(a.values, requires_grad=False)

    # -- reverse pass -----------------------------------------------------

    def backward(self, loss: Tensor, params: Iterable[Tensor] = ()) -> dict[Tensor, np.ndarray]:
        """Gradient of scalar ``loss`` with respect to every leaf reached.

        Leaves listed in ``params`` but not reached get zero gradients.
        """
        if loss.values.size != 1:
            raise GraphError(f"loss must be a scalar, got shape {loss.shape}")
        params = list(params)
        grads: dict[int, np.ndarray] = {}
        leaves: dict[int, Tensor] = {}
        if loss.requires_grad:
            if id(loss) not in self._recorded:
                raise GraphError("loss was not produced on this graph")
            grads[id(loss)] = np.ones_like(loss.values)
        for node in reversed(self.tape):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key not in self._recorded:
                    leaves[key] = inp
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = np.array(gi, dtype=np.float64, copy=True).reshape(inp.shape)
        out = {leaf: grads[key] for key, leaf in leaves.items()}
        for p in params:
            if p not in out:
                out[p] = np.zeros_like(p.values)
        return out


@dataclass
class DenseLayer:
    weights: Tensor
    biases: Tensor
    activation: str = "none"

    def __post_init__(self):
        if self.activation not in _ACT_TAG:
            raise ValueError(f"unknown activation {self.activation!r}")
        w, b = self.weights.values, self.biases.values
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ValueError(f"inconsistent layer shapes: weights {w.shape}, biases {b.shape}")

    @classmethod
    def init(cls, in_dim: int, out_dim: int, activation: str, rng: np.random.Generator) -> "DenseLayer":
        bound = np.sqrt(1.0 / in_dim)
        w = rng.uniform(-bound, bound, size=(out_dim, in_dim))
        return cls(Tensor(w, True), Tensor(np.zeros(out_dim), True), activation)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.weights, self.biases]

    def __call__(self, graph: ComputeGraph, x: Tensor) -> Tensor:
        h = graph.add(graph.matmul(x, self.weights, transpose_b=True), self.biases)
        if self.activation == "mish":
            return graph.mish(h)
        if self.activation == "tanh":
            return graph.tanh(h)
        return h


def forward(graph: ComputeGraph, layers: Sequence[DenseLayer], x: Tensor) -> Tensor:
    if x.values.ndim == 1:
        x = Tensor(x.values[None, :], x.requires_grad)
    if layers and x.shape[1] != layers[0].in_dim:
        raise ValueError(f"input dim {x.shape[1]} does not match first layer ({layers[0].in_dim})")
    for layer in layers:
        x = layer(graph, x)
    return x


def build_mlp(dims: Sequence[int], activations: Sequence[str], rng: np.random.Generator) -> list[DenseLayer]:
    if len(activations) != len(dims) - 1:
        raise ValueError("need one activation per layer")
    return [DenseLayer.init(i, o, a, rng) for i, o, a in zip(dims[:-1], dims[1:], activations)]


def parameters(layers: Iterable[DenseLayer]) -> list[Tensor]:
    return [p for layer in layers for p in layer.parameters()]


def copy_layers(layers: Sequence[DenseLayer]) -> list[DenseLayer]:
    return [
        DenseLayer(Tensor(l.weights.values.copy(), True), Tensor(l.biases.values.copy(), True), l.activation)
        for l in layers
    ]


# -- optimizer --------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor], **kw) -> "AdamState":
        return cls([np.zeros_like(p.values) for p in params], [np.zeros_like(p.values) for p in params], **kw)


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
) -> None:
    """Bias-corrected Adam with decoupled weight decay, updating ``params`` in place.

    The whole step is rejected (nothing mutated) if any gradient is non-finite.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state disagree in length")
    for p, g in zip(params, grads):
        if p.values.shape != np.shape(g):
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {p.values.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {p!r}; step rejected")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if weight_decay:
            update = update + weight_decay * p.values
        p.values -= lr * update


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.state = AdamState.zeros_like(self.params)

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        adam_step(self.params, [grads[p] for p in self.params], self.state, self.lr, self.weight_decay)


# -- checkpoints ------------------------------------------------------------


def write_layers(fh: BinaryIO, layers: Sequence[DenseLayer]) -> None:
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(layers)))
    for layer in layers:
        fh.write(struct.pack("<III", layer.in_dim, layer.out_dim, _ACT_TAG[layer.activation]))
        fh.write(np.ascontiguousarray(layer.weights.values, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(layer.biases.values, dtype="<f8").tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("truncated checkpoint")
    return buf


def read_layers(fh: BinaryIO) -> list[DenseLayer]:
    if _read_exact(fh, 4) != CHECKPOINT_MAGIC:
        raise ValueError("not an AGOD checkpoint")
    version, count = struct.unpack("<II", _read_exact(fh, 8))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    layers = []
    for _ in range(count):
        in_dim, out_dim, tag = struct.unpack("<III", _read_exact(fh, 12))
        if tag >= len(ACTIVATIONS):
            raise ValueError(f"bad activation tag {tag}")
        w = np.frombuffer(_read_exact(fh, 8 * in_dim * out_dim), dtype="<f8").reshape(out_dim, in_dim)
        b = np.frombuffer(_read_exact(fh, 8 * out_dim), dtype="<f8")
        layers.append(DenseLayer(Tensor(w.astype(np.float64), True), Tensor(b.astype(np.float64), True), ACTIVATIONS[tag]))
    return layers


def save_checkpoint(path, layers: Sequence[DenseLayer]) -> None:
    with open(path, "wb") as fh:
        write_layers(fh, layers)


def load_checkpoint(path) -> list[DenseLayer]:
    with open(path, "rb") as fh:
        return read_layers(fh)


def checkpoint_bytes(layers: Sequence[DenseLayer]) -> bytes:
    buf = io.BytesIO()
    write_layers(buf, layers)
    return buf.getvalue()
