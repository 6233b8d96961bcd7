"""Dense reverse-mode differentiation over numpy arrays, small MLPs and Adam.

Only the handful of primitives needed by the training losses are provided:
affine maps, leaky-ReLU, tanh, exp, log, logsumexp, sums/means, elementwise
arithmetic with broadcasting, and a fused pairwise ground-cost op.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from otinform.measure import GroundCost, cost_matrix

LEAKY_SLOPE = 0.2
MAGIC = b"MLP1"
OUTPUT_ACTIVATIONS = ("identity", "tanh", "leaky_relu")


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str, stage: str = "forward"):
        super().__init__(f"non-finite value produced by {op!r} during {stage} pass")
        self.op = op
        self.stage = stage


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Array node on the tape; ``backward`` fills ``.grad`` of every ancestor."""

    __slots__ = ("value", "grad", "parents", "vjp", "op")
    __array_priority__ = 100

    def __init__(self, value, parents: tuple = (), vjp: Callable | None = None, op: str = "leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.vjp = vjp
        self.op = op
        if parents and not np.isfinite(self.value.sum()):
            raise NonFiniteError(op)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    def backward(self) -> None:
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p in node.parents if id(p) not in seen)
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node.vjp is None or node.grad is None:
                continue
            for parent, g in zip(node.parents, node.vjp(node.grad)):
                if g is None:
                    continue
                if not np.isfinite(np.sum(g)):
                    raise NonFiniteError(node.op, "backward")
                parent.grad = g if parent.grad is None else parent.grad + g

    # arithmetic

    def __add__(self, other):
        other = as_tensor(other)
        return Tensor(self.value + other.value, (self, other),
                      lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)), "add")

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.value, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        return Tensor(self.value * other.value, (self, other),
                      lambda g: (_unbroadcast(g * other.value, self.shape),
                                 _unbroadcast(g * self.value, other.shape)), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out = self.value / other.value
        return Tensor(out, (self, other),
                      lambda g: (_unbroadcast(g / other.value, self.shape),
                                 _unbroadcast(-g * out / other.value, other.shape)), "div")

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __matmul__(self, other):
        other = as_tensor(other)
        return Tensor(self.value @ other.value, (self, other),
                      lambda g: (g @ other.value.T, self.value.T @ g), "matmul")

    def __rmatmul__(self, other):
        return as_tensor(other) @ self

    def __getitem__(self, index):
        def vjp(g):
            full = np.zeros_like(self.value)
            full[index] = g
            return (full,)
        return Tensor(self.value[index], (self,), vjp, "getitem")

    def reshape(self, *shape):
        return Tensor(self.value.reshape(*shape), (self,), lambda g: (g.reshape(self.shape),), "reshape")

    @property
    def T(self):
        return Tensor(self.value.T, (self,), lambda g: (g.T,), "transpose")

    # reductions

    def sum(self, axis=None, keepdims: bool = False):
        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, self.shape).copy(),)
        return Tensor(self.value.sum(axis=axis, keepdims=keepdims), (self,), vjp, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        count = self.value.size if axis is None else self.shape[axis]
        return self.sum(axis, keepdims) * (1.0 / count)

    def logsumexp(self, axis: int, keepdims: bool = False):
        amax = np.max(self.value, axis=axis, keepdims=True)
        e = np.exp(self.value - amax)
        s = e.sum(axis=axis, keepdims=True)
        out = np.log(s) + amax
        soft = e / s

        def vjp(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (g * soft,)
        return Tensor(out if keepdims else np.squeeze(out, axis), (self,), vjp, "logsumexp")

    # elementwise

    def exp(self):
        out = np.exp(self.value)
        return Tensor(out, (self,), lambda g: (g * out,), "exp")

    def log(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(self.value)
        return Tensor(out, (self,), lambda g: (g / self.value,), "log")

    def tanh(self):
        out = np.tanh(self.value)
        return Tensor(out, (self,), lambda g: (g * (1.0 - out * out),), "tanh")

    def leaky_relu(self, slope: float = LEAKY_SLOPE):
        scale = np.where(self.value > 0, 1.0, slope)
        return Tensor(self.value * scale, (self,), lambda g: (g * scale,), "leaky_relu")

    def square(self):
        return Tensor(self.value * self.value, (self,), lambda g: (2.0 * g * self.value,), "square")

    def abs(self):
        sign = np.sign(self.value)
        return Tensor(np.abs(self.value), (self,), lambda g: (g * sign,), "abs")

    def clip_max(self, upper: float):
        mask = self.value <= upper
        return Tensor(np.minimum(self.value, upper), (self,), lambda g: (g * mask,), "clip_max")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def pairwise_cost(cost: GroundCost | str, X, Y) -> Tensor:
    """``C[i, j] = c(X[i], Y[j])`` with a fused backward pass."""
    cost = GroundCost.parse(cost)
    X, Y = as_tensor(X), as_tensor(Y)
    out = cost_matrix(cost, X.value, Y.value)
    if cost is GroundCost.L1:
        signs = [np.sign(X.value[:, k, None] - Y.value[None, :, k]) for k in range(X.shape[1])]

        def vjp(g):
            gx = np.column_stack([(g * s).sum(axis=1) for s in signs])
            gy = -np.column_stack([(g * s).sum(axis=0) for s in signs])
            return (gx, gy)
    else:

        def vjp(g):
            gx = 2.0 * (g.sum(axis=1)[:, None] * X.value - g @ Y.value)
            gy = 2.0 * (g.sum(axis=0)[:, None] * Y.value - g.T @ X.value)
            return (gx, gy)
    return Tensor(out, (X, Y), vjp, f"cost_{cost.value}")


def value_and_grad(fn: Callable[[Tensor], Tensor], params) -> tuple[float, np.ndarray]:
    """Evaluate a scalar loss of a parameter vector and its exact gradient."""
    theta = Tensor(np.array(params, dtype=np.float64))
    loss = fn(theta)
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    loss.backward()
    g = np.zeros_like(theta.value) if theta.grad is None else theta.grad
    return loss.item(), g


def grad(fn: Callable[[Tensor], Tensor], params) -> np.ndarray:
    return value_and_grad(fn, params)[1]


def finite_difference(fn: Callable[[np.ndarray], float], params, coords, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function at selected parameter coordinates."""
    params = np.array(params, dtype=np.float64)
    out = np.empty(len(coords))
    for k, i in enumerate(coords):
        old = params[i]
        params[i] = old + h
        up = fn(params)
        params[i] = old - h
        down = fn(params)
        params[i] = old
        out[k] = (up - down) / (2 * h)
    return out


class Mlp:
    """Fully connected network with leaky-ReLU hidden layers.

    Parameters live in one flat vector, laid out layer by layer as the
    row-major ``in x out`` weight matrix followed by the bias.
    """

    def __init__(self, layer_sizes: Sequence[int], output_activation: str = "identity",
                 seed=0, params: np.ndarray | None = None):
        self.layer_sizes = tuple(int(s) for s in layer_sizes)
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ValueError(f"invalid layer sizes {layer_sizes}")
        if output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"output activation must be one of {OUTPUT_ACTIVATIONS}")
        self.output_activation = output_activation
        self._slices = []
        offset = 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = slice(offset, offset + fan_in * fan_out)
            b = slice(w.stop, w.stop + fan_out)
            self._slices.append((w, b, fan_in, fan_out))
            offset = b.stop
        self.n_params = offset
        if params is None:
            params = self.init_params(seed)
        params = np.array(params, dtype=np.float64)
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {params.shape}")
        self.params = params

    def init_params(self, seed) -> np.ndarray:
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        theta = np.zeros(self.n_params)
        for w, _, fan_in, fan_out in self._slices:
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            theta[w] = rng.uniform(-bound, bound, size=fan_in * fan_out)
        return theta

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def copy(self) -> "Mlp":
        return Mlp(self.layer_sizes, self.output_activation, params=self.params.copy())

    def _check_input(self, X):
        if X.ndim != 2 or X.shape[1] != self.in_dim:
            raise ValueError(f"expected input of shape (batch, {self.in_dim}), got {X.shape}")

    def __call__(self, X, params=None):
        """Forward pass; returns a ``Tensor`` if ``params`` or ``X`` is one, else an array."""
        params = self.params if params is None else params
        if not isinstance(params, Tensor) and not isinstance(X, Tensor):
            return self.forward(X, params)
        self._check_input(value_of(X))
        h = as_tensor(X)
        theta = as_tensor(params)
        last = len(self._slices) - 1
        for k, (w, b, fan_in, fan_out) in enumerate(self._slices):
            h = h @ theta[w].reshape(fan_in, fan_out) + theta[b]
            h = self._activate(h, k == last)
        return h

    def forward(self, X, params=None) -> np.ndarray:
        params = self.params if params is None else np.asarray(params)
        h = np.asarray(X, dtype=np.float64)
        self._check_input(h)
        last = len(self._slices) - 1
        for k, (w, b, fan_in, fan_out) in enumerate(self._slices):
            h = h @ params[w].reshape(fan_in, fan_out) + params[b]
            if k < last or self.output_activation == "leaky_relu":
                h = np.where(h > 0, h, LEAKY_SLOPE * h)
            elif self.output_activation == "tanh":
                h = np.tanh(h)
        return h

    def _activate(self, h: Tensor, is_last: bool) -> Tensor:
        if not is_last or self.output_activation == "leaky_relu":
            return h.leaky_relu()
        if self.output_activation == "tanh":
            return h.tanh()
        return h

    def save(self, path) -> None:
        header = MAGIC + struct.pack(f"<I{len(self.layer_sizes)}I", len(self.layer_sizes), *self.layer_sizes)
        Path(path).write_bytes(header + self.params.astype("<f8").tobytes())

    @classmethod
    def load(cls, path, output_activation: str = "identity") -> "Mlp":
        data = Path(path).read_bytes()
        if data[:4] != MAGIC:
            raise ValueError(f"{path}: bad magic {data[:4]!r}")
        try:
            (n_layers,) = struct.unpack_from("<I", data, 4)
            sizes = struct.unpack_from(f"<{n_layers}I", data, 8)
        except struct.error as exc:
            raise ValueError(f"{path}: truncated header") from exc
        offset = 8 + 4 * n_layers
        expected = sum((a + 1) * b for a, b in zip(sizes[:-1], sizes[1:]))
        body = data[offset:]
        if len(body) != 8 * expected:
            raise ValueError(f"{path}: expected {expected} float64 parameters, found {len(body) / 8:g}")
        params = np.frombuffer(body, dtype="<f8").astype(np.float64)
        if not np.all(np.isfinite(params)):
            raise ValueError(f"{path}: non-finite parameters")
        return cls(sizes, output_activation, params=params)


@dataclass(frozen=True, eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 2e-4
    beta1: float = 0.0
    beta2: float = 0.9
    eps_hat: float = 1e-8

    @classmethod
    def zeros(cls, n: int, lr: float = 2e-4, beta1: float = 0.0, beta2: float = 0.9,
              eps_hat: float = 1e-8) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, lr, beta1, beta2, eps_hat)


def adam_step(state: AdamState, params: np.ndarray, gradient: np.ndarray) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam descent step; returns new params and state."""
    if params.shape != gradient.shape or params.shape != state.m.shape:
        raise ValueError("params, gradient and moments must have the same length")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * gradient
    v = state.beta2 * state.v + (1.0 - state.beta2) * gradient * gradient
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps_hat)
    return new_params, replace(state, m=m, v=v, step=t)
