"""Reverse-mode automatic differentiation over dense float64 arrays.

The models in this package are tiny (lists of at most a few dozen
instruments, feature widths below ten), so everything runs on plain
numpy arrays in double precision. Each operation builds a node of a
computation graph that is recorded implicitly through parent links and
torn down again after every backward pass; a fresh graph is built for
every forward pass.
"""

from __future__ import annotations

import os

import numpy as np

LAYER_NORM_EPS = 1e-6


class GraphError(ValueError):
    """Raised when an operation is applied to incompatible tensors."""


class ConfigError(ValueError):
    """Raised for invalid configuration values (e.g. dropout rate >= 1)."""


class Tensor:
    """One node of the computation graph.

    ``data`` is always a float64 ndarray. Non-leaf nodes carry their
    parents and a closure that pushes the output gradient back to them.
    """

    __slots__ = ("data", "grad", "parents", "_push_grad")

    def __init__(self, data, parents=(), push_grad=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self._push_grad = push_grad

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        kind = "Parameter" if isinstance(self, Parameter) else "Tensor"
        return f"<{kind} shape={self.data.shape}>"


class Parameter(Tensor):
    """Trainable leaf tensor. Leaves are the only nodes whose gradients
    survive a backward pass."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(data)


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def constant(value) -> Tensor:
    """Wrap an array as a non-trainable graph constant."""
    return _as_tensor(value)


def _accumulate(node: Tensor, grad: np.ndarray) -> None:
    if node.grad is None:
        node.grad = grad.copy()
    else:
        node.grad += grad


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitive operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise GraphError(f"matmul expects 2-D tensors, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise GraphError(f"matmul shape mismatch: {a.data.shape} x {b.data.shape}")
    out = Tensor(a.data @ b.data, parents=(a, b))

    def push(grad):
        _accumulate(a, grad @ b.data.T)
        _accumulate(b, a.data.T @ grad)

    out._push_grad = push
    return out


def transpose(t: Tensor) -> Tensor:
    if t.data.ndim != 2:
        raise GraphError(f"transpose expects a 2-D tensor, got {t.data.shape}")
    out = Tensor(t.data.T, parents=(t,))
    out._push_grad = lambda grad: _accumulate(t, grad.T)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, parents=(a, b))

    def push(grad):
        _accumulate(a, _unbroadcast(grad, a.data.shape))
        _accumulate(b, _unbroadcast(grad, b.data.shape))

    out._push_grad = push
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, parents=(a, b))

    def push(grad):
        _accumulate(a, _unbroadcast(grad * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(grad * a.data, b.data.shape))

    out._push_grad = push
    return out


def neg(t: Tensor) -> Tensor:
    out = Tensor(-t.data, parents=(t,))
    out._push_grad = lambda grad: _accumulate(t, -grad)
    return out


def tensor_sum(t: Tensor) -> Tensor:
    out = Tensor(t.data.sum(), parents=(t,))
    out._push_grad = lambda grad: _accumulate(t, np.broadcast_to(grad, t.data.shape).astype(np.float64))
    return out


def tensor_mean(t: Tensor) -> Tensor:
    n = t.data.size
    out = Tensor(t.data.mean(), parents=(t,))
    out._push_grad = lambda grad: _accumulate(t, np.broadcast_to(grad / n, t.data.shape).astype(np.float64))
    return out


def elu(t: Tensor) -> Tensor:
    """x for x > 0, exp(x) - 1 otherwise, elementwise."""
    positive = t.data > 0
    expm1 = np.expm1(t.data)
    out = Tensor(np.where(positive, t.data, expm1), parents=(t,))
    # d/dx = 1 for x > 0, exp(x) = out + 1 otherwise
    local = np.where(positive, 1.0, expm1 + 1.0)
    out._push_grad = lambda grad: _accumulate(t, grad * local)
    return out


def softmax_rows(t: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, stabilised by max subtraction."""
    if t.data.ndim != 2 or t.data.shape[1] < 1:
        raise GraphError(f"softmax_rows expects a 2-D tensor with >= 1 column, got {t.data.shape}")
    shifted = t.data - t.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y, parents=(t,))

    def push(grad):
        dot = (grad * y).sum(axis=1, keepdims=True)
        _accumulate(t, y * (grad - dot))

    out._push_grad = push
    return out


def log_softmax_rows(t: Tensor) -> Tensor:
    """Numerically stable log(softmax) over rows."""
    if t.data.ndim != 2 or t.data.shape[1] < 1:
        raise GraphError(f"log_softmax_rows expects a 2-D tensor with >= 1 column, got {t.data.shape}")
    shifted = t.data - t.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    y = shifted - log_z
    softmax = np.exp(y)
    out = Tensor(y, parents=(t,))

    def push(grad):
        _accumulate(t, grad - softmax * grad.sum(axis=1, keepdims=True))

    out._push_grad = push
    return out


def layer_norm(t: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise each row of ``t`` to zero mean / unit variance, then
    apply the per-column affine transform ``gain * xhat + bias``."""
    if t.data.ndim != 2:
        raise GraphError(f"layer_norm expects a 2-D tensor, got {t.data.shape}")
    d = t.data.shape[1]
    if gain.data.size != d or bias.data.size != d:
        raise GraphError(
            f"layer_norm gain/bias must match last axis {d}, got {gain.data.size} and {bias.data.size}"
        )
    g = gain.data.reshape(1, d)
    b = bias.data.reshape(1, d)
    mean = t.data.mean(axis=1, keepdims=True)
    centered = t.data - mean
    var = (centered ** 2).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = Tensor(xhat * g + b, parents=(t, gain, bias))

    def push(grad):
        _accumulate(gain, (grad * xhat).sum(axis=0).reshape(gain.data.shape))
        _accumulate(bias, grad.sum(axis=0).reshape(bias.data.shape))
        dxhat = grad * g
        # standard layer-norm backward over the last axis
        dx = inv_std / d * (
            d * dxhat
            - dxhat.sum(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
        )
        _accumulate(t, dx)

    out._push_grad = push
    return out


def dropout(t: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero elements with probability ``rate`` and scale
    survivors by 1/(1-rate) at training time; identity in evaluation mode."""
    if rate < 0.0 or rate >= 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return t
    if rng is None:
        raise ConfigError("dropout in training mode requires a seeded generator")
    keep = (rng.random(t.data.shape) >= rate) / (1.0 - rate)
    out = Tensor(t.data * keep, parents=(t,))
    out._push_grad = lambda grad: _accumulate(t, grad * keep)
    return out


def concat_cols(tensors: list[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along the column axis."""
    if not tensors:
        raise GraphError("concat_cols needs at least one tensor")
    rows = tensors[0].data.shape[0]
    for t in tensors:
        if t.data.ndim != 2 or t.data.shape[0] != rows:
            raise GraphError(f"concat_cols row mismatch: {[t.data.shape for t in tensors]}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=1), parents=tuple(tensors))
    widths = [t.data.shape[1] for t in tensors]

    def push(grad):
        offset = 0
        for t, w in zip(tensors, widths):
            _accumulate(t, grad[:, offset:offset + w])
            offset += w

    out._push_grad = push
    return out


# ---------------------------------------------------------------------------
# backward pass


def topo_order(root: Tensor) -> list[Tensor]:
    """Topologically ordered node list of the graph below ``root``
    (inputs before consumers). Iterative to avoid recursion limits."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> dict[Parameter, np.ndarray]:
    """Run reverse-mode differentiation from a scalar loss.

    Returns a map from every Parameter reachable from ``loss`` to its
    gradient array. Intermediate buffers and graph links are released, so
    a graph can only be differentiated once.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    order = topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    grads: dict[Parameter, np.ndarray] = {}
    for node in reversed(order):
        if node._push_grad is not None and node.grad is not None:
            node._push_grad(node.grad)
    for node in order:
        if isinstance(node, Parameter):
            if node.grad is not None:
                grads[node] = node.grad
        node.grad = None
        if node._push_grad is not None:
            node.parents = ()
            node._push_grad = None
    return grads


# ---------------------------------------------------------------------------
# Adam optimiser


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params: list[Parameter]):
        self.step = 0
        self.m = {p: np.zeros_like(p.data) for p in params}
        self.v = {p: np.zeros_like(p.data) for p in params}


def adam_step(
    params: list[Parameter],
    grads: dict[Parameter, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One Adam update with bias correction, in place on ``params``.

    Parameters absent from ``grads`` are treated as having zero gradient.
    """
    state.step += 1
    t = state.step
    for p in params:
        g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise GraphError(f"gradient shape {g.shape} does not match parameter shape {p.data.shape}")
        m = state.m[p]
        v = state.v[p]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# weight initialisation and checkpoint serialisation


def glorot_uniform(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_in, n_out))


def save_checkpoint(path, named_params) -> None:
    """Write parameters as an ordered textual checkpoint.

    Line format: ``<name> <d0>x<d1>x... <hex floats...>``. Values are
    serialised with ``float.hex`` so the round trip is bit-exact.
    """
    entries = [(name, np.asarray(p.data if isinstance(p, Tensor) else p)) for name, p in named_params]
    parent = os.path.dirname(str(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"tensors {len(entries)}\n")
        for name, arr in entries:
            if any(ch.isspace() for ch in name):
                raise ValueError(f"checkpoint names must not contain whitespace: {name!r}")
            dims = "x".join(str(d) for d in arr.shape) if arr.shape else "scalar"
            values = " ".join(float(v).hex() for v in arr.reshape(-1))
            fh.write(f"{name} {dims} {values}\n")


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint written by :func:`save_checkpoint`; returns an
    insertion-ordered name -> array map."""
    out: dict[str, np.ndarray] = {}
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().split()
        if len(header) != 2 or header[0] != "tensors":
            raise ValueError(f"not a checkpoint file: {path}")
        count = int(header[1])
        for _ in range(count):
            fields = fh.readline().split()
            name, dims = fields[0], fields[1]
            shape = () if dims == "scalar" else tuple(int(d) for d in dims.split("x"))
            values = np.array([float.fromhex(v) for v in fields[2:]], dtype=np.float64)
            out[name] = values.reshape(shape)
    return out
