"""Dense float64 tensors with tape-based reverse-mode autodiff, plus Adam.

Operations record onto the innermost active :class:`Tape`. Outside a tape
block nothing is recorded, which is how rollout/inference code runs without
paying for graph bookkeeping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64
MASK_VALUE = -1e9


class DimensionError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return mul(self, 1.0 / other) if np.isscalar(other) else div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_not_scalar(t: Tensor):
    raise ContractError(f"expected a scalar tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as operations execute, so the list is already in
    topological order.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def record(self, inputs, output: Tensor, vjp) -> None:
        self.nodes.append(Node(tuple(inputs), output, vjp))

    def __len__(self) -> int:
        return len(self.nodes)


_ACTIVE: list[Tape] = []


def _wrap(out: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    t = Tensor(out)
    if _ACTIVE and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        _ACTIVE[-1].record(inputs, t, vjp)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _wrap(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _wrap(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _wrap(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _wrap(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _wrap(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _wrap(np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _wrap(out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x: Tensor) -> Tensor:
    return _wrap(np.maximum(x.data, 0.0), (x,), lambda g: (g * (x.data > 0),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    z = x.data
    z2 = z * z
    inner = _GELU_C * z * (1.0 + 0.044715 * z2)
    t = np.tanh(inner)
    out = 0.5 * z * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * z2)
        return (g * (0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * dinner),)

    return _wrap(out, (x,), vjp)


# ---------------------------------------------------------------------------
# shape


def reshape(x: Tensor, shape) -> Tensor:
    return _wrap(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _wrap(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _wrap(out, (x,), vjp)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return mul(tensor_sum(x, axis=axis), 1.0 / n)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def vjp(g):
        d = np.zeros_like(table.data)
        np.add.at(d, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (d,)

    return _wrap(table.data[ids], (table,), vjp)


def take_positions(x: Tensor, positions) -> Tensor:
    """Select x[b, positions[b], :] for a (B, T, d) tensor."""
    positions = np.asarray(positions, dtype=np.int64)
    rows = np.arange(x.shape[0])

    def vjp(g):
        d = np.zeros_like(x.data)
        d[rows, positions] = g
        return (d,)

    return _wrap(x.data[rows, positions], (x,), vjp)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, batched over leading dims (numpy broadcasting rules)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.data.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return _unbroadcast(ga, a.shape), gb

    return _wrap(out, (a, b), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    gamma, beta = as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _wrap(out, (x, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# softmax family


def _check_temperature(temperature: float) -> None:
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")


def softmax_array(z: np.ndarray, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    _check_temperature(temperature)
    s = np.asarray(z, dtype=DTYPE) / temperature
    s = s - s.max(axis=axis, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_array(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=DTYPE)
    s = z - z.max(axis=axis, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def softmax(z: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    z = as_tensor(z)
    if z.size == 0:
        raise DimensionError("softmax of an empty tensor")
    p = softmax_array(z.data, temperature, axis)

    def vjp(g):
        return ((p * (g - (g * p).sum(axis=axis, keepdims=True))) / temperature,)

    return _wrap(p, (z,), vjp)


def log_softmax(z: Tensor, axis: int = -1) -> Tensor:
    ls = log_softmax_array(z.data, axis)

    def vjp(g):
        return (g - np.exp(ls) * g.sum(axis=axis, keepdims=True),)

    return _wrap(ls, (z,), vjp)


def cross_entropy(logits: Tensor, target_index: int) -> Tensor:
    """-log softmax(logits)[target] for a single logit vector."""
    logits = as_tensor(logits)
    n = logits.shape[-1]
    if logits.data.ndim != 1:
        raise DimensionError(f"cross_entropy expects a vector, got shape {logits.shape}")
    if not 0 <= target_index < n:
        raise ParameterError(f"target index {target_index} out of range for {n} classes")
    return token_nll(reshape(logits, (1, n)), [target_index])


def token_nll(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted sum of per-position cross-entropies.

    ``logits`` is (..., V); ``targets`` has the leading shape. A weight of 0
    removes a position entirely (used for prompt and padding masks).
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(
            f"logit rows {logits.shape[:-1]} do not match targets {targets.shape}"
        )
    w = np.ones(targets.shape) if weights is None else np.asarray(weights, dtype=DTYPE)
    ls = log_softmax_array(logits.data)
    picked = np.take_along_axis(ls, targets[..., None], axis=-1)[..., 0]
    out = -(w * picked).sum()

    def vjp(g):
        d = np.exp(ls)
        np.put_along_axis(
            d, targets[..., None], np.take_along_axis(d, targets[..., None], -1) - 1.0, -1
        )
        return (d * (w * g)[..., None],)

    return _wrap(np.asarray(out), (logits,), vjp)


def sequence_nll(logit_rows: Tensor, token_ids) -> Tensor:
    """Negative log-probability of ``token_ids`` given one logit row per token."""
    token_ids = list(token_ids)
    if logit_rows.data.ndim != 2 or logit_rows.shape[0] != len(token_ids):
        raise DimensionError(
            f"{len(token_ids)} tokens need {len(token_ids)} logit rows, got {logit_rows.shape}"
        )
    if not token_ids:
        return _wrap(np.asarray(0.0), (logit_rows,), lambda g: (np.zeros(logit_rows.shape),))
    return token_nll(logit_rows, token_ids)


# ---------------------------------------------------------------------------
# backward / verification


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every requires_grad tensor on the tape."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        if not _ACTIVE:
            raise ContractError("no tape given and no tape active")
        tape = _ACTIVE[-1]
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        out = node.output
        out.grad = g if out.grad is None else out.grad + g
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = grads[key] + gi if key in grads else gi
    # whatever remains belongs to leaves
    leaves = {id(i): i for n in tape.nodes for i in n.inputs if i.requires_grad}
    leaves.setdefault(id(loss), loss)
    for key, g in grads.items():
        if key in leaves:
            _accumulate(leaves[key], g)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=DTYPE).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def finite_difference_check(f: Callable[[Tensor], Tensor], point: Tensor, epsilon: float = 1e-5) -> float:
    """Max relative error between backward's gradient and central differences."""
    if not epsilon > 0:
        raise ParameterError("epsilon must be positive")
    x = Tensor(point.data.copy(), requires_grad=True)
    with Tape() as tape:
        loss = f(x)
    backward(loss, tape)
    analytic = x.grad.reshape(-1) if x.grad is not None else np.zeros(x.size)

    flat = x.data.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        hi = f(Tensor(x.data)).item()
        flat[i] = orig - epsilon
        lo = f(Tensor(x.data)).item()
        flat[i] = orig
        numeric[i] = (hi - lo) / (2 * epsilon)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float = 2e-5,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update. Pure: inputs are not modified."""
    if not lr > 0:
        raise ParameterError(f"learning rate must be positive, got {lr}")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("params, grads and optimizer state differ in length")
    t = state.t + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"shape mismatch in adam_step: {p.shape} vs {g.shape}")
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        new_p.append(p - lr * mhat / (np.sqrt(vhat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)


class Adam:
    """Stateful wrapper that updates a list of parameter tensors in place."""

    def __init__(self, params: Sequence[Tensor], lr: float = 2e-5, beta1=0.9, beta2=0.999, eps=1e-8):
        if not lr > 0:
            raise ParameterError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState.zeros_like([p.data for p in self.params])

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new, self.state = adam_step(
            [p.data for p in self.params], grads, self.state, self.lr, self.beta1, self.beta2, self.eps
        )
        for p, d in zip(self.params, new):
            p.data = d
