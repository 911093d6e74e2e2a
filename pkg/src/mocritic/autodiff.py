"""Small dense-tensor engine with reverse-mode differentiation.

Every learned component in the package (critic, toy denoiser, MLP ensemble)
is composed from the primitives defined here.  Values are float64 numpy
arrays; the graph is recorded implicitly through parent links and replayed
in reverse topological order by :class:`Tape`.

Set ``MC_DEBUG_NAN=1`` to screen every op result for non-finite values.
"""

from __future__ import annotations

import contextlib
import itertools
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEBUG_NAN = os.environ.get("MC_DEBUG_NAN", "") not in ("", "0")

_ids = itertools.count()
_grad_enabled = True


class ContractViolation(ValueError):
    """A caller broke an operation's precondition (shape, length, range)."""


class NumericFault(FloatingPointError):
    """A non-finite value appeared; ``node_id`` names the offending node."""

    def __init__(self, message: str, node_id: int | None = None):
        super().__init__(message if node_id is None else f"{message} (node {node_id})")
        self.node_id = node_id


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "id")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _op="leaf", _check=True):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if (_check or DEBUG_NAN) and not np.all(np.isfinite(arr)):
            raise NumericFault(f"non-finite value produced by '{_op}'", next(_ids))
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = _parents
        self.backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = _op
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data, _check=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        Tape.record(self).backward(self)

    # operator sugar; all of these route through the primitives below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], op: str, backward_fn) -> Tensor:
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track, _parents=parents if track else (), _op=op, _check=False)
    if track:
        out.backward_fn = backward_fn
    return out


@dataclass
class Tape:
    """Nodes reachable from an output, inputs before consumers."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, output: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.id in seen:
                continue
            seen.add(node.id)
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and p.id not in seen:
                    stack.append((p, False))
        return cls(order)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if not n.parents]

    def backward(self, output: Tensor) -> dict[int, np.ndarray]:
        """Populate ``.grad`` on every node; return leaf gradients keyed by node id."""
        if output.data.size != 1:
            raise ContractViolation(f"backward needs a scalar output, got shape {output.shape}")
        if not np.isfinite(output.data).all():
            raise NumericFault("non-finite output", output.id)
        grads: dict[int, np.ndarray] = {output.id: np.ones_like(output.data)}
        for node in reversed(self.nodes):
            g = grads.get(node.id)
            if g is None:
                g = np.zeros_like(node.data)
            if DEBUG_NAN and not np.all(np.isfinite(g)):
                raise NumericFault("non-finite gradient", node.id)
            node.grad = g
            if node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = pg
        out = {}
        for leaf in self.leaves():
            if not np.all(np.isfinite(leaf.grad)):
                raise NumericFault("non-finite gradient", leaf.id)
            out[leaf.id] = leaf.grad
        return out


def forward_backward(output: Tensor, params: Iterable[Tensor] | None = None) -> list[np.ndarray]:
    """Run the reverse pass from a scalar output.

    Returns gradients for ``params`` in order (zeros for parameters the output
    does not depend on).  When ``params`` is None the leaf gradients of the
    recorded tape are returned in tape order.
    """
    tape = Tape.record(output)
    leaf_grads = tape.backward(output)
    if params is None:
        return [leaf_grads[n.id] for n in tape.leaves()]
    return [leaf_grads.get(p.id, np.zeros_like(p.data)) for p in params]


# ---------------------------------------------------------------- broadcasting


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    small, big = (a, b) if a.ndim <= b.ndim else (b, a)
    if big.shape[big.ndim - small.ndim:] != small.shape:
        raise ContractViolation(f"{op}: shapes {a.shape} and {b.shape} are not suffix-compatible")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape) if lead else g.sum().reshape(shape)


# ------------------------------------------------------------------ primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    return _result(
        a.data + b.data,
        (a, b),
        "add",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    return _result(
        a.data - b.data,
        (a, b),
        "sub",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    return _result(
        a.data * b.data,
        (a, b),
        "mul",
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    out = a.data / b.data
    return _result(
        out,
        (a, b),
        "div",
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes are batch axes.

    ``b`` may be 2-D while ``a`` is batched (shared weight matrix).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ContractViolation(f"matmul: batch shapes differ {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _result(a.data @ b.data, (a, b), "matmul", backward)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), "exp", lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.log(x.data), (x,), "log", lambda g: (g / x.data,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _result(out, (x,), "tanh", lambda g: (g * (1.0 - out * out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return _sigmoid_from(z, e)


def _sigmoid_from(z: np.ndarray, e: np.ndarray) -> np.ndarray:
    # e = exp(-|z|); stable for either sign of z
    r = 1.0 / (1.0 + e)
    return np.where(z >= 0, r, e * r)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return _result(out, (x,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(-np.abs(x.data))
    out = np.maximum(x.data, 0.0) + np.log1p(e)
    return _result(out, (x,), "softplus", lambda g: (g * _sigmoid_from(x.data, e),))


def softmax(x) -> Tensor:
    """Softmax along the last axis."""
    x = as_tensor(x)
    out = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)

    def backward(g):
        gx = g - (g * out).sum(axis=-1, keepdims=True)
        gx *= out
        return (gx,)

    return _result(out, (x,), "softmax", backward)


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), "sum", backward)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    n = x.data.size // max(out.size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _result(out, (x,), "mean", backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift per feature."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ContractViolation("layer_norm: gain/bias must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gain.data + bias.data, (x, gain, bias), "layer_norm", backward)


def slice_(x, idx) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _result(x.data[idx], (x,), "slice", backward)


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), "transpose", lambda g: (np.transpose(g, inverse),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _result(x.data.reshape(shape), (x,), "reshape", lambda g: (g.reshape(x.shape),))


def concatenate(xs: Sequence, axis: int = 0) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _result(
        np.concatenate([x.data for x in xs], axis=axis),
        xs,
        "concatenate",
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


# ------------------------------------------------------------ verification


def gradient_check(
    f: Callable[..., Tensor],
    point: Sequence[np.ndarray],
    h: float = 1e-5,
    coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` takes one Tensor per entry of ``point`` and returns a scalar Tensor.
    Error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    With ``coords`` set, only that many randomly chosen coordinates per array
    are probed (large models); otherwise every coordinate is.
    """
    if h <= 0:
        raise ContractViolation("h must be positive")
    base = [np.array(p, dtype=np.float64) for p in point]
    leaves = [Tensor(p, requires_grad=True) for p in base]
    out = f(*leaves)
    analytic = forward_backward(out, leaves)

    def evaluate(arrays) -> float:
        with no_grad():
            val = f(*[Tensor(a, _check=False) for a in arrays]).data
        if not np.all(np.isfinite(val)):
            raise NumericFault("non-finite value at perturbed point")
        return float(val)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for k, arr in enumerate(base):
        flat_idx = np.arange(arr.size)
        if coords is not None and coords < arr.size:
            flat_idx = rng.choice(arr.size, size=coords, replace=False)
        for i in flat_idx:
            idx = np.unravel_index(i, arr.shape) if arr.ndim else ()
            probe = [b.copy() for b in base]
            probe[k][idx] += h
            up = evaluate(probe)
            probe[k][idx] -= 2 * h
            down = evaluate(probe)
            numeric = (up - down) / (2 * h)
            a = float(analytic[k][idx])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.lr <= 0 or not (0 < self.beta1 < 1) or not (0 < self.beta2 < 1) or self.eps <= 0:
            raise ContractViolation("invalid Adam hyperparameters")


def adam_step(
    params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState
) -> tuple[list[np.ndarray], AdamState]:
    """Bias-corrected Adam update; returns new arrays and advances ``state``."""
    if len(params) != len(grads):
        raise ContractViolation("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ContractViolation(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    new = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        new.append(p - state.lr * mhat / (np.sqrt(vhat) + state.eps))
    return new, state


class Adam:
    """Applies :func:`adam_step` to a list of parameter tensors in place."""

    def __init__(self, params: Sequence[Tensor], lr: float, **kw):
        self.params = list(params)
        self.state = AdamState(lr=lr, **kw)

    def step(self, grads: Sequence[np.ndarray]) -> None:
        new, self.state = adam_step([p.data for p in self.params], grads, self.state)
        for p, d in zip(self.params, new):
            p.data = d

    def decay(self, factor: float) -> None:
        self.state.lr *= factor
