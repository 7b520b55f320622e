"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every operation records its inputs and a backward rule on the output
``Tensor``; :func:`backward` walks the recorded graph in reverse topological
order.  Elementwise ops follow numpy broadcasting and reduce gradients back
to each input's shape.  ``matmul`` follows ``np.matmul`` semantics including
batch broadcasting.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ValidationError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_owned", "_prev", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._owned = False
        self._prev: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
        t._owned = False
    else:
        t.grad = t.grad + g
        t._owned = True


def _accum_at(t: Tensor, index, g: np.ndarray, advanced: bool) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
        t._owned = True
    elif not t._owned:
        t.grad = t.grad.copy()
        t._owned = True
    if advanced:
        np.add.at(t.grad, index, g)
    else:
        t.grad[index] += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _result(data, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
        out._backward = backward_fn
    return out


def _check_same_shape(op, a, b):
    if a.shape != b.shape:
        raise ValidationError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValidationError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    """Hadamard (elementwise) product."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), bw, "mul")


hadamard = mul


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: _accum(a, -g), "neg")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: _accum(a, g * c), "scale")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValidationError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ValidationError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _result(data, (a, b), bw, "matmul")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors:
        if t.ndim != ndim or t.shape[:ax] + t.shape[ax + 1 :] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1 :]:
            raise ValidationError(f"concat: incompatible shapes {[x.shape for x in tensors]} on axis {axis}")
    sizes = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        for t, lo, hi in zip(tensors, sizes[:-1], sizes[1:]):
            if t.requires_grad:
                index = (slice(None),) * ax + (slice(lo, hi),)
                _accum(t, g[index])

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if len({t.shape for t in tensors}) != 1:
        raise ValidationError(f"stack: shapes differ {[t.shape for t in tensors]}")

    def bw(g):
        parts = np.moveaxis(g, axis, 0)
        for t, part in zip(tensors, parts):
            _accum(t, part)

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, bw, "stack")


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(a, index) -> Tensor:
    """Slicing; integer-array indices scatter-add their gradients."""
    a = as_tensor(a)
    try:
        data = a.data[index]
    except IndexError as exc:
        raise ValidationError(f"slice: {exc} for shape {a.shape}") from None
    advanced = _is_advanced(index)
    return _result(data, (a,), lambda g: _accum_at(a, index, g, advanced), "slice")


slice_ = getitem


def embedding_lookup(table, index) -> Tensor:
    """Rows of ``table`` selected by integer ``index`` (gradient scatter-adds)."""
    table = as_tensor(table)
    if isinstance(index, tuple):
        index = tuple(np.asarray(i, dtype=int) for i in index)
    else:
        index = np.asarray(index, dtype=int)
        if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
            raise ValidationError(f"embedding_lookup: index outside 0..{table.shape[0] - 1}")
    return _result(table.data[index], (table,), lambda g: _accum_at(table, index, g, True), "embedding")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ValidationError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return _result(data, (a,), lambda g: _accum(a, g.reshape(a.shape)), "reshape")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: _accum(a, g * mask), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # split by sign to avoid overflow in exp
    x = a.data
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(s, (a,), lambda g: _accum(a, g * s * (1.0 - s)), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _result(t, (a,), lambda g: _accum(a, g * (1.0 - t * t)), "tanh")


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.sin(a.data), (a,), lambda g: _accum(a, g * np.cos(a.data)), "sin")


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.cos(a.data), (a,), lambda g: _accum(a, -g * np.sin(a.data)), "cos")


def _reduced_count(shape, axis) -> int:
    if axis is None:
        return int(np.prod(shape))
    axes = (axis,) if isinstance(axis, int) else axis
    return int(np.prod([shape[x] for x in axes]))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = _reduced_count(a.shape, axis)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g / n, a.shape))

    return _result(np.mean(a.data, axis=axis, keepdims=keepdims), (a,), bw, "mean")


def sum_squared_error(a, b) -> Tensor:
    """Mean-normalized squared error: ``sum((a - b)^2) / a.size``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("sum_squared_error", a, b)
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        d = (2.0 / n) * g * diff
        _accum(a, d)
        _accum(b, -d)

    return _result(np.sum(diff * diff) / n, (a, b), bw, "sse")


mse = sum_squared_error


def cosine_similarity(a, b, axis: int = -1) -> Tensor:
    """Cosine similarity along ``axis``; zero where either vector has zero norm."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("cosine_similarity", a, b)
    na = np.linalg.norm(a.data, axis=axis, keepdims=True)
    nb = np.linalg.norm(b.data, axis=axis, keepdims=True)
    valid = (na > 0) & (nb > 0)
    safe_na = np.where(valid, na, 1.0)
    safe_nb = np.where(valid, nb, 1.0)
    dot = np.sum(a.data * b.data, axis=axis, keepdims=True)
    cos_k = np.where(valid, dot / (safe_na * safe_nb), 0.0)

    def bw(g):
        g = np.expand_dims(g, axis) * valid
        if a.requires_grad:
            _accum(a, g * (b.data / (safe_na * safe_nb) - cos_k * a.data / safe_na**2))
        if b.requires_grad:
            _accum(b, g * (a.data / (safe_na * safe_nb) - cos_k * b.data / safe_nb**2))

    return _result(np.squeeze(cos_k, axis=axis), (a, b), bw, "cosine")


def lstm_cell_step(weight, bias, x, h, c) -> tuple[Tensor, Tensor]:
    """One LSTM step with pre-activations ``[x; h] @ weight + bias``.

    ``weight`` has shape ``(in + H, 4H)``; gate blocks are ordered i, f, o, g.
    """
    weight, bias, x, h, c = (as_tensor(t) for t in (weight, bias, x, h, c))
    hidden = h.shape[-1]
    if weight.shape[-1] != 4 * hidden or weight.shape[-2] != x.shape[-1] + hidden or c.shape != h.shape:
        raise ValidationError(
            f"lstm_cell_step: weight {weight.shape} does not fit x {x.shape}, h {h.shape}, c {c.shape}"
        )
    pre = add(matmul(concat([x, h], axis=-1), weight), bias)
    return lstm_gates(pre, c)


def lstm_gates(pre, c) -> tuple[Tensor, Tensor]:
    """Apply the LSTM nonlinearities to gate pre-activations ``pre`` (..., 4H)."""
    hidden = c.shape[-1]
    gates = sigmoid(pre[..., : 3 * hidden])
    cand = tanh(pre[..., 3 * hidden :])
    i = gates[..., :hidden]
    f = gates[..., hidden : 2 * hidden]
    o = gates[..., 2 * hidden :]
    c_next = add(mul(f, c), mul(i, cand))
    h_next = mul(o, tanh(c_next))
    return h_next, c_next


def topological_order(root: Tensor) -> list[Tensor]:
    """Graph nodes reachable from ``root`` that require grad, inputs first."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node._prev:
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad tensor feeding ``loss``.

    Stale gradients on the graph are cleared first; contributions from
    fan-out are summed.
    """
    if loss.data.size != 1:
        raise ValidationError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topological_order(loss)
    for node in order:
        node.grad = None
        node._owned = False
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


class Adam:
    """Adam with bias correction; tensors without a gradient are skipped."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.steps = [0] * len(self.params)

    def step(self, frozen: set[int] | None = None) -> None:
        """Apply one update; ``frozen`` holds ``id()`` of tensors to leave untouched."""
        b1, b2 = self.betas
        for i, p in enumerate(self.params):
            if p.grad is None or (frozen and id(p) in frozen):
                continue
            g = p.grad
            self.steps[i] += 1
            k = self.steps[i]
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1**k)
            v_hat = self.v[i] / (1 - b2**k)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"steps": np.array(self.steps, dtype=np.float64)}
        for i in range(len(self.params)):
            out[f"m.{i}"] = self.m[i]
            out[f"v.{i}"] = self.v[i]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.steps = [int(s) for s in arrays["steps"]]
        self.m = [np.array(arrays[f"m.{i}"]) for i in range(len(self.params))]
        self.v = [np.array(arrays[f"v.{i}"]) for i in range(len(self.params))]


def gradient_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_per_tensor: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Worst relative error between backprop and central differences.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``.  With
    ``max_per_tensor`` only that many random coordinates of each tensor are
    probed.
    """
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else np.array(p.grad) for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_per_tensor is not None and flat.size > max_per_tensor:
            coords = rng.choice(flat.size, size=max_per_tensor, replace=False)
        base = p.data.copy()
        for c in coords:
            plus = base.copy().reshape(-1)
            plus[c] += eps
            p.data = plus.reshape(base.shape)
            with no_grad():
                f_plus = f().item()
            minus = base.copy().reshape(-1)
            minus[c] -= eps
            p.data = minus.reshape(base.shape)
            with no_grad():
                f_minus = f().item()
            p.data = base
            numeric = (f_plus - f_minus) / (2 * eps)
            ana = a.reshape(-1)[c]
            err = abs(ana - numeric) / max(abs(ana), abs(numeric), floor)
            worst = max(worst, err)
    return worst
