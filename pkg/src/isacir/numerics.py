"""Dense float64 arrays with reverse-mode gradients.

A :class:`Tensor` wraps an ``np.ndarray`` and records the operation that
produced it. Calling :meth:`Tensor.backward` on a scalar result walks the
graph in reverse topological order and accumulates ``.grad`` on every node
that requires it.

Every op accepts leading batch dimensions; ``matmul`` broadcasts like
``np.matmul`` and the elementwise ops broadcast like numpy.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf, expit

LOG_EPS = 1e-12
NORM_EPS = 1e-300


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(ValueError):
    """Input has no well-defined result (zero-norm row, empty set, ...)."""


class EvaluationError(ArithmeticError):
    """A function under evaluation produced a non-finite value."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple["Tensor", ...] = (), _backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological(self)
        self.grad = np.asarray(grad, dtype=np.float64).copy()
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
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
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data / b.data
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * out / b.data, b.shape))

    return _result(out, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def backward(g):
        _accumulate(a, g * c)

    return _result(a.data * c, (a,), backward)


def gelu(a) -> Tensor:
    """Exact (erf) GELU: x * Phi(x)."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    out = x * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        _accumulate(a, g * (cdf + x * pdf))

    return _result(out, (a,), backward)


def activation(a) -> Tensor:
    return gelu(a)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - out * out))

    return _result(out, (a,), backward)


def cos(a) -> Tensor:
    a = as_tensor(a)
    out = np.cos(a.data)

    def backward(g):
        _accumulate(a, -g * np.sin(a.data))

    return _result(out, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        _accumulate(a, g * out * (1.0 - out))

    return _result(out, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra and shape
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} are incompatible")
    out = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _result(out, (a, b), backward)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, np.swapaxes(g, -1, -2))

    return _result(np.swapaxes(a.data, -1, -2), (a,), backward)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    original = a.shape

    def backward(g):
        _accumulate(a, g.reshape(original))

    return _result(a.data.reshape(shape), (a,), backward)


def take(a, index) -> Tensor:
    """Basic or fancy indexing; gradients scatter back with ``np.add.at``."""
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        _accumulate(a, full)

    return _result(a.data[index], (a,), backward)


def concat(items: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in items]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                _accumulate(t, np.take(g, np.arange(lo, hi), axis=axis))

    return _result(out, tensors, backward)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _result(out, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def patches3x3(a) -> Tensor:
    """(B, H, W, C) -> (B, H, W, 9C) zero-padded 3x3 neighbourhoods.

    Neighbour order is row-major over offsets (-1,-1), (-1,0), ..., (1,1),
    channels contiguous within each offset.
    """
    a = as_tensor(a)
    if a.ndim != 4:
        raise DimensionError(f"patches3x3 expects (B, H, W, C), got {a.shape}")
    b, h, w, c = a.shape
    padded = np.pad(a.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.concatenate(
        [padded[:, dy:dy + h, dx:dx + w, :] for dy in range(3) for dx in range(3)], axis=-1
    )

    def backward(g):
        full = np.zeros_like(padded)
        k = 0
        for dy in range(3):
            for dx in range(3):
                full[:, dy:dy + h, dx:dx + w, :] += g[..., k * c:(k + 1) * c]
                k += 1
        _accumulate(a, full[:, 1:-1, 1:-1, :])

    return _result(out, (a,), backward)


# ---------------------------------------------------------------------------
# normalisation and losses
# ---------------------------------------------------------------------------

def softmax_over(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        _accumulate(a, out * (g - inner))

    return _result(out, (a,), backward)


softmax = softmax_over


def l2_normalize(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if np.any(norm <= NORM_EPS):
        raise DegenerateInputError("cannot normalize a zero-norm vector")
    out = a.data / norm

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        _accumulate(a, (g - out * inner) / norm)

    return _result(out, (a,), backward)


def cross_entropy(p, y, eps: float = LOG_EPS) -> Tensor:
    """Mean over rows of ``-sum(y * log p)``; the last axis holds classes."""
    p, y = as_tensor(p), as_tensor(y)
    if p.shape != y.shape:
        raise DimensionError(f"cross_entropy shapes {p.shape} and {y.shape} differ")
    rows = p.data.size // p.shape[-1] if p.ndim else 1
    clamped = np.maximum(p.data, eps)
    out = -(y.data * np.log(clamped)).sum() / rows

    def backward(g):
        live = p.data > eps
        _accumulate(p, g * np.where(live, -y.data / clamped, 0.0) / rows)

    return _result(np.asarray(out), (p,), backward)


def binary_cross_entropy(p, y, eps: float = LOG_EPS) -> Tensor:
    """Mean over all entries of the two-class cross-entropy with targets ``y``."""
    p, y = as_tensor(p), as_tensor(y)
    if p.shape != y.shape:
        raise DimensionError(f"binary_cross_entropy shapes {p.shape} and {y.shape} differ")
    n = p.data.size
    hi = np.maximum(p.data, eps)
    lo = np.maximum(1.0 - p.data, eps)
    out = -(y.data * np.log(hi) + (1.0 - y.data) * np.log(lo)).sum() / n

    def backward(g):
        d_hi = np.where(p.data > eps, -y.data / hi, 0.0)
        d_lo = np.where(1.0 - p.data > eps, (1.0 - y.data) / lo, 0.0)
        _accumulate(p, g * (d_hi + d_lo) / n)

    return _result(np.asarray(out), (p,), backward)


def binary_cross_entropy_with_logits(z, y) -> Tensor:
    """Same value as ``binary_cross_entropy(sigmoid(z), y)`` without the clamp."""
    z, y = as_tensor(z), as_tensor(y)
    if z.shape != y.shape:
        raise DimensionError(f"binary_cross_entropy shapes {z.shape} and {y.shape} differ")
    n = z.data.size
    out = (np.logaddexp(0.0, z.data) - y.data * z.data).sum() / n

    def backward(g):
        _accumulate(z, g * (expit(z.data) - y.data) / n)

    return _result(np.asarray(out), (z,), backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(fn: Callable[[Mapping[str, np.ndarray]], tuple[float, Mapping[str, np.ndarray]]],
               params: Mapping[str, np.ndarray], eps: float = 1e-6,
               names: Iterable[str] | None = None, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> "GradCheckReport":
    """Compare analytic gradients with central differences.

    ``fn(params)`` must return ``(value, grads)`` where ``grads`` maps a
    subset of parameter names to arrays of matching shape. Each coordinate
    is perturbed by ``+-eps`` and the relative error uses the denominator
    ``max(|analytic|, |numeric|, 1e-8)``. ``max_coords`` caps the number of
    coordinates checked per parameter (sampled with ``rng``).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    value, analytic = fn(base)
    if not np.isfinite(value):
        raise EvaluationError(f"function value is not finite: {value}")
    rng = rng if rng is not None else np.random.default_rng(0)
    report = GradCheckReport()
    for name in (list(names) if names is not None else list(analytic)):
        grad = np.asarray(analytic[name])
        if grad.shape != base[name].shape:
            raise DimensionError(f"gradient for {name} has shape {grad.shape}, expected {base[name].shape}")
        coords = np.arange(base[name].size)
        if max_coords is not None and coords.size > max_coords:
            coords = np.sort(rng.choice(coords, size=max_coords, replace=False))
        worst = (0.0, -1, 0.0, 0.0)
        flat = base[name].reshape(-1)
        for idx in coords:
            keep = flat[idx]
            flat[idx] = keep + eps
            f_plus, _ = fn(base)
            flat[idx] = keep - eps
            f_minus, _ = fn(base)
            flat[idx] = keep
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise EvaluationError(f"non-finite value while perturbing {name}[{idx}]")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(grad.reshape(-1)[idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if rel > worst[0] or worst[1] < 0:
                worst = (rel, int(idx), a, numeric)
        report.entries[name] = ParamCheck(name, base[name].shape, int(coords.size), *worst)
    return report


class ParamCheck:
    __slots__ = ("name", "shape", "checked", "rel_error", "coord", "analytic", "numeric")

    def __init__(self, name, shape, checked, rel_error, coord, analytic, numeric):
        self.name = name
        self.shape = tuple(shape)
        self.checked = checked
        self.rel_error = rel_error
        self.coord = coord
        self.analytic = analytic
        self.numeric = numeric

    def coord_index(self) -> tuple[int, ...]:
        return tuple(int(i) for i in np.unravel_index(self.coord, self.shape)) if self.coord >= 0 else ()


class GradCheckReport:
    def __init__(self):
        self.entries: dict[str, ParamCheck] = {}

    @property
    def max_rel_error(self) -> float:
        return max((e.rel_error for e in self.entries.values()), default=0.0)

    def lines(self) -> list[str]:
        out = []
        for e in self.entries.values():
            out.append(
                f"{e.name:10s} shape={'x'.join(map(str, e.shape)):>9s} checked={e.checked:5d} "
                f"worst={e.coord_index()} rel={e.rel_error:.3e} "
                f"analytic={e.analytic:+.6e} numeric={e.numeric:+.6e}"
            )
        return out
