"""Dense float64 tensors with a reverse-mode differentiation record.

Every operation returns a new :class:`Tensor` that remembers its operands and
a local gradient rule. :func:`backward` replays those rules in reverse
topological order. Primitives are deliberately coarse (``linear``,
``layernorm``, ``softmax``) because Python overhead per node dominates at the
sizes this package works with.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64
_SQRT_HALF = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A precondition of an operation was violated."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def make_op(data, parents: Sequence[Tensor], rule) -> Tensor:
    """Wrap an op result; the rule maps the output grad to one grad per parent."""
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), rule)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def rule(g):
        return (
            _unbroadcast(g * bd, ad.shape) if need_a else None,
            _unbroadcast(g * ad, bd.shape) if need_b else None,
        )

    return make_op(ad * bd, (a, b), rule)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return make_op(
        ad / bd,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)),
    )


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_op(np.log(ad), (a,), lambda g: (g / ad,))


def sin(a: Tensor) -> Tensor:
    ad = a.data
    return make_op(np.sin(ad), (a,), lambda g: (g * np.cos(ad),))


def cos(a: Tensor) -> Tensor:
    ad = a.data
    return make_op(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return make_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)), stable for large |x|."""
    x = a.data
    out = -np.logaddexp(0.0, -x)
    return make_op(out, (a,), lambda g: (g * _sigmoid(-x),))


def relu(a: Tensor) -> Tensor:
    x = a.data
    return make_op(np.maximum(x, 0.0), (a,), lambda g: (g * (x > 0),))


def gelu(a: Tensor) -> Tensor:
    """x * Phi(x) with the exact normal CDF."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))

    def rule(g):
        return (g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)),)

    return make_op(x * cdf, (a,), rule)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# --------------------------------------------------------------- reductions


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), rule)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D operands, or a batch of them for 3-D operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or a.data.ndim != b.data.ndim or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if a.data.ndim == 3 and a.shape[0] != b.shape[0]:
        raise DimensionError(f"matmul: batch sizes differ in {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    need_a, need_b = a.requires_grad, b.requires_grad

    def rule(g):
        return (
            g @ np.swapaxes(bd, -1, -2) if need_a else None,
            np.swapaxes(ad, -1, -2) @ g if need_b else None,
        )

    return make_op(ad @ bd, (a, b), rule)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b for x of shape [n, in], w [in, out], b [out]."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    need_x = x.requires_grad
    if b is None:
        return make_op(out, (x, w), lambda g: (g @ wd.T if need_x else None, xd.T @ g))
    out += b.data
    return make_op(out, (x, w, b), lambda g: (g @ wd.T if need_x else None, xd.T @ g, g.sum(axis=0)))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = tuple(np.argsort(axes))
    return make_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, rule)


def take_rows(a: Tensor, index: Sequence[int]) -> Tensor:
    """Rows of a 2-D tensor in the given order (duplicates allowed)."""
    idx = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def rule(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return make_op(a.data[idx], (a,), rule)


# --------------------------------------------------------- normalisations


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] < 1:
        raise DimensionError(f"softmax over an empty axis of {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_op(out, (x,), rule)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit population variance, then gain*x + bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layernorm: gain {gain.shape} / bias {bias.shape} vs input {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def rule(g):
        lead = tuple(range(g.ndim - 1))
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return (dx, (g * xhat).sum(axis=lead), g.sum(axis=lead))

    return make_op(xhat * gd + bias.data, (x, gain, bias), rule)


# ------------------------------------------------------------------ backward


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every differentiable tensor reachable from a scalar loss.

    Gradients accumulate into existing ``grad`` arrays, so calling this on two
    losses in turn leaves the sum of both gradients.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


# -------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
    floor: float | None = None,
    analytic_scale: float = 1.0,
) -> GradCheckReport:
    """Compare analytic gradients of ``f`` with central differences.

    ``f`` rebuilds its graph from ``params`` on every call. The relative error
    of a coordinate is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    roundoff in vanishing gradients from reading as failure. By default it
    sits where the central difference's own rounding noise,
    ``eps * |f| / step``, would use a tenth of ``tol``. With
    ``max_coords`` set, each parameter is probed at its largest-gradient
    coordinate plus random others, up to that many. ``analytic_scale``
    corrupts the analytic side and exists for sentinel tests.
    """
    report = GradCheckReport(tol=tol)
    if not params:
        return report
    for p in params.values():
        p.grad = None
    loss = f()
    if floor is None:
        noise = np.finfo(DTYPE).eps * max(1.0, abs(loss.item())) / step
        floor = 10.0 * noise / tol
    backward(loss)
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) * analytic_scale for k, p in params.items()}
    rng = np.random.default_rng(seed)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        if max_coords is None or flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            top = int(np.argmax(np.abs(a_flat)))
            rest = rng.choice(flat.size, size=max_coords - 1, replace=False)
            coords = np.unique(np.concatenate([[top], rest]))
        worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            fp = f().item()
            flat[i] = orig - step
            fm = f().item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * step)
            a = a_flat[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
        report.errors[name] = worst
    for p in params.values():
        p.grad = None
    return report


# --------------------------------------------------------------- checkpoints

MAGIC = b"L2GV1"


def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]) -> None:
    """Write named float64 arrays; integers are 64-bit little-endian."""
    items = arrays.items() if isinstance(arrays, Mapping) else arrays
    chunks = [MAGIC]
    for name, arr in items:
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<q", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<q", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise ContractError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    out: dict[str, np.ndarray] = {}
    while pos < len(buf):
        (n,) = struct.unpack_from("<q", buf, pos)
        pos += 8
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<q", buf, pos)
        pos += 8
        shape = struct.unpack_from(f"<{rank}q", buf, pos)
        pos += 8 * rank
        count = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(DTYPE)
        pos += 8 * count
    return out


# ------------------------------------------------------ discrete decisions


class DecisionTrace:
    """Records piecewise-constant choices (top-k, thresholds, matchings) and replays them.

    Finite differences through a model that thresholds its own outputs are
    only meaningful with those thresholds held fixed; a replaying trace makes
    every perturbed forward pass reuse the choices of the reference pass.
    """

    def __init__(self):
        self.values: list = []
        self.replaying = False
        self._cursor = 0

    def replay(self) -> DecisionTrace:
        self.replaying = True
        self._cursor = 0
        return self

    def rewind(self) -> None:
        self._cursor = 0

    def decide(self, compute: Callable[[], object]):
        if not self.replaying:
            value = compute()
            self.values.append(value)
            return value
        if self._cursor >= len(self.values):
            raise ContractError("replayed more decisions than were recorded")
        value = self.values[self._cursor]
        self._cursor += 1
        return value


def decide(trace: DecisionTrace | None, compute: Callable[[], object]):
    return compute() if trace is None else trace.decide(compute)


# ------------------------------------------------------------------ no-grad

_GRAD_ENABLED = [True]


class no_grad:
    """Context manager: operations inside build no differentiation record."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev
