"""A small dense tensor engine with reverse-mode differentiation.

Only the operations the segmentation network needs are provided. Storage is
row-major numpy; the main path computes in float32, and :func:`check_mode`
switches newly created tensors to float64 for finite-difference testing.

Gradients accumulate into ``Tensor.grad`` of leaf tensors across repeated
``backward`` calls; callers zero them between optimizer steps.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, NumericalError, ShapeError

_state = {"dtype": np.float32, "grad": True, "anomaly": False}


@contextlib.contextmanager
def check_mode():
    """Create tensors in float64 inside this block (gradient checks only)."""
    prev = _state["dtype"]
    _state["dtype"] = np.float64
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


@contextlib.contextmanager
def detect_anomaly():
    """Raise NumericalError as soon as any op produces NaN or Inf."""
    prev = _state["anomaly"]
    _state["anomaly"] = True
    try:
        yield
    finally:
        _state["anomaly"] = prev


def grad_enabled() -> bool:
    return _state["grad"]


def default_dtype():
    return _state["dtype"]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.ascontiguousarray(data, dtype=dtype or _state["dtype"])
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        needs = _state["grad"] and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = tuple(parents) if needs else ()
        out._backward = backward if needs else None
        if _state["anomaly"] and not np.all(np.isfinite(data)):
            raise NumericalError(f"non-finite values produced by {backward.__qualname__.split('.')[0]}")
        return out

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype), dtype=self.data.dtype)

    # -- basic properties -----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- differentiation ------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor that requires grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operators ------------------------------------------------------------

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        return mul(self._lift(other), self)

    def __truediv__(self, other):
        return div(self, self._lift(other))

    def __rtruediv__(self, other):
        return div(self._lift(other), self)

    def __neg__(self):
        return mul(self, self._lift(-1.0))

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ---------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def add_backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), add_backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def sub_backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), sub_backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def mul_backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data * b.data, (a, b), mul_backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    def div_backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data / b.data, (a, b), div_backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def exp_backward(g):
        return (g * out,)

    return Tensor._from_op(out, (x,), exp_backward)


def log(x: Tensor) -> Tensor:
    def log_backward(g):
        return (g / x.data,)

    return Tensor._from_op(np.log(x.data), (x,), log_backward)


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)

    def sigmoid_backward(g):
        return (g * out * (1 - out),)

    return Tensor._from_op(out, (x,), sigmoid_backward)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = _sigmoid(x.data)

    def silu_backward(g):
        return (g * (s * (1 + x.data * (1 - s))),)

    return Tensor._from_op(x.data * s, (x,), silu_backward)


def where(cond, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where ``cond`` holds, else ``b`` (both broadcast to cond)."""
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)

    def where_backward(g):
        zero = np.zeros((), dtype=g.dtype)
        return _unbroadcast(np.where(cond, g, zero), a.shape), _unbroadcast(np.where(cond, zero, g), b.shape)

    return Tensor._from_op(out, (a, b), where_backward)


# -- shape ops ---------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {tuple(shape)}") from exc

    def reshape_backward(g):
        return (g.reshape(x.shape),)

    return Tensor._from_op(out, (x,), reshape_backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def transpose_backward(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return Tensor._from_op(np.ascontiguousarray(x.data.transpose(axes)), (x,), transpose_backward)


def getitem(x: Tensor, index) -> Tensor:
    out = np.array(x.data[index])

    def getitem_backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(out, (x,), getitem_backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def concat_backward(g):
        return tuple(np.ascontiguousarray(part) for part in np.split(g, splits, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, concat_backward)


# -- reductions ----------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def sum_backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(np.asarray(out), (x,), sum_backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axes, keepdims) * (1.0 / count)


# -- linear algebra --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch dims not broadcastable: {a.shape} @ {b.shape}") from exc

    def matmul_backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), matmul_backward)


def conv_transpose3d(x: Tensor, kernel: Tensor, stride) -> Tensor:
    """Non-overlapping transposed convolution (kernel extent == stride).

    x: [c_in, D, H, W]; kernel: [c_in, c_out, kz, ky, kx]; each input voxel
    scatters ``x * kernel`` into its own kz*ky*kx output block.
    """
    s = (stride,) * 3 if np.isscalar(stride) else tuple(stride)
    if x.ndim != 4 or kernel.ndim != 5:
        raise ShapeError(f"conv_transpose3d expects [c,D,H,W] and [cin,cout,k,k,k], got {x.shape}, {kernel.shape}")
    if tuple(kernel.shape[2:]) != s:
        raise ConfigError(f"conv_transpose3d supports kernel == stride only, got kernel {kernel.shape[2:]} stride {s}")
    if kernel.shape[0] != x.shape[0]:
        raise ShapeError(f"conv_transpose3d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    cin, d, h, w = x.shape
    cout = kernel.shape[1]
    kz, ky, kx = s
    # [cout, kz, ky, kx, D, H, W] -> [cout, D, kz, H, ky, W, kx]
    y = np.tensordot(kernel.data, x.data, axes=([0], [0]))
    out = np.ascontiguousarray(y.transpose(0, 4, 1, 5, 2, 6, 3)).reshape(cout, d * kz, h * ky, w * kx)

    def conv_transpose3d_backward(g):
        gb = g.reshape(cout, d, kz, h, ky, w, kx).transpose(0, 2, 4, 6, 1, 3, 5)
        gx = np.tensordot(kernel.data, gb, axes=([1, 2, 3, 4], [0, 1, 2, 3])) if x.requires_grad else None
        gk = np.tensordot(x.data, gb, axes=([1, 2, 3], [4, 5, 6])) if kernel.requires_grad else None
        return gx, gk

    return Tensor._from_op(out, (x, kernel), conv_transpose3d_backward)


# -- normalization and softmax ---------------------------------------------


def normalize(x: Tensor, axes, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance over ``axes`` (biased variance), no affine."""
    axes = _norm_axes(axes, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd

    def normalize_backward(g):
        mean_g = g.sum(axis=axes, keepdims=True) / count
        mean_gx = (g * xhat).sum(axis=axes, keepdims=True) / count
        return (rstd * (g - mean_g - xhat * mean_gx),)

    return Tensor._from_op(xhat, (x,), normalize_backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm affine shape mismatch: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    return normalize(x, -1, eps) * gamma + beta


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over the spatial axes of [C, D, H, W]."""
    c = x.shape[0]
    spatial = tuple(range(1, x.ndim))
    bshape = (c,) + (1,) * (x.ndim - 1)
    return normalize(x, spatial, eps) * gamma.reshape(bshape) + beta.reshape(bshape)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def softmax_backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (x,), softmax_backward)


def softmax_lastaxis(x: Tensor) -> Tensor:
    return softmax(x, -1)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def log_softmax_backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (x,), log_softmax_backward)


# -- gradient tooling ----------------------------------------------------------


def clip_global_norm(grads: Iterable[np.ndarray], max_norm: float = 1.0) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm measured before clipping.
    """
    if max_norm <= 0:
        raise ConfigError(f"max_norm must be positive, got {max_norm}")
    grads = [g for g in grads if g is not None]
    total = 0.0
    for g in grads:
        total += float(np.dot(g.reshape(-1).astype(np.float64), g.reshape(-1).astype(np.float64)))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= g.dtype.type(scale)
    return norm


def finite_difference_check(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-3,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max elementwise relative error between backprop and central differences.

    ``fn`` rebuilds the scalar loss from the current tensor values. Set
    ``max_entries`` to probe a random subset of each tensor's entries.
    Intended for float64 tensors created under :func:`check_mode`.

    The denominator of each entry's error is floored at 1e-3 of the largest
    analytic gradient in the same tensor: central differences carry an
    O(h**2) truncation error that would otherwise dominate near-zero entries.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    fn().backward()
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        floor = max(1e-3 * float(np.abs(analytic).max(initial=0.0)), 1e-7)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            a = analytic.reshape(-1)[i]
            denom = max(abs(a), abs(numeric), floor)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
