"""Reverse-mode differentiation over dense numpy arrays.

A Tensor wraps a float64 ndarray together with the op that produced it.
backward() visits every recorded node exactly once in reverse topological
order and returns the gradient of a scalar root with respect to every leaf
created with requires_grad=True. detach() cuts a value out of the graph
without changing it.

The module also carries the Adam optimizer used by the fitting loop and a
central finite-difference checker for validating analytic gradients.

Usage:
    x = Tensor(3.0, requires_grad=True)
    y = x * x
    grads = backward(y)
    grads[x]  # array(6.)

    opt = Adam()
    opt.add_group("bank", {"keys": keys}, lr=1e-3)
    opt.step(grads)
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from sbsm_fit.errors import AutodiffError

logger = logging.getLogger(__name__)

Gradients = Dict["Tensor", np.ndarray]


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A node in the computation record.

    Leaves own their data (the constructor copies); results of ops share
    freshly computed arrays. Only nodes that depend on a requires_grad leaf
    keep references to their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_ufunc__ = None  # ndarray <op> Tensor defers to the Tensor operator

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"

    @classmethod
    def _result(cls, data, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        out.op = op
        return out

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, op={self.op}{flag})"

    # ── Array protocol ───────────────────────────────────────────────────

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    # ── Operators ────────────────────────────────────────────────────────

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
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


TensorLike = Union[Tensor, np.ndarray, float, int, Sequence]


def as_tensor(x: TensorLike) -> Tensor:
    """Wrap constants; pass tensors through untouched."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def parameter(x) -> Tensor:
    """A leaf that collects gradients."""
    return Tensor(x, requires_grad=True)


def detach(x: TensorLike) -> Tensor:
    """Same value, no upstream edges."""
    x = as_tensor(x)
    return Tensor._result(x.data, (), None, "detach")


# ── Elementwise arithmetic ───────────────────────────────────────────────


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), backward, "add")


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), backward, "sub")


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, (a, b), backward, "mul")


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        )

    return Tensor._result(out, (a, b), backward, "div")


def neg(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: TensorLike, exponent: float) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return Tensor._result(a.data**exponent, (a,), backward, "pow")


def square(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def exp(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor._result(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def sin(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def tanh(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _expit(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = _expit(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log_sigmoid(a: TensorLike) -> Tensor:
    """log(sigmoid(a)), stable for large |a|."""
    a = as_tensor(a)
    out = -np.logaddexp(0.0, -a.data)
    return Tensor._result(out, (a,), lambda g: (g * _expit(-a.data),), "log_sigmoid")


def relu(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(
        np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0.0),), "relu"
    )


def leaky_relu(a: TensorLike, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0.0, 1.0, slope)
    return Tensor._result(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def clip(a: TensorLike, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; zero subgradient at and beyond the bounds."""
    a = as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)
    return Tensor._result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def minimum(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data

    def backward(g):
        return (
            _unbroadcast(g * pick_a, a.shape),
            _unbroadcast(g * ~pick_a, b.shape),
        )

    return Tensor._result(np.minimum(a.data, b.data), (a, b), backward, "minimum")


def huber_abs(a: TensorLike, delta: float) -> Tensor:
    """|a| with a quadratic cap of width delta around zero (delta=0 is plain |a|)."""
    a = as_tensor(a)
    mag = np.abs(a.data)
    if delta > 0.0:
        inner = mag <= delta
        out = np.where(inner, a.data * a.data / (2.0 * delta), mag - 0.5 * delta)
        slope = np.where(inner, a.data / delta, np.sign(a.data))
    else:
        out = mag
        slope = np.sign(a.data)
    return Tensor._result(out, (a,), lambda g: (g * slope,), "huber_abs")


def where(cond: np.ndarray, a: TensorLike, b: TensorLike) -> Tensor:
    """Select elementwise; cond is a constant mask."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)

    def backward(g):
        return (
            _unbroadcast(np.where(cond, g, 0.0), a.shape),
            _unbroadcast(np.where(cond, 0.0, g), b.shape),
        )

    return Tensor._result(np.where(cond, a.data, b.data), (a, b), backward, "where")


# ── Reductions and linear algebra ────────────────────────────────────────


def tsum(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) / float(max(count, 1))


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 1:
            ga = (bd @ g[..., None])[..., 0]
            gb = ad[:, None] * g[..., None, :]
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        if bd.ndim == 1:
            ga = g[..., None] * bd
            gb = (np.swapaxes(ad, -1, -2) @ g[..., None])[..., 0]
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._result(a.data @ b.data, (a, b), backward, "matmul")


def cross(a: TensorLike, b: TensorLike) -> Tensor:
    """Cross product over the last axis."""
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (
            _unbroadcast(np.cross(b.data, g), a.shape),
            _unbroadcast(np.cross(g, a.data), b.shape),
        )

    return Tensor._result(np.cross(a.data, b.data), (a, b), backward, "cross")


def norm(a: TensorLike, axis: int = -1, keepdims: bool = False, eps: float = 0.0) -> Tensor:
    """Euclidean norm along `axis`; eps regularizes the gradient at zero."""
    return sqrt(tsum(square(a), axis=axis, keepdims=keepdims) + eps)


# ── Shape manipulation ───────────────────────────────────────────────────


def reshape(a: TensorLike, shape) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(
        a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape"
    )


def transpose(a: TensorLike, axes=None) -> Tensor:
    a = as_tensor(a)
    inverse = None if axes is None else np.argsort(axes)
    return Tensor._result(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose"
    )


def broadcast_to(a: TensorLike, shape) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(
        np.broadcast_to(a.data, shape).copy(),
        (a,),
        lambda g: (_unbroadcast(g, a.shape),),
        "broadcast_to",
    )


def getitem(a: TensorLike, index) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._result(a.data[index], (a,), backward, "getitem")


def scatter_add(values: TensorLike, index: np.ndarray, size: int) -> Tensor:
    """Sum rows of `values` into `size` output rows; the inverse of row gathering."""
    values = as_tensor(values)
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros((size,) + values.shape[1:])
    np.add.at(out, index, values.data)
    return Tensor._result(out, (values,), lambda g: (g[index],), "scatter_add")


def stack(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))

    return Tensor._result(np.stack([p.data for p in parts], axis=axis), parts, backward, "stack")


def concatenate(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(
        np.concatenate([p.data for p in parts], axis=axis), parts, backward, "concatenate"
    )


# ── Convolution ──────────────────────────────────────────────────────────


def conv2d(x: TensorLike, weight: TensorLike, bias: TensorLike, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. x: (N, C, H, W); weight: (O, C, kh, kw); bias: (O,)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    kh, kw = weight.shape[2], weight.shape[3]
    p, s = padding, stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    out_h, out_w = cols.shape[2], cols.shape[3]
    out = np.einsum("nchwij,ocij->nohw", cols, weight.data, optimize=True)
    out = out + bias.data[None, :, None, None]

    def backward(g):
        gw = np.einsum("nchwij,nohw->ocij", cols, g, optimize=True)
        gb = g.sum(axis=(0, 2, 3))
        gcols = np.einsum("nohw,ocij->nchwij", g, weight.data, optimize=True)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + s * out_h : s, j : j + s * out_w : s] += gcols[..., i, j]
        gx = gxp[:, :, p : p + x.shape[2], p : p + x.shape[3]]
        return gx, gw, gb

    return Tensor._result(out, (x, weight, bias), backward, "conv2d")


# ── Backward pass ────────────────────────────────────────────────────────


def _topological_order(root: Tensor) -> list:
    order: list = []
    visited: set = set()
    stack_: list = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in visited:
                stack_.append((parent, False))
    return order


def backward(root: Tensor) -> Gradients:
    """Gradients of a scalar root with respect to every reachable leaf.

    Also stores each leaf's gradient in `leaf.grad` (overwriting).

    Raises:
        AutodiffError: if root is not a scalar.
    """
    if not isinstance(root, Tensor) or root.data.size != 1:
        shape = getattr(root, "shape", None)
        raise AutodiffError(f"backward root must be a scalar tensor, got shape {shape}")
    result: Gradients = {}
    if not root.requires_grad:
        return result

    pending: Dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_topological_order(root)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            result[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg
    return result


def grad_of(grads: Gradients, param: Tensor) -> np.ndarray:
    """Gradient for `param`, zeros when it was not reached."""
    g = grads.get(param)
    return np.zeros_like(param.data) if g is None else g


# ── Adam ─────────────────────────────────────────────────────────────────


@dataclass
class OptimizerState:
    """Per-parameter moments and step counts for one learning-rate group."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    steps: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0.0:
            raise AutodiffError(f"lr must be non-negative, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise AutodiffError(f"betas must be in [0, 1), got ({self.beta1}, {self.beta2})")


def adam_step(
    state: OptimizerState,
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
) -> Dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns new parameter arrays.

    Parameters missing from `grads` are returned unchanged and keep their
    moments and step count.
    """
    updated: Dict[str, np.ndarray] = {}
    for name, value in params.items():
        g = grads.get(name)
        if g is None:
            updated[name] = value
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
            state.steps[name] = 0
        state.steps[name] += 1
        t = state.steps[name]
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = state.m[name] / (1.0 - state.beta1**t)
        v_hat = state.v[name] / (1.0 - state.beta2**t)
        updated[name] = value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return updated


class Adam:
    """Adam over named parameter groups, each with its own learning rate."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.groups: Dict[str, Dict[str, Tensor]] = {}
        self.states: Dict[str, OptimizerState] = {}

    def add_group(self, name: str, params: Dict[str, Tensor], lr: float) -> None:
        if name in self.groups:
            raise AutodiffError(f"duplicate parameter group {name!r}")
        self.groups[name] = dict(params)
        self.states[name] = OptimizerState(lr=lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)

    def step(self, grads: Gradients, active: Optional[Iterable[str]] = None) -> None:
        """Update parameters in place; groups outside `active` are left untouched."""
        names = list(self.groups) if active is None else [n for n in self.groups if n in set(active)]
        for group in names:
            params = self.groups[group]
            arrays = {k: t.data for k, t in params.items()}
            group_grads = {k: grads[t] for k, t in params.items() if t in grads}
            new = adam_step(self.states[group], arrays, group_grads)
            for k, t in params.items():
                if new[k] is not t.data:
                    t.data[...] = new[k]


# ── Finite-difference verification ───────────────────────────────────────


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    *,
    max_coords: Optional[int] = None,
    seed: int = 0,
    skip_kinks: bool = True,
    kink_tol: float = 1e-2,
    abs_tol: float = 0.0,
) -> float:
    """Max relative error between backward() and central differences.

    `f` rebuilds the graph from the current parameter values on every call.
    Relative error per coordinate is |a - n| / max(1e-8, |a| + |n|).
    Coordinates whose one-sided differences disagree by more than
    `kink_tol` (relative) straddle a kink and are skipped. When both
    estimates are below `abs_tol` the coordinate counts as exact.
    """
    loss = f()
    base = loss.item()
    grads = backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    skipped = 0
    for param in params:
        analytic = grad_of(grads, param).reshape(-1)
        flat = param.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f().item()
            flat[i] = orig - eps
            f_minus = f().item()
            flat[i] = orig
            if skip_kinks:
                fwd = (f_plus - base) / eps
                bwd = (base - f_minus) / eps
                if abs(fwd - bwd) > kink_tol * max(abs(fwd) + abs(bwd), 1e-6):
                    skipped += 1
                    continue
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = analytic[i]
            if abs(a) + abs(numeric) < abs_tol:
                continue
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    if skipped:
        logger.debug("finite_diff_check skipped %d coordinates near kinks", skipped)
    return worst
