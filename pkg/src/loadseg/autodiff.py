"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Tensors are NHWC where spatial layout matters. Storage defaults to float32;
pass float64 arrays (or ``dtype=np.float64``) to get a 64-bit graph, which is
what the gradient-check tests use.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np


class ContractError(ValueError):
    """An operation was called with inputs that violate its contract."""


class NumericError(FloatingPointError):
    """A NaN or Inf showed up in a forward value or a gradient."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph (evaluation / map generation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None, op: str = "leaf"):
        if dtype is None:
            # numpy scalars (from full reductions) keep their precision too
            if isinstance(data, (np.ndarray, np.generic)) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = np.float32
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

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

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _scalar_error(t: Tensor):
    raise ContractError(f"expected a scalar, got shape {t.shape}")


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    if dtype is None and isinstance(x, (np.ndarray, np.generic)) and x.dtype in (np.float32, np.float64):
        dtype = x.dtype
    return Tensor(x, dtype=dtype or np.float32, op="const")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by '{op}'")
    out = Tensor(data, op=op)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# ---- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward, "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _make(a.data * mask, (a,), backward, "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)

    def backward(g):
        return (g * out * (1 - out),)

    return _make(out, (a,), backward, "sigmoid")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log of a non-positive value")

    def backward(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), backward, "log")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _make(out, (a,), backward, "exp")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        return (g * inside,)

    return _make(out, (a,), backward, "clip")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax")


# ---- reductions and shape ------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out, dtype=a.dtype), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).astype(a.dtype),)

    return _make(np.asarray(out, dtype=a.dtype), (a,), backward, "mean")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


# ---- linear layers -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul shapes {a.shape} @ {b.shape}")

    def backward(g):
        return (g @ b.data.T if a.requires_grad else None), a.data.T @ g

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else add(out, b)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """NHWC convolution with a (kh, kw, cin, cout) kernel, via im2col."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ContractError(f"conv2d expects 4-D input and kernel, got {x.shape}, {w.shape}")
    n, h, wd, cin = x.shape
    kh, kw, kcin, cout = w.shape
    if kcin != cin:
        raise ContractError(f"conv2d channel mismatch: input has {cin}, kernel expects {kcin}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    hp, wp = xp.shape[1], xp.shape[2]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ContractError(f"conv2d output would be empty for input {x.shape}")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (n, ho, wo, cin, kh, kw) -> rows of (kh, kw, cin)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(n, ho, wo, cout)
    if b is not None:
        out = out + b.data

    def backward(g):
        g2 = g.reshape(n * ho * wo, cout)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(n, ho, wo, kh, kw, cin)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, padding : padding + h, padding : padding + wd, :] if padding else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0) if b.requires_grad else None)
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward, "conv2d")


# ---- backward pass -------------------------------------------------------

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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward_gradients(output: Tensor, *param_sets) -> dict[str, np.ndarray]:
    """Backpropagate from a scalar and write ``.grad`` on every parameter.

    Parameters in ``param_sets`` that the output does not depend on get an
    all-zero gradient. Leaves outside the given sets that require grad also
    receive their gradient. Returns ``{name: grad}`` over the given sets.
    """
    if output.data.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    leaves: dict[int, np.ndarray] = {}
    if output.requires_grad:
        for node in reversed(_topological(output)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient at node '{node.op}'")
            if node._backward is None:
                leaves[id(node)] = g
                node.grad = g.astype(node.dtype).reshape(node.shape)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    named: dict[str, np.ndarray] = {}
    for params in param_sets:
        for name, t in params.items():
            g = leaves.get(id(t))
            t.grad = np.zeros_like(t.data) if g is None else g.astype(t.dtype).reshape(t.shape)
            named[name] = t.grad
    return named


# ---- gradient check ------------------------------------------------------

def finite_difference_check(
    closure: Callable[[], Tensor],
    params,
    step: float = 1e-4,
    tolerance: float = 1e-4,
    max_coords: int | None = 32,
    seed: int = 0,
) -> dict[str, float]:
    """Compare analytic gradients against central differences.

    Returns the max relative error ``|analytic - numeric| / max(1, |numeric|)``
    per parameter over up to ``max_coords`` sampled coordinates. ``tolerance``
    is only used for the ``passed`` entry of :attr:`GradCheck`.
    """
    if not step > 0:
        raise ContractError(f"finite-difference step must be positive, got {step}")
    first = closure().item()
    second = closure().item()
    if first != second:
        raise ContractError("closure is not deterministic: two identical evaluations differ")
    backward_gradients(closure(), params)
    rng = np.random.default_rng(seed)
    errors = GradCheck(tolerance=tolerance)
    for name, t in params.items():
        analytic = t.grad.copy()
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = closure().item()
            flat[i] = orig - step
            down = closure().item()
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            err = abs(float(analytic.reshape(-1)[i]) - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
        errors[name] = worst
    return errors


class GradCheck(dict):
    """Per-parameter max relative error, with a pass flag."""

    def __init__(self, tolerance: float):
        super().__init__()
        self.tolerance = tolerance

    @property
    def passed(self) -> bool:
        return all(v <= self.tolerance for v in self.values())
