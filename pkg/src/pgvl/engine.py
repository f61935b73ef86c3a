"""Dense arrays with a dynamically recorded reverse-mode tape.

Every fusion equation is written against the small vocabulary in this
module: matmul, transpose, softmax over rows, concat/split, elementwise
add/mul/scale, linear, gather_rows and the two losses.  Operations accept
optional leading batch axes so a minibatch runs as one pass; the trailing
two axes are always (rows, channels).

Numerics are numpy.  The tape is ours: each result keeps references to its
parents plus a closure mapping the upstream gradient to parent gradients.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_check_finite = os.environ.get("PGVL_DEBUG", "") not in ("", "0")


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


def set_debug(enabled: bool) -> None:
    """Toggle the per-operation finiteness assertion."""
    global _check_finite
    _check_finite = bool(enabled)


def debug_enabled() -> bool:
    return _check_finite


class Array:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _DTYPES:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        if arr.dtype not in _DTYPES:
            raise TypeError(f"unsupported dtype {arr.dtype}")
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Array | None = None
        self._parents: tuple[Array, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Array:
        return Array(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Array(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Array:
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def _lift(x, like: Array) -> Array:
    if isinstance(x, Array):
        return x
    return Array(np.full(like.shape, x, dtype=like.dtype))


def _result(data: np.ndarray, parents: Sequence[Array], grad_fn: Callable) -> Array:
    if _check_finite and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {grad_fn.__qualname__.split('.')[0]}")
    out = Array(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
    return out


def _same_dtype(*arrays: Array) -> None:
    dts = {a.dtype for a in arrays}
    if len(dts) > 1:
        raise TypeError(f"dtype mismatch: {sorted(str(d) for d in dts)}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a: Array, b: Array) -> Array:
    _same_dtype(a, b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from None

    def grad_fn(g):
        gb = _unbroadcast(g, b.shape)
        # downstream kernels may update gradients in place, so never hand out one buffer twice
        return _unbroadcast(g, a.shape), gb.copy() if gb is g else gb

    return _result(out, (a, b), grad_fn)


def sub(a: Array, b: Array) -> Array:
    _same_dtype(a, b)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}") from None

    def grad_fn(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _result(out, (a, b), grad_fn)


def mul(a: Array, b: Array) -> Array:
    _same_dtype(a, b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from None

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), grad_fn)


def scale(a: Array, c: float) -> Array:
    c = a.dtype.type(c)

    def grad_fn(g):
        return (g * c,)

    return _result(a.data * c, (a,), grad_fn)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Array, b: Array) -> Array:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    _same_dtype(a, b)
    out = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), grad_fn)


def transpose(a: Array) -> Array:
    """Swap the trailing two axes."""
    if a.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 axes, got {a.shape}")

    def grad_fn(g):
        return (np.swapaxes(g, -1, -2),)

    return _result(np.ascontiguousarray(np.swapaxes(a.data, -1, -2)), (a,), grad_fn)


def linear(x: Array, weight: Array, bias: Array | None = None) -> Array:
    """x @ weight + bias with weight (in, out) shared over all leading axes."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    _same_dtype(x, weight)
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        gx = g @ weight.data.T if x.requires_grad else None
        flat_x = x.data.reshape(-1, x.shape[-1])
        flat_g = g.reshape(-1, g.shape[-1])
        gw = flat_x.T @ flat_g
        if bias is None:
            return gx, gw
        return gx, gw, flat_g.sum(axis=0)

    return _result(out, parents, grad_fn)


def softmax_rows(a: Array) -> Array:
    """Softmax over the last axis, max-subtracted."""
    if _check_finite and not np.all(np.isfinite(a.data)):
        raise NonFiniteError("softmax_rows: non-finite input")
    y = a.data - a.data.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        # g is owned by the tape and not reused, so update it in place
        dot = np.einsum("...ij,...ij->...i", g, y)
        g -= dot[..., None]
        g *= y
        return (g,)

    return _result(y, (a,), grad_fn)


# ---------------------------------------------------------------- structure

def concat(parts: Sequence[Array], axis: int = -1) -> Array:
    if not parts:
        raise ShapeError("concat: empty list")
    _same_dtype(*parts)
    ndim = parts[0].ndim
    ax = axis % ndim
    for p in parts:
        if p.ndim != ndim or p.shape[:ax] + p.shape[ax + 1:] != parts[0].shape[:ax] + parts[0].shape[ax + 1:]:
            raise ShapeError(f"concat along axis {axis}: inconsistent shapes {[q.shape for q in parts]}")
    sizes = [p.shape[ax] for p in parts]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([p.data for p in parts], axis=ax)

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(out, tuple(parts), grad_fn)


def split(a: Array, sizes: Sequence[int], axis: int = -1) -> list[Array]:
    ax = axis % a.ndim
    if sum(sizes) != a.shape[ax] or any(s <= 0 for s in sizes):
        raise ShapeError(f"split: sizes {list(sizes)} do not partition axis of length {a.shape[ax]}")
    out = []
    start = 0
    for s in sizes:
        out.append(slice_axis(a, start, start + s, axis=ax))
        start += s
    return out


def slice_axis(a: Array, start: int, stop: int, axis: int = -1) -> Array:
    ax = axis % a.ndim
    if not 0 <= start < stop <= a.shape[ax]:
        raise ShapeError(f"slice [{start}, {stop}) out of range for axis of length {a.shape[ax]}")
    index = [slice(None)] * a.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)

    def grad_fn(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _result(np.ascontiguousarray(a.data[index]), (a,), grad_fn)


def reshape(a: Array, shape: Sequence[int]) -> Array:
    def grad_fn(g):
        return (g.reshape(a.shape),)

    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _result(out, (a,), grad_fn)


def expand(a: Array, batch: int) -> Array:
    """Repeat an array along a new leading batch axis."""
    def grad_fn(g):
        return (g.sum(axis=0),)

    return _result(np.broadcast_to(a.data, (batch,) + a.shape).copy(), (a,), grad_fn)


def gather_rows(a: Array, index) -> Array:
    """Pick rows of the trailing (rows, channels) matrix.

    ``index`` has shape (..., k) matching ``a``'s leading axes; the result has
    shape (..., k, channels).
    """
    idx = np.asarray(index, dtype=np.int64)
    lead = a.shape[:-2]
    if idx.shape[:-1] != lead:
        raise ShapeError(f"gather_rows: index {idx.shape} does not match leading axes of {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[-2]):
        raise IndexError(f"gather_rows: row index out of range for {a.shape[-2]} rows")
    flat = a.data.reshape((-1,) + a.shape[-2:])
    fidx = idx.reshape(flat.shape[0], -1)
    batch = np.arange(flat.shape[0])[:, None]
    out = flat[batch, fidx].reshape(idx.shape + (a.shape[-1],))

    def grad_fn(g):
        full = np.zeros(flat.shape, dtype=g.dtype)
        np.add.at(full, (batch, fidx), g.reshape(fidx.shape + (a.shape[-1],)))
        return (full.reshape(a.shape),)

    return _result(out, (a,), grad_fn)


# ---------------------------------------------------------------- reductions / losses

def sum_all(a: Array) -> Array:
    def grad_fn(g):
        return (np.broadcast_to(g.reshape(()), a.shape).copy(),)

    return _result(np.asarray([a.data.sum()], dtype=a.dtype), (a,), grad_fn)


def mean_all(a: Array) -> Array:
    n = a.size

    def grad_fn(g):
        return (np.full(a.shape, g.reshape(()) / n, dtype=a.dtype),)

    return _result(np.asarray([a.data.mean()], dtype=a.dtype), (a,), grad_fn)


def mse(pred: Array, target, mask=None) -> Array:
    """Mean squared error over the elements selected by ``mask``.

    ``target`` is a constant; ``mask`` broadcasts against ``pred``.  An empty
    selection yields 0.
    """
    t = target.data if isinstance(target, Array) else np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {t.shape}")
    m = np.ones(pred.shape, dtype=pred.dtype) if mask is None else np.broadcast_to(
        np.asarray(mask, dtype=pred.dtype), pred.shape)
    count = m.sum()
    diff = (pred.data - t) * m
    value = (diff * diff).sum() / count if count > 0 else 0.0

    def grad_fn(g):
        if count == 0:
            return (np.zeros(pred.shape, dtype=pred.dtype),)
        return (g.reshape(()) * 2.0 * diff / count,)

    return _result(np.asarray([value], dtype=pred.dtype), (pred,), grad_fn)


def cross_entropy_rows(logits: Array, targets, row_mask=None, col_mask=None) -> Array:
    """Mean softmax cross-entropy of each logit row against an integer class.

    ``logits`` is (..., m, n), ``targets`` (..., m).  Rows outside ``row_mask``
    do not count; columns outside ``col_mask`` (shape (..., n)) are removed
    from every softmax.  Returns 0 when no row is selected.
    """
    x = logits.data
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != x.shape[:-1]:
        raise ShapeError(f"cross_entropy_rows: targets {tgt.shape} vs logits {x.shape}")
    rows = np.ones(tgt.shape, dtype=bool) if row_mask is None else np.asarray(row_mask, dtype=bool)
    if col_mask is None:
        cols = np.ones(x.shape[:-2] + (x.shape[-1],), dtype=bool)
    else:
        cols = np.asarray(col_mask, dtype=bool)
    cols = cols[..., None, :]
    shifted = np.where(cols, x, -np.inf)
    shifted = shifted - np.where(rows[..., None], shifted.max(axis=-1, keepdims=True), 0.0)
    shifted = np.where(rows[..., None], shifted, 0.0)
    e = np.where(cols, np.exp(np.where(cols, shifted, 0.0)), 0.0)
    z = e.sum(axis=-1, keepdims=True)
    z = np.where(z > 0, z, 1.0)
    p = e / z
    picked = np.take_along_axis(shifted, tgt[..., None], axis=-1)[..., 0]
    nll = np.log(z[..., 0]) - picked
    count = rows.sum()
    value = float(np.where(rows, nll, 0.0).sum() / count) if count else 0.0

    def grad_fn(g):
        if count == 0:
            return (np.zeros_like(x),)
        onehot = np.zeros_like(x)
        np.put_along_axis(onehot, tgt[..., None], 1.0, axis=-1)
        gx = (p - onehot) * rows[..., None] / count
        return (g.reshape(()) * gx.astype(x.dtype),)

    return _result(np.asarray([value], dtype=x.dtype), (logits,), grad_fn)


# ---------------------------------------------------------------- backward

def backward(loss: Array) -> None:
    """Accumulate ``grad`` on every reachable leaf array that requires it.

    Intermediate results do not keep their gradients.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Array] = []
    seen: set[int] = set()
    stack: list[tuple[Array, bool]] = [(loss, False)]
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
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = Array(g if node.grad is None else node.grad.data + g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=parent.dtype)


# ---------------------------------------------------------------- parameters

@dataclass
class Parameter:
    """Named learnable array."""

    name: str
    value: Array
    init_scheme: str = "scaled-normal"

    @property
    def grad(self) -> Array | None:
        return self.value.grad


def init_parameter(name: str, shape: Sequence[int], rng: np.random.Generator, scheme: str = "normal",
                   sigma: float = 0.02, dtype=np.float32) -> Parameter:
    if scheme == "zeros":
        data = np.zeros(shape, dtype=dtype)
    elif scheme == "normal":
        data = (rng.standard_normal(shape) * sigma).astype(dtype)
    elif scheme == "identity":
        data = np.eye(*shape, dtype=dtype)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return Parameter(name, Array(data, requires_grad=True, name=name),
                     "scaled-normal" if scheme == "normal" else scheme)


class ParamStore:
    """Insertion-ordered collection of uniquely named parameters."""

    def __init__(self, params: Sequence[Parameter] = ()):
        self._params: dict[str, Parameter] = {}
        for p in params:
            self.add(p)

    def add(self, param: Parameter) -> Parameter:
        if param.name in self._params:
            raise KeyError(f"duplicate parameter name {param.name!r}")
        self._params[param.name] = param
        return param

    def create(self, name: str, shape, rng, scheme: str = "normal", sigma: float = 0.02, dtype=np.float32) -> Array:
        return self.add(init_parameter(name, shape, rng, scheme, sigma, dtype)).value

    def update(self, other: ParamStore) -> None:
        for p in other.parameters():
            self.add(p)

    def __getitem__(self, name: str) -> Array:
        return self._params[name].value

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: p.value.data for n, p in self._params.items()}

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.value.grad = None

    def with_prefix(self, prefix: str) -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]
