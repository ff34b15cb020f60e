"""Dense float64 tensors with tape-style reverse-mode differentiation.

Every primitive is registered in ``PRIMITIVES`` as a (forward, backward) pair
working on plain numpy arrays.  ``apply_primitive`` runs the forward, checks the
result is finite and wraps it in a :class:`Tensor` that remembers its parents, so
:func:`backward` can walk the graph in reverse creation order.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

_node_ids = itertools.count()


class ShapeError(ValueError):
    def __init__(self, tag: str, expected, got):
        super().__init__(f"{tag}: shape mismatch, expected {expected}, got {got}")
        self.tag = tag
        self.expected = expected
        self.got = got


class NonFiniteError(FloatingPointError):
    def __init__(self, tag: str):
        super().__init__(f"{tag}: produced a non-finite value")
        self.tag = tag


class Tensor:
    """An immutable float64 array plus the graph node that produced it."""

    __slots__ = ("data", "op", "parents", "ctx", "attrs", "requires_grad", "id", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.op: Optional[str] = None
        self.parents: tuple = ()
        self.ctx = None
        self.attrs: dict = {}
        self.requires_grad = requires_grad
        self.id = next(_node_ids)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        label = self.name or self.op or "leaf"
        return f"Tensor({label}, shape={self.shape})"

    # operator sugar; every method routes through apply_primitive
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# primitive table


@dataclass
class Primitive:
    forward: Callable
    backward: Callable
    arity: Optional[int]


PRIMITIVES: Dict[str, Primitive] = {}


def primitive(tag: str, arity: Optional[int]):
    def register(pair):
        fwd, bwd = pair()
        PRIMITIVES[tag] = Primitive(fwd, bwd, arity)
        return pair

    return register


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(tag: str, a: np.ndarray, b: np.ndarray) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(tag, a.shape, b.shape) from None


@primitive("add", 2)
def _add():
    def fwd(xs, attrs):
        _broadcast_shape("add", *xs)
        return xs[0] + xs[1], None

    def bwd(g, xs, out, ctx, attrs):
        return [_unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)]

    return fwd, bwd


@primitive("sub", 2)
def _sub():
    def fwd(xs, attrs):
        _broadcast_shape("sub", *xs)
        return xs[0] - xs[1], None

    def bwd(g, xs, out, ctx, attrs):
        return [_unbroadcast(g, xs[0].shape), _unbroadcast(-g, xs[1].shape)]

    return fwd, bwd


@primitive("mul", 2)
def _mul():
    def fwd(xs, attrs):
        _broadcast_shape("mul", *xs)
        return xs[0] * xs[1], None

    def bwd(g, xs, out, ctx, attrs):
        return [_unbroadcast(g * xs[1], xs[0].shape), _unbroadcast(g * xs[0], xs[1].shape)]

    return fwd, bwd


@primitive("div", 2)
def _div():
    def fwd(xs, attrs):
        _broadcast_shape("div", *xs)
        return xs[0] / xs[1], None

    def bwd(g, xs, out, ctx, attrs):
        a, b = xs
        return [_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)]

    return fwd, bwd


@primitive("maximum", 2)
def _maximum():
    def fwd(xs, attrs):
        _broadcast_shape("maximum", *xs)
        a, b = xs
        pick_a = a >= b
        return np.where(pick_a, a, b), pick_a

    def bwd(g, xs, out, ctx, attrs):
        return [_unbroadcast(np.where(ctx, g, 0.0), xs[0].shape),
                _unbroadcast(np.where(ctx, 0.0, g), xs[1].shape)]

    return fwd, bwd


@primitive("matmul", 2)
def _matmul():
    def fwd(xs, attrs):
        a, b = xs
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError("matmul", "(..., m, k) @ (..., k, n)", (a.shape, b.shape))
        return a @ b, None

    def bwd(g, xs, out, ctx, attrs):
        a, b = xs
        if b.ndim == 2:
            # shared weight matrix: fold the batch axes into one GEMM
            ga = g @ b.T
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return [ga, gb]
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        return [_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)]

    return fwd, bwd


@primitive("transpose", 1)
def _transpose():
    def fwd(xs, attrs):
        (x,) = xs
        axes = attrs.get("axes")
        if axes is None:
            if x.ndim < 2:
                raise ShapeError("transpose", "ndim >= 2", x.shape)
            return np.swapaxes(x, -1, -2), None
        if sorted(axes) != list(range(x.ndim)):
            raise ShapeError("transpose", f"permutation of {x.ndim} axes", axes)
        return np.transpose(x, axes), None

    def bwd(g, xs, out, ctx, attrs):
        axes = attrs.get("axes")
        if axes is None:
            return [np.swapaxes(g, -1, -2)]
        return [np.transpose(g, np.argsort(axes))]

    return fwd, bwd


@primitive("reshape", 1)
def _reshape():
    def fwd(xs, attrs):
        (x,) = xs
        try:
            return x.reshape(attrs["shape"]), None
        except ValueError:
            raise ShapeError("reshape", attrs["shape"], x.shape) from None

    def bwd(g, xs, out, ctx, attrs):
        return [g.reshape(xs[0].shape)]

    return fwd, bwd


@primitive("exp", 1)
def _exp():
    def fwd(xs, attrs):
        with np.errstate(over="ignore"):
            return np.exp(xs[0]), None

    def bwd(g, xs, out, ctx, attrs):
        return [g * out]

    return fwd, bwd


@primitive("log", 1)
def _log():
    def fwd(xs, attrs):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(xs[0]), None

    def bwd(g, xs, out, ctx, attrs):
        return [g / xs[0]]

    return fwd, bwd


@primitive("sqrt", 1)
def _sqrt():
    def fwd(xs, attrs):
        with np.errstate(invalid="ignore"):
            return np.sqrt(xs[0]), None

    def bwd(g, xs, out, ctx, attrs):
        with np.errstate(divide="ignore"):
            return [g * 0.5 / out]

    return fwd, bwd


@primitive("scale", 1)
def _scale():
    def fwd(xs, attrs):
        return xs[0] * attrs["c"], None

    def bwd(g, xs, out, ctx, attrs):
        return [g * attrs["c"]]

    return fwd, bwd


@primitive("softmax", 1)
def _softmax():
    def fwd(xs, attrs):
        x = xs[0]
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True), None

    def bwd(g, xs, out, ctx, attrs):
        return [out * (g - (g * out).sum(axis=-1, keepdims=True))]

    return fwd, bwd


@primitive("log_softmax", 1)
def _log_softmax():
    def fwd(xs, attrs):
        x = xs[0]
        shifted = x - x.max(axis=-1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True)), None

    def bwd(g, xs, out, ctx, attrs):
        return [g - np.exp(out) * g.sum(axis=-1, keepdims=True)]

    return fwd, bwd


@primitive("layer_norm", 1)
def _layer_norm():
    def fwd(xs, attrs):
        x = xs[0]
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + attrs.get("eps", 1e-5))
        y = xc * inv
        # re-centre: removes the rounding residue left by the scaling
        y -= y.mean(axis=-1, keepdims=True)
        return y, inv

    def bwd(g, xs, out, ctx, attrs):
        inv = ctx
        y = xs[0] - xs[0].mean(axis=-1, keepdims=True)
        y = y * inv
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return [inv * (g - gm - y * gy)]

    return fwd, bwd


_GELU_C = np.sqrt(2.0 / np.pi)


@primitive("gelu", 1)
def _gelu():
    # tanh approximation
    def fwd(xs, attrs):
        x = xs[0]
        t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
        return 0.5 * x * (1.0 + t), t

    def bwd(g, xs, out, ctx, attrs):
        x, t = xs[0], ctx
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return [g * (0.5 * (1.0 + t) + 0.5 * x * dt)]

    return fwd, bwd


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


@primitive("sum", 1)
def _sum():
    def fwd(xs, attrs):
        return xs[0].sum(axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False)), None

    def bwd(g, xs, out, ctx, attrs):
        x = xs[0]
        if not attrs.get("keepdims", False):
            g = np.expand_dims(g, _norm_axis(attrs.get("axis"), x.ndim))
        return [np.broadcast_to(g, x.shape).copy()]

    return fwd, bwd


@primitive("mean", 1)
def _mean():
    def fwd(xs, attrs):
        return xs[0].mean(axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False)), None

    def bwd(g, xs, out, ctx, attrs):
        x = xs[0]
        axes = _norm_axis(attrs.get("axis"), x.ndim)
        count = int(np.prod([x.shape[a] for a in axes]))
        if not attrs.get("keepdims", False):
            g = np.expand_dims(g, axes)
        return [np.broadcast_to(g / count, x.shape).copy()]

    return fwd, bwd


@primitive("slice", 1)
def _slice():
    def fwd(xs, attrs):
        try:
            return np.array(xs[0][attrs["index"]]), None
        except IndexError as err:
            raise ShapeError("slice", str(attrs["index"]), xs[0].shape) from err

    def bwd(g, xs, out, ctx, attrs):
        full = np.zeros_like(xs[0])
        index = attrs["index"]
        parts = index if isinstance(index, tuple) else (index,)
        if any(isinstance(p, (np.ndarray, list)) for p in parts):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return [full]

    return fwd, bwd


@primitive("take", 1)
def _take():
    # gather along one axis with an integer index array of any shape
    def fwd(xs, attrs):
        x = xs[0]
        axis = attrs["axis"] % x.ndim
        idx = attrs["indices"]
        if idx.size and (idx.min() < 0 or idx.max() >= x.shape[axis]):
            raise ShapeError("take", f"indices < {x.shape[axis]}", (int(idx.min()), int(idx.max())))
        return np.take(x, idx, axis=axis), axis

    def bwd(g, xs, out, ctx, attrs):
        x = xs[0]
        axis = ctx
        idx = attrs["indices"]
        n = x.shape[axis]
        lead = int(np.prod(x.shape[:axis], dtype=np.int64))
        tail = int(np.prod(x.shape[axis + 1:], dtype=np.int64))
        flat_idx = idx.reshape(-1)
        # g viewed as (lead, idx.size, tail); scatter-add with one bincount
        g3 = g.reshape(lead, flat_idx.size, tail)
        target = (np.arange(lead)[:, None, None] * n + flat_idx[None, :, None]) * tail + np.arange(tail)[None, None, :]
        full = np.bincount(target.reshape(-1), weights=g3.reshape(-1), minlength=lead * n * tail)
        return [full.reshape(x.shape)]

    return fwd, bwd


@primitive("concat", None)
def _concat():
    def fwd(xs, attrs):
        axis = attrs.get("axis", 0)
        try:
            out = np.concatenate(xs, axis=axis)
        except ValueError:
            raise ShapeError("concat", f"equal shapes off axis {axis}", [x.shape for x in xs]) from None
        return out, np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bwd(g, xs, out, ctx, attrs):
        return np.split(g, ctx, axis=attrs.get("axis", 0))

    return fwd, bwd


@primitive("cumsum", 1)
def _cumsum():
    def fwd(xs, attrs):
        return np.cumsum(xs[0], axis=attrs["axis"]), None

    def bwd(g, xs, out, ctx, attrs):
        axis = attrs["axis"]
        return [np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)]

    return fwd, bwd


def apply_primitive(tag: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Run primitive ``tag`` on ``inputs`` and record the graph node."""
    try:
        prim = PRIMITIVES[tag]
    except KeyError:
        raise ValueError(f"unknown primitive {tag!r}") from None
    inputs = [as_tensor(x) for x in inputs]
    if prim.arity is not None and len(inputs) != prim.arity:
        raise ShapeError(tag, f"{prim.arity} inputs", len(inputs))
    data, ctx = prim.forward([x.data for x in inputs], attrs)
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(tag)
    out = Tensor(data)
    out.op = tag
    out.ctx = ctx
    out.attrs = attrs
    out.requires_grad = any(x.requires_grad for x in inputs)
    if out.requires_grad:
        out.parents = tuple(inputs)
    return out


# thin wrappers -------------------------------------------------------------

def add(a, b):
    return apply_primitive("add", [a, b])


def sub(a, b):
    return apply_primitive("sub", [a, b])


def mul(a, b):
    return apply_primitive("mul", [a, b])


def div(a, b):
    return apply_primitive("div", [a, b])


def maximum(a, b):
    return apply_primitive("maximum", [a, b])


def matmul(a, b):
    return apply_primitive("matmul", [a, b])


def transpose(x, axes=None):
    return apply_primitive("transpose", [x], axes=None if axes is None else tuple(axes))


def reshape(x, shape):
    return apply_primitive("reshape", [x], shape=tuple(shape))


def exp(x):
    return apply_primitive("exp", [x])


def log(x):
    return apply_primitive("log", [x])


def sqrt(x):
    return apply_primitive("sqrt", [x])


def scale(x, c: float):
    return apply_primitive("scale", [x], c=float(c))


def softmax(x):
    return apply_primitive("softmax", [x])


def log_softmax(x):
    return apply_primitive("log_softmax", [x])


def layer_norm(x, eps: float = 1e-5):
    return apply_primitive("layer_norm", [x], eps=eps)


def gelu(x):
    return apply_primitive("gelu", [x])


def sum_(x, axis=None, keepdims=False):
    return apply_primitive("sum", [x], axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    return apply_primitive("mean", [x], axis=axis, keepdims=keepdims)


def slice_(x, index):
    return apply_primitive("slice", [x], index=index)


def take(x, indices, axis=-1):
    return apply_primitive("take", [x], indices=np.asarray(indices, dtype=np.intp), axis=axis)


def concat(xs, axis=0):
    return apply_primitive("concat", list(xs), axis=axis)


def cumsum(x, axis=-1):
    return apply_primitive("cumsum", [x], axis=axis)


# ---------------------------------------------------------------------------
# parameters and backward


class ParamStore:
    """Ordered mapping of dotted names to trainable tensors."""

    def __init__(self, entries: Optional[Dict[str, np.ndarray]] = None):
        self._entries: Dict[str, Tensor] = {}
        for name, value in (entries or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(np.array(value, dtype=np.float64))
        t.requires_grad = True
        t.name = name
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def names(self) -> List[str]:
        return list(self._entries)

    def arrays(self) -> Dict[str, np.ndarray]:
        return {k: t.data for k, t in self._entries.items()}

    def set_array(self, name: str, value: np.ndarray) -> None:
        t = self._entries[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != t.data.shape:
            raise ShapeError("set_array", t.data.shape, value.shape)
        t.data = value

    def copy(self) -> "ParamStore":
        return ParamStore({k: t.data.copy() for k, t in self._entries.items()})

    def subset(self, prefix: str) -> Dict[str, Tensor]:
        return {k: t for k, t in self._entries.items() if k.startswith(prefix)}


def _topo_order(root: Tensor) -> List[Tensor]:
    seen = set()
    order = []
    stack = [root]
    while stack:
        node = stack.pop()
        if node.id in seen:
            continue
        seen.add(node.id)
        order.append(node)
        stack.extend(p for p in node.parents if p.requires_grad)
    # parents always have smaller ids than their children
    order.sort(key=lambda t: t.id, reverse=True)
    return order


def grad_all(loss: Tensor) -> Dict[int, np.ndarray]:
    """Gradients of ``loss`` for every reachable tensor, keyed by tensor id."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ValueError(f"non-scalar loss of shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in _topo_order(loss):
        g = grads.pop(node.id, None) if node.parents else grads.get(node.id)
        if g is None or not node.parents:
            continue
        prim = PRIMITIVES[node.op]
        parent_grads = prim.backward(g, [p.data for p in node.parents], node.data, node.ctx, node.attrs)
        for parent, pg in zip(node.parents, parent_grads):
            if not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    return grads


def backward(loss: Tensor, params: Optional[ParamStore] = None) -> Dict[str, np.ndarray]:
    """Reverse-mode pass from a scalar ``loss``.

    Returns a gradient for every parameter in ``params`` (zeros for parameters
    the loss does not depend on).  Without ``params``, named leaves reachable
    from the loss are returned.
    """
    grads = grad_all(loss)
    if params is None:
        return {
            node.name: grads.get(node.id, np.zeros_like(node.data))
            for node in _topo_order(loss)
            if not node.parents and node.name is not None
        }
    return {name: grads.get(t.id, np.zeros_like(t.data)) for name, t in params.items()}


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class FDReport:
    max_rel_err: Dict[str, float] = field(default_factory=dict)
    coords_checked: Dict[str, int] = field(default_factory=dict)
    tol: float = 1e-5

    @property
    def passed(self) -> bool:
        return all(err < self.tol for err in self.max_rel_err.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    def __str__(self) -> str:
        lines = [f"{name}: max rel err {err:.3e} over {self.coords_checked[name]} coords"
                 for name, err in self.max_rel_err.items()]
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)


def finite_diff_check(
    f: Callable[[ParamStore], Tensor],
    params: ParamStore,
    h: float = 1e-5,
    tol: float = 1e-5,
    max_coords: Optional[int] = 64,
    seed: int = 0,
    names: Optional[Iterable[str]] = None,
    grads: Optional[Dict[str, np.ndarray]] = None,
    step_scale: Optional[Dict[str, float]] = None,
) -> FDReport:
    """Compare reverse-mode gradients of ``f`` with central differences.

    ``max_coords`` caps the number of probed coordinates per tensor; the
    subsample is drawn from ``seed`` and logged.  ``grads`` lets a caller
    supply the analytic gradients to be checked instead of computing them.
    ``step_scale`` multiplies ``h`` for the named tensors, for weights that
    only reach the loss through a small constant factor.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if grads is None:
        grads = backward(f(params), params)
    rng = np.random.default_rng(seed)
    report = FDReport(tol=tol)

    def probe() -> float:
        val = f(params).item()
        if not np.isfinite(val):
            raise NonFiniteError("finite_diff_check")
        return val

    for name in names if names is not None else params.names():
        t = params[name]
        flat = t.data.reshape(-1)
        n = flat.size
        if max_coords is None or n <= max_coords:
            coords = np.arange(n)
        else:
            coords = np.sort(rng.choice(n, size=max_coords, replace=False))
        logger.debug("fd check %s: coords %s", name, coords.tolist())
        g_ad = grads[name].reshape(-1)
        step = h * (step_scale or {}).get(name, 1.0)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            f_plus = probe()
            flat[c] = orig - step
            f_minus = probe()
            flat[c] = orig
            g_fd = (f_plus - f_minus) / (2 * step)
            err = abs(g_ad[c] - g_fd) / max(1e-8, abs(g_ad[c]) + abs(g_fd))
            worst = max(worst, err)
        report.max_rel_err[name] = worst
        report.coords_checked[name] = len(coords)
    return report
