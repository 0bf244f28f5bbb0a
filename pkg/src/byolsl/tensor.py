"""Dense tensors with reverse-mode automatic differentiation.

Every primitive below computes its forward value with numpy and, when any
input participates in differentiation, attaches a backward closure to the
output. ``backward`` orders the recorded graph topologically, replays it in
reverse, and frees it afterwards, so each graph supports exactly one
backward pass.

Numerics follow the dtype of the inputs: tests and gradient checks run in
float64, training runs in float32 (see ``set_default_dtype``).
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

L2_EPS = 1e-12

_state = {
    "grad_enabled": True,
    "dtype": np.float64,
    "check_finite": False,
    "deterministic": False,
}
_branch_log: list | None = None
_threadpool_limiter = None


class DimensionError(ValueError):
    """Operand shapes do not conform for a primitive."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class NumericError(ArithmeticError):
    """A non-finite value appeared in an intermediate result."""


# ---------------------------------------------------------------- global modes


def set_default_dtype(dtype) -> None:
    _state["dtype"] = np.dtype(dtype).type


def get_default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def default_dtype(dtype):
    old = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


def is_grad_enabled() -> bool:
    return _state["grad_enabled"]


def set_deterministic(flag: bool) -> None:
    """Pin BLAS to one thread so reductions run in a fixed order."""
    global _threadpool_limiter
    _state["deterministic"] = bool(flag)
    if flag and _threadpool_limiter is None:
        from threadpoolctl import threadpool_limits

        _threadpool_limiter = threadpool_limits(limits=1)
    elif not flag and _threadpool_limiter is not None:
        _threadpool_limiter.restore_original_limits()
        _threadpool_limiter = None


def is_deterministic() -> bool:
    return _state["deterministic"]


@contextlib.contextmanager
def check_finite():
    """Raise NumericError as soon as any primitive emits inf or nan."""
    old = _state["check_finite"]
    _state["check_finite"] = True
    try:
        yield
    finally:
        _state["check_finite"] = old


def record_branch(op: str, key: np.ndarray) -> None:
    """Log which side of a non-differentiable decision was taken.

    Used by ``grad_check`` to exclude elements whose finite-difference
    probes straddle a kink (relu at 0, max-pool ties, threshold masks).
    """
    if _branch_log is not None:
        _branch_log.append((op, np.asarray(key).tobytes()))


# ---------------------------------------------------------------------- Tensor


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
            arr = data
        else:
            arr = np.asarray(data, dtype=_state["dtype"])
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.name = name

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
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operators
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _state["dtype"]
    return Tensor(np.asarray(x, dtype=dtype))


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=_state["dtype"]), requires_grad=True, name=name)


def stop_gradient(x: Tensor) -> Tensor:
    """Same values as ``x``; nothing upstream of it receives gradient."""
    out = Tensor(x.data)
    out.op = "stop_gradient"
    return out


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    if _state["check_finite"] and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite output from primitive '{op}' (shape {data.shape})")
    out = Tensor(data)
    out.op = op
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        b = as_tensor(b, like=a)
    else:
        a = as_tensor(a, like=b)
    return a, b


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ------------------------------------------------------------------ primitives


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "div")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar."""
    c = float(c)

    def backward(g):
        return (g * c,)

    return _make(a.data * a.data.dtype.type(c), (a,), backward, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _binary_operands(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    record_branch("relu", mask)

    def backward(g):
        return (g * mask,)

    return _make(x.data * mask, (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), backward, "sigmoid")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return _make(out, (x,), backward, "log")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _make(out, (x,), backward, "exp")


def sqrt(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)

    def backward(g):
        return (g * 0.5 / out,)

    return _make(out, (x,), backward, "sqrt")


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _make(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape),)

    return _make(np.asarray(out), (x,), backward, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view shape {x.shape} as {tuple(shape)}") from None

    def backward(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), backward, "reshape")


def transpose(x: Tensor) -> Tensor:
    """Swap the two axes of a matrix."""
    if x.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {x.shape}")

    def backward(g):
        return (g.T,)

    return _make(x.data.T, (x,), backward, "transpose")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[x.shape for x in xs]}") from None
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def backward(g):
        idx = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            grads.append(g[tuple(idx)])
        return grads

    return _make(out, tuple(xs), backward, "concat")


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """x / max(||x||, 1e-12) along ``axis``; the floor guards zero vectors."""
    d = x.data
    raw = np.sqrt((d * d).sum(axis=axis, keepdims=True))
    floored = raw < L2_EPS
    record_branch("l2_floor", floored)
    norm = np.where(floored, d.dtype.type(L2_EPS), raw)
    out = d / norm

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(floored, g, g - out * dot) / norm,)

    return _make(out, (x,), backward, "l2_normalize")


def standardize(x: Tensor, axes, eps: float, return_stats: bool = False):
    """(x - mean) / sqrt(var + eps) with mean and population variance over ``axes``.

    Fused equivalent of the mean/sub/mul/sqrt/div composite; the backward
    pass is the closed-form Jacobian-vector product.
    """
    axes = _norm_axis(axes, x.ndim)
    d = x.data
    mu = d.mean(axis=axes, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + d.dtype.type(eps))
    out = xc * inv

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * out).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - out * gxm),)

    res = _make(out, (x,), backward, "standardize")
    if return_stats:
        return res, mu, var
    return res


def _pad(x: np.ndarray, padding: int, value=0.0) -> np.ndarray:
    if padding == 0:
        return x
    p = padding
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW batch with an OIkk kernel."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d: input {x.shape} and kernel {w.shape} do not conform")
    if stride not in (1, 2):
        raise ContractError(f"conv2d: stride must be 1 or 2, got {stride}")
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    p, s = padding, stride
    ho = (h + 2 * p - k) // s + 1
    wo = (wd + 2 * p - k) // s + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: input {x.shape} too small for kernel {w.shape}")
    # im2col in channels-last order: cols[n, y, x, i, j, c]
    xp = np.zeros((n, h + 2 * p, wd + 2 * p, c), dtype=x.dtype)
    xp[:, p : p + h, p : p + wd, :] = x.data.transpose(0, 2, 3, 1)
    cols = np.empty((n, ho, wo, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i : i + s * ho : s, j : j + s * wo : s, :]
    cols = cols.reshape(n * ho * wo, k * k * c)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(o, k * k * c)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = None
        if w.requires_grad:
            gw = (gmat.T @ cols).reshape(o, k, k, c).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, ho, wo, k, k, c)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, i : i + s * ho : s, j : j + s * wo : s, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, p : p + h, p : p + wd, :].transpose(0, 3, 1, 2)
        return gx, gw

    return _make(out, (x, w), backward, "conv2d")


def max_pool2d(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"max_pool2d: expected NCHW input, got {x.shape}")
    n, c, h, wd = x.shape
    xp = _pad(x.data, padding, value=-np.inf)
    ho = (h + 2 * padding - kernel) // stride + 1
    wo = (wd + 2 * padding - kernel) // stride + 1
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    # a tie between window entries is a kink of max
    ties = (flat == out[..., None]).sum(axis=-1) > 1
    record_branch("max_pool2d", np.concatenate([arg.ravel(), ties.ravel()]))

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        di, dj = np.divmod(arg, kernel)
        nn_, cc, ii, jj = np.indices(arg.shape)
        np.add.at(gxp, (nn_, cc, ii * stride + di, jj * stride + dj), g)
        return (gxp[:, :, padding : padding + h, padding : padding + wd],)

    return _make(np.ascontiguousarray(out), (x,), backward, "max_pool2d")


# -------------------------------------------------------------------- backward


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that carry gradient, parents first."""
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


def backward(loss: Tensor, retain_graph: bool = False) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every grad-flagged leaf.

    Returns a map from each such leaf to its gradient. The graph is freed
    afterwards unless ``retain_graph``.
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = np.array(g, dtype=node.dtype).reshape(node.shape)
            node.grad = g if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        if not retain_graph:
            node._parents = ()
            node._backward = None
    return leaves


# ------------------------------------------------------------------ grad check


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    excluded: dict[str, list[tuple[int, ...]]]
    tolerance: float
    worst_elements: dict[str, tuple[int, ...]] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def __str__(self) -> str:
        lines = []
        for name, err in self.errors.items():
            status = "ok" if err <= self.tolerance else "FAIL"
            skipped = len(self.excluded.get(name, []))
            extra = f" ({skipped} excluded)" if skipped else ""
            lines.append(f"{name}: rel.err {err:.2e} {status}{extra}")
        return "\n".join(lines)


def _relative_error(a: np.ndarray, n: np.ndarray) -> float:
    num = float(np.linalg.norm(a - n))
    den = float(np.linalg.norm(a) + np.linalg.norm(n))
    if den < 1e-12:
        return num
    return num / den


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-3,
    names: Sequence[str] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``fn(*inputs)`` must return a scalar. The relative error per input is
    ``|a - n| / (|a| + |n|)`` over all its non-excluded elements. Elements
    whose +step/-step probes take different branches at any kink are
    excluded and listed in the report.
    """
    global _branch_log
    if step <= 0:
        raise ContractError("grad_check: step must be positive")
    inputs = list(inputs)
    names = list(names) if names is not None else [f"input{i}" for i in range(len(inputs))]
    for name, x in zip(names, inputs):
        if not np.all(np.isfinite(x.data)):
            raise NumericError(f"grad_check: non-finite values in {name}")
        x.grad = None
        x.requires_grad = True

    def evaluate() -> tuple[float, list]:
        global _branch_log
        _branch_log = []
        try:
            with no_grad():
                val = fn(*inputs)
            return float(val.data), _branch_log
        finally:
            _branch_log = None

    with check_finite():
        loss = fn(*inputs)
        backward(loss)
    analytic = [x.grad if x.grad is not None else np.zeros_like(x.data) for x in inputs]
    _, base_branches = evaluate()

    errors: dict[str, float] = {}
    excluded: dict[str, list[tuple[int, ...]]] = {}
    worst: dict[str, tuple[int, ...]] = {}
    for name, x, a in zip(names, inputs, analytic):
        numeric = np.zeros_like(x.data)
        keep = np.ones(x.shape, dtype=bool)
        worst_gap = -1.0
        for idx in np.ndindex(*x.shape):
            orig = x.data[idx]
            x.data[idx] = orig + step
            fp, bp = evaluate()
            x.data[idx] = orig - step
            fm, bm = evaluate()
            x.data[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"grad_check: non-finite loss probing {name}{list(idx)}")
            if bp != base_branches or bm != base_branches:
                keep[idx] = False
                excluded.setdefault(name, []).append(idx)
                continue
            numeric[idx] = (fp - fm) / (2 * step)
            gap = abs(numeric[idx] - a[idx])
            if gap > worst_gap:
                worst_gap, worst[name] = gap, idx
        errors[name] = _relative_error(a[keep], numeric[keep])
        x.grad = None
    return GradCheckReport(errors=errors, excluded=excluded, tolerance=tolerance, worst_elements=worst)


def tensors(*arrays: Iterable, requires_grad: bool = True) -> list[Tensor]:
    return [Tensor(np.asarray(a, dtype=_state["dtype"]), requires_grad=requires_grad) for a in arrays]
