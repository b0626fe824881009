"""Reverse-mode automatic differentiation over dense float64 arrays.

Every tensor op the models and losses need lives here: elementwise
arithmetic, matmul, a dilated causal 1-D convolution, batch normalization,
softmax, reductions, and shape ops. Each op records a node on the active
``Tape``; ``Tape.backward`` replays the records once, in reverse, to
accumulate gradients. Tapes are rebuilt per forward pass (define-by-run).

A tape is single-threaded; independent tapes may run on independent
threads (the active-tape stack is thread-local). DiffArray values are
never mutated after construction and are safe to share read-only.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DiffArray",
    "Tape",
    "GradientMap",
    "ShapeMismatch",
    "GradCheckReport",
    "active_tape",
    "record",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "exp",
    "log",
    "sqrt",
    "relu",
    "matmul",
    "causal_conv1d",
    "batch_norm",
    "softmax",
    "asum",
    "amean",
    "amin",
    "amax",
    "take",
    "concat",
    "transpose",
    "reshape",
    "grad_check",
]


class ShapeMismatch(ValueError):
    """Raised when a primitive gets arrays it cannot combine."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        detail = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {detail}")


class DiffArray:
    """Dense float64 value, optionally recorded on the active tape.

    NaN/Inf are rejected at construction so a non-finite intermediate
    fails loudly at the op that produced it. Treat ``values`` as
    immutable once wrapped.
    """

    __slots__ = ("values", "node_id")

    def __init__(self, values, node_id: int | None = None):
        arr = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("DiffArray requires finite values (got NaN or Inf)")
        self.values = arr
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.values.shape)

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        tag = "" if self.node_id is None else f", node={self.node_id}"
        return f"DiffArray(shape={self.shape}{tag})"

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

    def __pow__(self, p):
        return power(self, p)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return take(self, key)


class _Node:
    __slots__ = ("op", "parents", "backward")

    def __init__(self, op, parents, backward):
        self.op = op
        self.parents = parents  # tuple of node ids (None for constants)
        self.backward = backward  # grad_out -> grads aligned with parents


_TLS = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of one forward pass.

    Nodes are appended in execution order, so inputs always precede their
    consumers and one reverse sweep visits every node exactly once.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> bool:
        popped = _tape_stack().pop()
        assert popped is self, "tape stack corrupted"
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def leaf(self, values) -> DiffArray:
        """Register an input the backward pass should differentiate against."""
        out = DiffArray(values)
        self._nodes.append(_Node("leaf", (), None))
        out.node_id = len(self._nodes) - 1
        return out

    def _record(self, op, values, parent_ids, backward) -> DiffArray:
        out = DiffArray(values)
        self._nodes.append(_Node(op, parent_ids, backward))
        out.node_id = len(self._nodes) - 1
        return out

    def backward(self, root: DiffArray) -> "GradientMap":
        """Accumulate d(root)/d(node) for everything recorded before root.

        ``root`` must be a scalar recorded on this tape. A node feeding
        several consumers receives the sum of their contributions.
        """
        if root.node_id is None or root.node_id >= len(self._nodes):
            raise ValueError("backward: root is not recorded on this tape")
        if root.size != 1:
            raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.values)}
        for nid in range(root.node_id, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = self._nodes[nid]
            if node.backward is None:
                continue
            for pid, pg in zip(node.parents, node.backward(g)):
                if pid is None or pg is None:
                    continue
                acc = grads.get(pid)
                grads[pid] = pg if acc is None else acc + pg
        return GradientMap(grads)


class GradientMap:
    """Backward-pass result, indexable by the DiffArrays themselves.

    Arrays that were never recorded (or not reached from the root) get a
    zero gradient rather than an error.
    """

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def __getitem__(self, arr: DiffArray) -> np.ndarray:
        if arr.node_id is not None and arr.node_id in self._grads:
            return self._grads[arr.node_id]
        return np.zeros_like(arr.values)


def _lift(x) -> DiffArray:
    return x if isinstance(x, DiffArray) else DiffArray(x)


def record(op: str, values, parents: Sequence[DiffArray], backward) -> DiffArray:
    """Emit one op on the active tape (or a plain constant when detached).

    ``backward(grad_out)`` must return gradient arrays aligned with
    ``parents`` (None entries are skipped). This is the extension hook
    custom ops such as the alignment loss use.
    """
    tape = active_tape()
    if tape is None or all(p.node_id is None for p in parents):
        return DiffArray(values)
    return tape._record(op, values, tuple(p.node_id for p in parents), backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_values(op: str, a: DiffArray, b: DiffArray, fn) -> np.ndarray:
    # non-finite results are rejected downstream by the DiffArray guard
    try:
        with np.errstate(all="ignore"):
            return fn(a.values, b.values)
    except ValueError:
        raise ShapeMismatch(op, a.shape, b.shape) from None


def add(a, b) -> DiffArray:
    a, b = _lift(a), _lift(b)
    out = _binary_values("add", a, b, np.add)
    ash, bsh = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return record("add", out, (a, b), backward)


def sub(a, b) -> DiffArray:
    a, b = _lift(a), _lift(b)
    out = _binary_values("sub", a, b, np.subtract)
    ash, bsh = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, ash), _unbroadcast(-g, bsh)

    return record("sub", out, (a, b), backward)


def mul(a, b) -> DiffArray:
    a, b = _lift(a), _lift(b)
    out = _binary_values("mul", a, b, np.multiply)
    av, bv = a.values, b.values
    ash, bsh = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g * bv, ash), _unbroadcast(g * av, bsh)

    return record("mul", out, (a, b), backward)


def div(a, b) -> DiffArray:
    a, b = _lift(a), _lift(b)
    out = _binary_values("div", a, b, np.divide)
    av, bv = a.values, b.values
    ash, bsh = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g / bv, ash), _unbroadcast(-g * av / (bv * bv), bsh)

    return record("div", out, (a, b), backward)


def neg(x) -> DiffArray:
    x = _lift(x)

    def backward(g):
        return (-g,)

    return record("neg", -x.values, (x,), backward)


def power(x, p) -> DiffArray:
    """Elementwise x**p for a constant (non-differentiated) exponent p."""
    x = _lift(x)
    p = float(p)
    xv = x.values
    with np.errstate(all="ignore"):
        out = xv**p

    def backward(g):
        return (g * p * xv ** (p - 1.0),)

    return record("power", out, (x,), backward)


def exp(x) -> DiffArray:
    x = _lift(x)
    with np.errstate(all="ignore"):
        out = np.exp(x.values)

    def backward(g):
        return (g * out,)

    return record("exp", out, (x,), backward)


def log(x) -> DiffArray:
    x = _lift(x)
    xv = x.values
    with np.errstate(all="ignore"):
        out = np.log(xv)

    def backward(g):
        return (g / xv,)

    return record("log", out, (x,), backward)


def sqrt(x) -> DiffArray:
    """Elementwise square root; the subgradient at 0 is taken as 0."""
    x = _lift(x)
    xv = x.values
    with np.errstate(all="ignore"):
        out = np.sqrt(xv)

    def backward(g):
        d = np.zeros_like(xv)
        np.divide(0.5, out, out=d, where=xv > 0)
        return (g * d,)

    return record("sqrt", out, (x,), backward)


def relu(x) -> DiffArray:
    """max(x, 0); the subgradient at the kink is 0."""
    x = _lift(x)
    xv = x.values
    out = np.maximum(xv, 0.0)

    def backward(g):
        return (g * (xv > 0),)

    return record("relu", out, (x,), backward)


def matmul(a, b) -> DiffArray:
    """Matrix product; stacked inputs must share identical leading dims."""
    a, b = _lift(a), _lift(b)
    if (
        a.ndim < 2
        or b.ndim < 2
        or a.ndim != b.ndim
        or a.shape[:-2] != b.shape[:-2]
        or a.shape[-1] != b.shape[-2]
    ):
        raise ShapeMismatch("matmul", a.shape, b.shape)
    out = a.values @ b.values
    av, bv = a.values, b.values
    need_a = a.node_id is not None
    need_b = b.node_id is not None

    def backward(g):
        ga = g @ np.swapaxes(bv, -1, -2) if need_a else None
        gb = np.swapaxes(av, -1, -2) @ g if need_b else None
        return ga, gb

    return record("matmul", out, (a, b), backward)


def causal_conv1d(x, w, dilation: int = 1) -> DiffArray:
    """Dilated causal 1-D convolution.

    x: (batch, in_ch, time), w: (out_ch, in_ch, kernel). The time axis is
    padded on the left only, by dilation*(kernel-1), so output[t] never
    depends on input beyond t and the output length equals the input's.
    """
    x, w = _lift(x), _lift(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch("causal_conv1d", x.shape, w.shape)
    if dilation < 1:
        raise ValueError("causal_conv1d: dilation must be >= 1")
    batch, _, t_len = x.shape
    out_ch, _, kernel = w.shape
    pad = dilation * (kernel - 1)
    xp = np.pad(x.values, ((0, 0), (0, 0), (pad, 0)))
    wv = w.values
    out = np.zeros((batch, out_ch, t_len))
    for j in range(kernel):
        seg = xp[:, :, j * dilation : j * dilation + t_len]
        out += np.einsum("bit,oi->bot", seg, wv[:, :, j])
    need_x = x.node_id is not None
    need_w = w.node_id is not None

    def backward(g):
        gw = np.zeros_like(wv) if need_w else None
        gxp = np.zeros_like(xp) if need_x else None
        for j in range(kernel):
            lo = j * dilation
            if need_w:
                gw[:, :, j] = np.einsum("bot,bit->oi", g, xp[:, :, lo : lo + t_len])
            if need_x:
                gxp[:, :, lo : lo + t_len] += np.einsum("bot,oi->bit", g, wv[:, :, j])
        gx = gxp[:, :, pad:] if need_x else None
        return gx, gw

    return record("causal_conv1d", out, (x, w), backward)


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    axes: tuple[int, ...],
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    update_running: bool = True,
) -> DiffArray:
    """Batch normalization over ``axes`` with an affine output.

    running_mean / running_var are plain arrays shaped like the keepdims
    reduction of x; in training mode they are blended in place (momentum
    0.1, population variance) and in eval mode they replace the batch
    statistics. Set update_running=False for side-effect-free training
    forwards (gradient checking).
    """
    x = _lift(x)
    if training:
        mu = amean(x, axis=axes, keepdims=True)
        xc = sub(x, mu)
        var = amean(mul(xc, xc), axis=axes, keepdims=True)
        if update_running:
            running_mean += momentum * (mu.values - running_mean)
            running_var += momentum * (var.values - running_var)
        xn = div(xc, sqrt(add(var, eps)))
    else:
        denom = np.sqrt(running_var + eps)
        xn = div(sub(x, DiffArray(running_mean)), DiffArray(denom))
    return add(mul(xn, gamma), beta)


def softmax(x, axis: int = -1) -> DiffArray:
    x = _lift(x)
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return record("softmax", out, (x,), backward)


def _norm_axis(axis) -> tuple[int, ...] | None:
    if axis is None:
        return None
    if isinstance(axis, int):
        return (axis,)
    return tuple(axis)


def asum(x, axis=None, keepdims: bool = False) -> DiffArray:
    x = _lift(x)
    axes = _norm_axis(axis)
    out = x.values.sum(axis=axes, keepdims=keepdims)
    shape = x.shape

    def backward(g):
        gg = np.asarray(g)
        if axes is not None and not keepdims:
            gg = np.expand_dims(gg, axes)
        return (np.broadcast_to(gg, shape),)

    return record("sum", out, (x,), backward)


def amean(x, axis=None, keepdims: bool = False) -> DiffArray:
    x = _lift(x)
    axes = _norm_axis(axis)
    out = x.values.mean(axis=axes, keepdims=keepdims)
    shape = x.shape
    if axes is None:
        count = x.size
    else:
        count = int(np.prod([shape[a] for a in axes]))

    def backward(g):
        gg = np.asarray(g) / count
        if axes is not None and not keepdims:
            gg = np.expand_dims(gg, axes)
        return (np.broadcast_to(gg, shape),)

    return record("mean", out, (x,), backward)


def _extreme(x, argfn, name):
    x = _lift(x)
    if x.size == 0:
        raise ValueError(f"{name}: empty input")
    flat = x.values.reshape(-1)
    idx = int(argfn(flat))  # ties break to the lowest flat index
    out = flat[idx].copy()
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        gx.reshape(-1)[idx] = g
        return (gx,)

    return record(name, out, (x,), backward)


def amin(x) -> DiffArray:
    """Global minimum; gradient routes to the first attaining index."""
    return _extreme(x, np.argmin, "min")


def amax(x) -> DiffArray:
    """Global maximum; gradient routes to the first attaining index."""
    return _extreme(x, np.argmax, "max")


def take(x, key) -> DiffArray:
    """Slice/index with numpy semantics; gradient scatters back."""
    x = _lift(x)
    out = x.values[key]
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        np.add.at(gx, key, g)
        return (gx,)

    return record("take", out, (x,), backward)


def concat(parts: Sequence, axis: int = 0) -> DiffArray:
    parts = [_lift(p) for p in parts]
    if not parts:
        raise ValueError("concat: need at least one array")
    try:
        out = np.concatenate([p.values for p in parts], axis=axis)
    except ValueError:
        raise ShapeMismatch("concat", *[p.shape for p in parts]) from None
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return record("concat", out, tuple(parts), backward)


def transpose(x, axes=None) -> DiffArray:
    x = _lift(x)
    out = np.transpose(x.values, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inv),)

    return record("transpose", out, (x,), backward)


def reshape(x, shape) -> DiffArray:
    x = _lift(x)
    old = x.shape
    out = x.values.reshape(shape)

    def backward(g):
        return (g.reshape(old),)

    return record("reshape", out, (x,), backward)


@dataclass
class GradCheckReport:
    """Per-coordinate comparison of tape gradient vs central differences."""

    gradient: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    max_rel_error: float
    tol: float
    passed: bool


def grad_check(
    f: Callable[[DiffArray], DiffArray],
    x,
    step: float = 1e-5,
    tol: float = 1e-6,
) -> GradCheckReport:
    """Check the tape gradient of a scalar function against (f(x+h)-f(x-h))/2h.

    The relative error per coordinate is |g - g_fd| / max(|g|, |g_fd|, 1).
    f must be evaluable on detached arrays (no tape side effects).
    """
    x0 = np.array(x.values if isinstance(x, DiffArray) else x, dtype=np.float64)
    with Tape() as tape:
        xd = tape.leaf(x0)
        out = f(xd)
    if not isinstance(out, DiffArray) or out.size != 1:
        raise ValueError("grad_check: f must return a scalar DiffArray")
    g = tape.backward(out)[xd]

    flat = x0.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        probes = []
        for sign in (+1.0, -1.0):
            xs = flat.copy()
            xs[i] += sign * step
            try:
                val = f(DiffArray(xs.reshape(x0.shape)))
            except ValueError as err:
                raise ValueError(
                    f"grad_check: f is non-finite at probe for coordinate {i}"
                ) from err
            probes.append(float(val.values))
        numeric[i] = (probes[0] - probes[1]) / (2.0 * step)
    numeric = numeric.reshape(x0.shape)

    denom = np.maximum(np.maximum(np.abs(g), np.abs(numeric)), 1.0)
    rel = np.abs(g - numeric) / denom
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(
        gradient=g,
        numeric=numeric,
        rel_error=rel,
        max_rel_error=max_rel,
        tol=tol,
        passed=bool(max_rel <= tol),
    )
