"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Tracking is opt-in: operations record onto the tape that is active in the
current thread (``with Tape() as tape: ...``).  Outside of a tape every
operation is a plain numpy computation, which is what inference uses.

Leaves are tensors created with ``requires_grad=True``.  They are not bound to
a tape, so the same parameter tensors can be reused across many forward passes.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "AutodiffError", "backward", "grad_check", "set_debug",
    "as_tensor", "add", "sub", "mul", "div", "matmul", "relu", "sigmoid",
    "tanh", "power", "sum", "mean", "max_window", "pad", "slice_", "concat",
    "reshape", "transpose", "scale_shift", "correlate3d", "correlate3d_unshared",
]

_state = threading.local()
_DEBUG = False
# im2col buffers up to this size are kept from forward to backward.
COLUMN_CACHE_BYTES = 256 * 2 ** 20


class AutodiffError(ValueError):
    pass


def set_debug(flag: bool) -> None:
    """Check every primitive output for non-finite values when enabled."""
    global _DEBUG
    _DEBUG = bool(flag)


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("kind", "inputs", "backward", "leaf")

    def __init__(self, kind, inputs, backward, leaf=None):
        self.kind = kind
        self.inputs = inputs
        self.backward = backward
        self.leaf = leaf


class Tape:
    """Append-only record of operations, topologically ordered by construction."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaf_ids: dict[int, int] = {}

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def node_of(self, t: "Tensor") -> int | None:
        if t._tape is self:
            return t._node
        if t.requires_grad:
            idx = self._leaf_ids.get(id(t))
            if idx is None:
                idx = len(self.nodes)
                self.nodes.append(_Node("leaf", (), None, leaf=t))
                self._leaf_ids[id(t)] = idx
            return idx
        return None

    def leaves(self) -> list["Tensor"]:
        return [n.leaf for n in self.nodes if n.leaf is not None]


class Tensor:
    """Dense row-major float64 array, optionally tracked on a tape."""

    __slots__ = ("data", "requires_grad", "name", "_tape", "_node", "__weakref__")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._tape = None
        self._node = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self._tape is not None or self.requires_grad

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: mul(self, -1.0)
    __pow__ = lambda self, p: power(self, p)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(kind: str, out: np.ndarray, inputs: Sequence[Tensor],
            backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(out)):
        raise AutodiffError(f"{kind}: non-finite output")
    result = Tensor(out)
    tape = current_tape()
    if tape is None:
        return result
    ids = tuple(tape.node_of(t) for t in inputs)
    if all(i is None for i in ids):
        return result
    result._tape = tape
    result._node = len(tape.nodes)
    tape.nodes.append(_Node(kind, ids, backward_fn))
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise AutodiffError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record("div", out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * out / bd, bd.shape)))


def power(x, p: float) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _record("power", xd ** p, (x,), lambda g: (g * p * xd ** (p - 1),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _record("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def scale_shift(x, scale, shift) -> Tensor:
    """``x * scale + shift`` with numpy broadcasting, as a single node."""
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    _broadcast_shape("scale_shift", x, scale)
    _broadcast_shape("scale_shift", x, shift)
    xd, sd = x.data, scale.data
    out = xd * sd + shift.data
    if out.shape != x.shape:
        raise AutodiffError(f"scale_shift: parameters {scale.shape}/{shift.shape} "
                            f"would broadcast input {x.shape} to {out.shape}")
    return _record("scale_shift", out, (x, scale, shift),
                   lambda g: (_unbroadcast(g * sd, xd.shape),
                              _unbroadcast(g * xd, sd.shape),
                              _unbroadcast(g, shift.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise AutodiffError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _record("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# ------------------------------------------------------------------ reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
    out = x.data.sum(axis=axes, keepdims=keepdims)
    return _record("sum", out, (x,),
                   lambda g: (np.broadcast_to(g.reshape(kept), shape).copy(),))


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    shape = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
    out = x.data.mean(axis=axes, keepdims=keepdims)
    return _record("mean", out, (x,),
                   lambda g: (np.broadcast_to(g.reshape(kept) / count, shape).copy(),))


def max_window(x, window: Sequence[int]) -> Tensor:
    """Max over non-overlapping windows on the trailing ``len(window)`` axes.

    Ties send the gradient to the first maximal element in row-major window order.
    """
    x = as_tensor(x)
    k = len(window)
    lead, tail = x.shape[:-k], x.shape[-k:]
    for n, w in zip(tail, window):
        if w < 1 or n % w:
            raise AutodiffError(f"max_window: axis length {n} not divisible by window {w} "
                                f"(input {x.shape}, window {tuple(window)})")
    split = []
    for n, w in zip(tail, window):
        split += [n // w, w]
    nl = len(lead)
    blocked = x.data.reshape(lead + tuple(split))
    perm = (tuple(range(nl)) + tuple(nl + 2 * i for i in range(k))
            + tuple(nl + 2 * i + 1 for i in range(k)))
    outer = tuple(n // w for n, w in zip(tail, window))
    flat = blocked.transpose(perm).reshape(lead + outer + (-1,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    in_shape = x.shape
    inv = np.argsort(perm)

    def back(g):
        gflat = np.zeros(flat.shape)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gb = gflat.reshape(lead + outer + tuple(window)).transpose(inv)
        return (gb.reshape(in_shape),)

    return _record("max_window", out, (x,), back)


# --------------------------------------------------------------- structural

def pad(x, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` has one (before, after) pair per axis."""
    x = as_tensor(x)
    widths = [tuple(w) for w in widths]
    if len(widths) != x.ndim:
        raise AutodiffError(f"pad: {len(widths)} width pairs for input {x.shape}")
    index = tuple(slice(b, b + n) for (b, _), n in zip(widths, x.shape))
    return _record("pad", np.pad(x.data, widths), (x,), lambda g: (g[index],))


def slice_(x, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    x = as_tensor(x)
    parts = index if isinstance(index, tuple) else (index,)
    if not all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis for i in parts):
        raise AutodiffError("slice: only integer/slice indexing is differentiable")
    try:
        out = x.data[index]
    except IndexError as exc:
        raise AutodiffError(f"slice: {exc} (input {x.shape})") from None
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _record("slice", np.array(out), (x,), back)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise AutodiffError("concat: incompatible shapes "
                            + ", ".join(str(t.shape) for t in tensors)) from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _record("concat", out, tensors, back)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise AutodiffError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    in_shape = x.shape
    return _record("reshape", out, (x,), lambda g: (g.reshape(in_shape),))


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (g.transpose(inv),))


# ---------------------------------------------------------------- correlation

def _pad_same(x: np.ndarray, kshape) -> np.ndarray:
    kd, kh, kw = kshape
    return np.pad(x, ((0, 0), (0, 0), (kd // 2,) * 2, (kh // 2,) * 2, (kw // 2,) * 2))


def _im2col(x: np.ndarray, kshape) -> np.ndarray:
    """Patches of same-padded x as [N][P][C_in * k_d * k_h * k_w][H * W]."""
    n, ci, p, h, w = x.shape
    kd, kh, kw = kshape
    xp = _pad_same(x, kshape).transpose(0, 2, 1, 3, 4)     # [N][P+][Ci][H+][W+]
    cols = np.empty((n, p, ci, kd, kh, kw, h, w))
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                cols[:, :, :, a, b, c] = xp[:, a:a + p, :, b:b + h, c:c + w]
    return cols.reshape(n, p, ci * kd * kh * kw, h * w)


def _col2im(cols: np.ndarray, kshape, x_shape) -> np.ndarray:
    """Adjoint of :func:`_im2col`."""
    n, ci, p, h, w = x_shape
    kd, kh, kw = kshape
    cols = cols.reshape(n, p, ci, kd, kh, kw, h, w)
    gp = np.zeros((n, p + kd - 1, ci, h + kh - 1, w + kw - 1))
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                gp[:, a:a + p, :, b:b + h, c:c + w] += cols[:, :, :, a, b, c]
    gp = gp[:, kd // 2:kd // 2 + p, :, kh // 2:kh // 2 + h, kw // 2:kw // 2 + w]
    return np.ascontiguousarray(gp.transpose(0, 2, 1, 3, 4))


def _to_nc(out: np.ndarray, h: int, w: int) -> np.ndarray:
    """[N][P][C][H*W] -> [N][C][P][H][W]."""
    n, p, c, _ = out.shape
    return np.ascontiguousarray(out.reshape(n, p, c, h, w).transpose(0, 2, 1, 3, 4))


def _to_npc(g: np.ndarray) -> np.ndarray:
    """[N][C][P][H][W] -> [N][P][C][H*W]."""
    n, c, p, h, w = g.shape
    return np.ascontiguousarray(g.transpose(0, 2, 1, 3, 4)).reshape(n, p, c, h * w)


def _corr(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Same-padded stride-1 cross-correlation, x [N][Ci][P][H][W], w [Co][Ci][kd][kh][kw]."""
    cols = _im2col(x, w.shape[2:])
    return _to_nc(np.matmul(w.reshape(w.shape[0], -1), cols), x.shape[3], x.shape[4])


def _check_kernel(kind, x, w, w_axes):
    if x.ndim != 5:
        raise AutodiffError(f"{kind}: input must be [N][C][P][H][W], got {x.shape}")
    kshape = w.shape[-3:]
    if w.ndim != w_axes or w.shape[-4] != x.shape[1] or any(k % 2 == 0 for k in kshape):
        raise AutodiffError(f"{kind}: weights {w.shape} incompatible with input {x.shape}")
    return kshape


# Both correlations run one GEMM per (sample, level) on identical operand
# layouts, so a shared kernel set gives bitwise-equal results in either op.

def correlate3d(x, w) -> Tensor:
    """Zero-padded ("same") stride-1 3-D cross-correlation without bias.

    x: [N][C_in][P][H][W]; w: [C_out][C_in][k_d][k_h][k_w] with odd extents.
    """
    x, w = as_tensor(x), as_tensor(w)
    kshape = _check_kernel("correlate3d", x, w, 5)
    xd, wd = x.data, w.data
    w2 = wd.reshape(wd.shape[0], -1)
    cols = _im2col(xd, kshape)
    out = _to_nc(np.matmul(w2, cols), xd.shape[3], xd.shape[4])
    saved = [cols if cols.nbytes <= COLUMN_CACHE_BYTES else None]
    del cols

    def back(g):
        g4 = _to_npc(g)
        cols = saved[0] if saved[0] is not None else _im2col(xd, kshape)
        saved[0] = None
        gw = np.matmul(g4, cols.transpose(0, 1, 3, 2)).sum(axis=(0, 1)).reshape(wd.shape)
        del cols
        return _col2im(np.matmul(w2.T, g4), kshape, xd.shape), gw

    return _record("correlate3d", out, (x, w), back)


def correlate3d_unshared(x, w) -> Tensor:
    """Like :func:`correlate3d` but with a separate kernel set per output level.

    w: [P][C_out][C_in][k_d][k_h][k_w]; level p of the output uses ``w[p]`` on
    the same zero-padded window a shared kernel would see.
    """
    x, w = as_tensor(x), as_tensor(w)
    kshape = _check_kernel("correlate3d_unshared", x, w, 6)
    n_levels = x.shape[2]
    if w.shape[0] != n_levels:
        raise AutodiffError(f"correlate3d_unshared: {w.shape[0]} kernel sets for "
                            f"{n_levels} levels (input {x.shape})")
    xd, wd = x.data, w.data
    w3 = wd.reshape(n_levels, wd.shape[1], -1)
    cols = _im2col(xd, kshape)
    out = _to_nc(np.matmul(w3, cols), xd.shape[3], xd.shape[4])
    saved = [cols if cols.nbytes <= COLUMN_CACHE_BYTES else None]
    del cols

    def back(g):
        g4 = _to_npc(g)
        cols = saved[0] if saved[0] is not None else _im2col(xd, kshape)
        saved[0] = None
        gw = np.matmul(g4, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(wd.shape)
        del cols
        return _col2im(np.matmul(w3.transpose(0, 2, 1), g4), kshape, xd.shape), gw

    return _record("correlate3d_unshared", out, (x, w), back)


# ------------------------------------------------------------------- backward

def backward(tape: Tape, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict:
    """Gradients of a scalar ``loss`` with respect to the leaves of ``tape``.

    Returns a dict keyed by leaf tensor.  Tensors listed in ``wrt`` that never
    touched the tape get zero gradients.
    """
    if loss.size != 1:
        raise AutodiffError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: list = [None] * len(tape.nodes)
    result: dict = {}
    if loss._tape is tape:
        grads[loss._node] = np.ones(loss.shape)
    for idx in range(len(tape.nodes) - 1, -1, -1):
        g = grads[idx]
        if g is None:
            continue
        node = tape.nodes[idx]
        if node.leaf is not None:
            result[node.leaf] = g
            continue
        grads[idx] = None
        for src, gi in zip(node.inputs, node.backward(g)):
            if src is None or gi is None:
                continue
            if grads[src] is None:
                grads[src] = np.array(gi, dtype=np.float64, copy=True)
            else:
                grads[src] += gi
    if wrt is not None:
        for t in wrt:
            if t not in result:
                result[t] = np.zeros(t.shape)
    return result


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max relative error between backward gradients and central differences."""
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(leaf)
    analytic = backward(tape, y, wrt=[leaf])[leaf].reshape(-1)
    numeric = np.empty(x0.size)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xp[i] += eps
        xm = flat.copy()
        xm[i] -= eps
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        fm = f(Tensor(xm.reshape(x0.shape))).item()
        # Divide by the step actually taken: x +/- eps is rounded to a float.
        numeric[i] = (fp - fm) / (xp[i] - xm[i])
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
