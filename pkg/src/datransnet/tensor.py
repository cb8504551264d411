"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op takes and returns :class:`Tensor` objects. When any input requires a
gradient (and grad mode is on) the result remembers its parents and a closure
mapping the output gradient to input gradients. :meth:`Tensor.backward`
linearises that graph into a :class:`Tape` and replays it once in reverse.

Broadcasting is deliberately absent: binary ops need equal shapes or a Python
scalar operand. Use :func:`expand` to repeat a tensor along size-1 axes.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence, Union

import numpy as np

Scalar = Union[int, float]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(RuntimeError):
    """Raised when an operation is used outside its contract."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class KinkFreezer:
    """Record, then replay, the branch choices of piecewise-smooth ops.

    ``relu`` and ``max_pool2d`` are only piecewise differentiable. Finite
    differences that straddle a kink compare against the wrong branch. Inside
    a ``freeze_kinks`` block the first forward pass records every mask and
    argmax; later passes reuse them, so perturbed evaluations stay on the
    same smooth piece the analytic gradient describes.
    """

    def __init__(self) -> None:
        self.records: list[np.ndarray] = []
        self.replaying = False
        self._cursor = 0

    def rewind(self) -> None:
        self.replaying = True
        self._cursor = 0

    def take(self, fresh: np.ndarray) -> np.ndarray:
        if not self.replaying:
            self.records.append(fresh)
            return fresh
        if self._cursor >= len(self.records):
            raise ContractError("kink replay ran past the recorded forward pass")
        rec = self.records[self._cursor]
        self._cursor += 1
        if rec.shape != fresh.shape:
            raise ContractError("kink replay hit a graph with a different structure")
        return rec


_freezer: Optional[KinkFreezer] = None


@contextlib.contextmanager
def freeze_kinks():
    global _freezer
    prev = _freezer
    _freezer = KinkFreezer()
    try:
        yield _freezer
    finally:
        _freezer = prev


def _branch(fresh: np.ndarray) -> np.ndarray:
    return fresh if _freezer is None else _freezer.take(fresh)


class Tensor:
    """N-dimensional float64 array with an optional gradient slot."""

    __array_priority__ = 1000  # make ndarray <op> Tensor defer to Tensor

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None,
        _op: str = "",
    ) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op

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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise ContractError(
                f"backward() needs a scalar loss, got shape {self.shape}"
            )
        Tape.from_output(self).run(self)

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other, like=self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if like is not None and arr.ndim == 0:
        arr = np.full(like.shape, float(arr))
    return Tensor(arr)


class Tape:
    """Topologically ordered record of the ops between leaves and an output."""

    def __init__(self, nodes: list[Tensor]) -> None:
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    def run(self, out: Tensor) -> None:
        grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.data)}
        # buffers we allocated ourselves may be accumulated into in place;
        # anything returned by a backward closure may alias another buffer
        owned: set[int] = set()
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key not in grads:
                    grads[key] = pg
                elif key in owned:
                    grads[key] += pg
                else:
                    grads[key] = grads[key] + pg
                    owned.add(key)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward, op)
    return Tensor(data)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# elementwise --------------------------------------------------------------


def add(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data + c, (a,), lambda g: (g,), "add_scalar")
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: Scalar) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def mul(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, 1.0 / float(b))
    _same_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def relu(a: Tensor) -> Tensor:
    mask = _branch(a.data > 0)
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


# linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must be identical."""
    if (
        a.ndim < 2
        or a.ndim != b.ndim
        or a.shape[:-2] != b.shape[:-2]
        or a.shape[-1] != b.shape[-2]
    ):
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _result(ad @ bd, (a, b), backward, "matmul")


def project(w: Tensor, x: Tensor) -> Tensor:
    """Apply one weight matrix ``w`` (p, q) to every item of a batch ``x`` (n, q, s)."""
    if w.ndim != 2 or x.ndim != 3 or w.shape[1] != x.shape[1]:
        raise DimensionError(f"project: cannot apply {w.shape} to {x.shape}")
    wd, xd = w.data, x.data

    def backward(g):
        gw = (g @ np.swapaxes(xd, 1, 2)).sum(axis=0)
        return gw, wd.T @ g

    return _result(wd @ xd, (w, x), backward, "project")


# shape manipulation -------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 not in shape and int(np.prod(shape)) != a.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from exc
    return _result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def flatten(a: Tensor, start: int = 0) -> Tensor:
    """Collapse axes ``start..`` into one, row-major."""
    start = start % a.ndim
    return reshape(a, a.shape[:start] + (-1,))


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise DimensionError("concat: nothing to concatenate")
    ax = axis % parts[0].ndim
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or p.shape[:ax] + p.shape[ax + 1 :] != ref[:ax] + ref[ax + 1 :]:
            raise DimensionError(f"concat: {p.shape} does not match {ref} off axis {ax}")
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([p.data for p in parts], axis=ax), tuple(parts), backward, "concat")


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Repeat ``a`` along its size-1 axes to reach ``shape`` (same rank)."""
    shape = tuple(shape)
    if len(shape) != a.ndim or any(s != t and s != 1 for s, t in zip(a.shape, shape)):
        raise DimensionError(f"expand: cannot expand {a.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s != t)
    out = np.broadcast_to(a.data, shape).copy()
    return _result(out, (a,), lambda g: (g.sum(axis=axes, keepdims=True),), "expand")


# reductions ---------------------------------------------------------------


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    src = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    return _result(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum_(a, axes, keepdims), 1.0 / count)


def max_(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximal entry."""
    ax = axis % a.ndim
    idx = _branch(np.argmax(a.data, axis=ax))
    out = np.take_along_axis(a.data, np.expand_dims(idx, ax), axis=ax)
    src = a.shape

    def backward(g):
        gx = np.zeros(src)
        gk = g if keepdims else np.expand_dims(g, ax)
        np.put_along_axis(gx, np.expand_dims(idx, ax), gk, axis=ax)
        return (gx,)

    return _result(out if keepdims else out.squeeze(ax), (a,), backward, "max")


def global_avg_pool(a: Tensor) -> Tensor:
    """(n, c, h, w) -> (n, c)."""
    return mean(a, axis=(-2, -1))


# normalisation ------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward, "softmax")


def instance_norm(a: Tensor, axes=(-2, -1), eps: float = 1e-5) -> Tensor:
    """Standardise each slice spanned by ``axes``: ``(x - mean) / sqrt(var + eps)``.

    Uses the population variance. A constant slice maps to zeros.
    """
    axes = _norm_axes(axes, a.ndim)
    x = a.data
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gy = (g * out).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - out * gy),)

    return _result(out, (a,), backward, "instance_norm")


# spatial ops --------------------------------------------------------------


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"expected (c, h, w) or (n, c, h, w), got {x.shape}")
    return x, False


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(
    x: Tensor,
    k: Tensor,
    bias: Optional[Tensor] = None,
    dilation: int = 1,
    padding=0,
) -> Tensor:
    """Stride-1 cross-correlation with zero padding.

    ``x`` is (c_in, h, w) or (n, c_in, h, w); ``k`` is (c_out, c_in, kh, kw).
    Output extent per axis is ``h + 2p - dilation * (kh - 1)``.
    """
    xb, squeeze = _as_batch(x)
    n, c, h, w = xb.shape
    if k.ndim != 4 or k.shape[1] != c:
        raise DimensionError(f"conv2d: kernel {k.shape} does not fit input {x.shape}")
    if bias is not None and bias.shape != (k.shape[0],):
        raise DimensionError(f"conv2d: bias {bias.shape} does not fit kernel {k.shape}")
    co, _, kh, kw = k.shape
    ph, pw = _pair(padding)
    d = int(dilation)
    ho, wo = h + 2 * ph - d * (kh - 1), w + 2 * pw - d * (kw - 1)
    if d < 1 or ho < 1 or wo < 1:
        raise DimensionError(
            f"conv2d: dilated {kh}x{kw} kernel (dilation {d}) exceeds padded input {x.shape}"
        )
    xp = np.pad(xb.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else xb.data
    if kh == kw == 1:
        cols = xp.reshape(n, c, ho * wo)
    else:
        cols = np.empty((n, c, kh, kw, ho, wo))
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = xp[:, :, i * d : i * d + ho, j * d : j * d + wo]
        cols = cols.reshape(n, c * kh * kw, ho * wo)
    k2 = k.data.reshape(co, -1)
    out = k2 @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, co, ho, wo)

    def backward(g):
        g2 = g.reshape(n, co, ho * wo)
        gk = (g2 @ np.swapaxes(cols, 1, 2)).sum(axis=0).reshape(k.shape)
        gcols = k2.T @ g2
        if kh == kw == 1:
            gxp = gcols.reshape(n, c, ho, wo)
        else:
            gcols = gcols.reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i * d : i * d + ho, j * d : j * d + wo] += gcols[:, :, i, j]
        gx = gxp[:, :, ph : ph + h, pw : pw + w] if ph or pw else gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g2.sum(axis=(0, 2)))
        return grads

    parents = (xb, k) if bias is None else (xb, k, bias)
    res = _result(out, parents, backward, "conv2d")
    return reshape(res, res.shape[1:]) if squeeze else res


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    xb, squeeze = _as_batch(x)
    n, c, h, w = xb.shape
    if h % size or w % size:
        raise DimensionError(f"max_pool2d: {h}x{w} is not divisible by {size}")
    hs, ws = h // size, w // size
    win = (
        xb.data.reshape(n, c, hs, size, ws, size)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, hs, ws, size * size)
    )
    idx = _branch(np.argmax(win, axis=-1))
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros(win.shape)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = (
            gw.reshape(n, c, hs, ws, size, size)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        return (gx,)

    res = _result(out, (xb,), backward, "max_pool2d")
    return reshape(res, res.shape[1:]) if squeeze else res


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    xb, squeeze = _as_batch(x)
    n, c, h, w = xb.shape
    out = np.repeat(np.repeat(xb.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    res = _result(out, (xb,), backward, "upsample_nearest")
    return reshape(res, res.shape[1:]) if squeeze else res


def neighbor_diff(
    x: Tensor, offsets: Sequence[tuple[int, int]], border: str = "zero"
) -> Tensor:
    """Differences ``x[p + offset] - x[p]`` for each offset, stacked per channel.

    Output channel ``i * len(offsets) + j`` holds offset ``j`` applied to input
    channel ``i``. Out-of-frame neighbours read as zero when ``border`` is
    ``"zero"``; with ``"center"`` the difference itself is zero there.
    """
    if border not in ("zero", "center"):
        raise ValueError(f"unknown border mode {border!r}")
    xb, squeeze = _as_batch(x)
    n, c, h, w = xb.shape
    nd = len(offsets)
    r = max(max(abs(dy), abs(dx)) for dy, dx in offsets)
    xp = np.pad(xb.data, ((0, 0), (0, 0), (r, r), (r, r)))
    out = np.empty((n, c, nd, h, w))
    masks = None
    if border == "center":
        masks = np.zeros((nd, h, w))
    for j, (dy, dx) in enumerate(offsets):
        out[:, :, j] = xp[:, :, r + dy : r + dy + h, r + dx : r + dx + w] - xb.data
        if masks is not None:
            masks[j, max(0, -dy) : h - max(0, dy), max(0, -dx) : w - max(0, dx)] = 1.0
    if masks is not None:
        out *= masks
    out = out.reshape(n, c * nd, h, w)

    def backward(g):
        gd = g.reshape(n, c, nd, h, w)
        if masks is not None:
            gd = gd * masks
        gxp = np.zeros(xp.shape)
        for j, (dy, dx) in enumerate(offsets):
            gxp[:, :, r + dy : r + dy + h, r + dx : r + dx + w] += gd[:, :, j]
        return (gxp[:, :, r : r + h, r : r + w] - gd.sum(axis=2),)

    res = _result(out, (xb,), backward, "neighbor_diff")
    return reshape(res, res.shape[1:]) if squeeze else res
