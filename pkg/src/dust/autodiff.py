"""Dense tensors with reverse-mode automatic differentiation.

Only the primitives needed by the dual-decoder U-Net and its losses are
provided. Elementwise primitives require identical shapes; there is no
general broadcasting.

Tensors keep the float dtype of the array they wrap: training runs in
float32, gradient checks feed float64 arrays and stay in float64 end to end.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

LEAKY_SLOPE = 0.01
NORM_EPS = 1e-5

_FLOATS = (np.float32, np.float64, np.longdouble)
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shapes."""


class Tensor:
    """A node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, (np.ndarray, np.generic)) and data.dtype.type in _FLOATS:
                dtype = data.dtype
            else:
                dtype = np.float32
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    # operator sugar, all routed through the primitives below
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return linear_combination([self], [float(other)])
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return linear_combination([self, other], [1.0, -1.0])

    def __neg__(self):
        return linear_combination([self], [-1.0])


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    out.op = op
    return out


def _same_shape(op: str, *ts: Tensor) -> None:
    first = ts[0].shape
    for t in ts[1:]:
        if t.shape != first:
            raise ShapeError(f"{op}: operand shapes differ: {first} vs {t.shape}")


def _need(op: str, t: Tensor, ndim: int) -> None:
    if t.data.ndim != ndim:
        raise ShapeError(f"{op}: expected a {ndim}-d tensor, got shape {t.shape}")


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf that requires grad.

    Gradients accumulate across calls; the graph is kept, so calling twice
    doubles the stored gradients.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
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
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def linear_combination(tensors: Sequence[Tensor], coeffs: Sequence[float], bias: float = 0.0) -> Tensor:
    """``sum_i coeffs[i] * tensors[i] + bias``."""
    if len(tensors) != len(coeffs) or not tensors:
        raise ValueError("linear_combination: need one coefficient per tensor")
    tensors = [as_tensor(t) for t in tensors]
    _same_shape("linear_combination", *tensors)
    dtype = tensors[0].dtype
    out = np.full(tensors[0].shape, bias, dtype=dtype)
    for t, c in zip(tensors, coeffs):
        out += dtype.type(c) * t.data
    cs = [dtype.type(c) for c in coeffs]
    return _node(out, tensors, lambda g: tuple(c * g for c in cs), "linear_combination")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return _node(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _node(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log: input must be strictly positive")
    xd = x.data
    return _node(np.log(xd), (x,), lambda g: (g / xd,), "log")


def _axes(ndim: int, axis) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _axes(x.data.ndim, axis)
    shape = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def bw(g):
        return (np.broadcast_to(g.reshape(kept), shape).copy(),)

    return _node(np.sum(x.data, axis=axes, keepdims=keepdims), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(x.data.ndim, axis)
    count = int(np.prod([x.shape[a] for a in axes]))
    shape = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
    scale = x.dtype.type(1.0 / count)

    def bw(g):
        return (np.broadcast_to(g.reshape(kept) * scale, shape).copy(),)

    return _node(np.mean(x.data, axis=axes, keepdims=keepdims), (x,), bw, "mean")


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (x,), bw, "softmax")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(ref, t.shape)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def one_hot(labels: np.ndarray, n_classes: int, dtype=np.float32) -> Tensor:
    """[B,H,W] integer labels -> constant [B,n,H,W] indicator tensor (no gradient)."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"one_hot: labels must lie in [0, {n_classes})")
    eye = np.eye(n_classes, dtype=dtype)
    return Tensor(np.moveaxis(eye[labels], -1, 1))


# ---------------------------------------------------------------------------
# spatial primitives (NCHW)
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int = 1) -> Tensor:
    """Stride-1 cross-correlation with zero padding. ``w`` is [O, C, k, k]."""
    _need("conv2d", x, 4)
    _need("conv2d", w, 4)
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if Cw != C:
        raise ShapeError(f"conv2d: input has {C} channels but kernel expects {Cw}")
    if b is not None and b.shape != (O,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({O},)")
    Ho, Wo = H + 2 * padding - kh + 1, W + 2 * padding - kw + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {H}x{W}")
    # im2col in channels-last order (ki, kj, c) so every slice copy is contiguous
    wmat = w.data.transpose(0, 2, 3, 1).reshape(O, kh * kw * C)
    offsets = [(i, j) for i in range(kh) for j in range(kw)]
    xl = x.data.transpose(0, 2, 3, 1)
    if padding:
        xp = np.zeros((B, H + 2 * padding, W + 2 * padding, C), dtype=x.dtype)
        xp[:, padding:padding + H, padding:padding + W] = xl
    else:
        xp = xl
    if kh == 1 and kw == 1:
        cols = np.ascontiguousarray(xp).reshape(B * Ho * Wo, C)
    else:
        cols = np.empty((B, Ho, Wo, kh * kw * C), dtype=x.dtype)
        for n, (i, j) in enumerate(offsets):
            cols[..., n * C:(n + 1) * C] = xp[:, i:i + Ho, j:j + Wo]
        cols = cols.reshape(B * Ho * Wo, kh * kw * C)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gw = None
        if w.requires_grad:
            gw = np.ascontiguousarray((gm.T @ cols).reshape(O, kh, kw, C).transpose(0, 3, 1, 2))
        gb = gm.sum(axis=0) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(B, Ho, Wo, kh * kw * C)
            if kh == 1 and kw == 1 and not padding:
                gxl = dcols
            else:
                gxp = np.zeros((B, H + 2 * padding, W + 2 * padding, C), dtype=g.dtype)
                for n, (i, j) in enumerate(offsets):
                    gxp[:, i:i + Ho, j:j + Wo] += dcols[..., n * C:(n + 1) * C]
                gxl = gxp[:, padding:padding + H, padding:padding + W]
            gx = np.ascontiguousarray(gxl.transpose(0, 3, 1, 2))
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _node(out, parents, bw, "conv2d")


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Transposed convolution with kernel 2 and stride 2. ``w`` is [C, O, 2, 2]."""
    _need("conv_transpose2d", x, 4)
    _need("conv_transpose2d", w, 4)
    B, C, H, W = x.shape
    Cw, O, kh, kw = w.shape
    if Cw != C:
        raise ShapeError(f"conv_transpose2d: input has {C} channels but kernel expects {Cw}")
    if (kh, kw) != (2, 2):
        raise ShapeError(f"conv_transpose2d: only 2x2 kernels with stride 2 supported, got {kh}x{kw}")
    if b is not None and b.shape != (O,):
        raise ShapeError(f"conv_transpose2d: bias shape {b.shape} != ({O},)")
    xm = x.data.transpose(0, 2, 3, 1).reshape(B * H * W, C)
    wm = w.data.reshape(C, O * 4)
    y = (xm @ wm).reshape(B, H, W, O, 2, 2).transpose(0, 3, 1, 4, 2, 5).reshape(B, O, 2 * H, 2 * W)
    if b is not None:
        y = y + b.data[None, :, None, None]
    y = np.ascontiguousarray(y)

    def bw(g):
        gm = g.reshape(B, O, H, 2, W, 2).transpose(0, 2, 4, 1, 3, 5).reshape(B * H * W, O * 4)
        gx = (gm @ wm.T).reshape(B, H, W, C).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = (xm.T @ gm).reshape(w.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        gx = None if gx is None else np.ascontiguousarray(gx)
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _node(y, parents, bw, "conv_transpose2d")


def _bilinear_matrix(n: int, dtype) -> np.ndarray:
    """[2n, n] interpolation matrix for scale-2 upsampling, half-pixel centres."""
    out = np.arange(2 * n)
    src = np.maximum((out + 0.5) / 2.0 - 0.5, 0.0)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    lam = src - i0
    m = np.zeros((2 * n, n))
    np.add.at(m, (out, i0), 1.0 - lam)
    np.add.at(m, (out, i1), lam)
    return m.astype(dtype)


def bilinear_upsample(x: Tensor) -> Tensor:
    """Scale-2 bilinear upsampling with align_corners=False semantics."""
    _need("bilinear_upsample", x, 4)
    _, _, H, W = x.shape
    ah = _bilinear_matrix(H, x.dtype)
    aw = _bilinear_matrix(W, x.dtype)
    y = np.ascontiguousarray((ah @ x.data) @ aw.T)

    def bw(g):
        return (np.ascontiguousarray(ah.T @ (g @ aw)),)

    return _node(y, (x,), bw, "bilinear_upsample")


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties route the gradient to the first maximum."""
    _need("max_pool2d", x, 4)
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"max_pool2d: spatial dims {H}x{W} must be even")
    win = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (np.ascontiguousarray(gx),)

    return _node(np.ascontiguousarray(y), (x,), bw, "max_pool2d")


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Per-sample, per-channel normalisation over H,W with a learnable affine."""
    _need("instance_norm", x, 4)
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"instance_norm: affine params must be ({C},), got {gamma.shape}, {beta.shape}")
    n = H * W
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=(2, 3), keepdims=True) + x.dtype.type(eps))
    xhat = xc * inv
    gd = gamma.data[None, :, None, None]
    y = xhat * gd + beta.data[None, :, None, None]

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gd
        gx = inv / n * (
            n * dxhat
            - dxhat.sum(axis=(2, 3), keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=(2, 3), keepdims=True)
        )
        return gx, ggamma, gbeta

    return _node(y, (x, gamma, beta), bw, "instance_norm")


PRIMITIVES = (
    "conv2d",
    "conv_transpose2d",
    "bilinear_upsample",
    "max_pool2d",
    "relu",
    "leaky_relu",
    "instance_norm",
    "add",
    "concat",
    "linear_combination",
    "softmax",
    "log",
    "exp",
    "mul",
    "sum",
    "mean",
)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
