"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable op produces a new :class:`Tensor` that remembers its
parents and a closure mapping the upstream gradient to parent gradients.
Calling :func:`backward` on a scalar walks that record in reverse
topological order.

Data are float64 by default. ``np.longdouble`` inputs are kept as-is so
that finite-difference oracles can evaluate the forward pass in extended
precision.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_FLOAT_TYPES = (np.float64, np.longdouble)

_grad_enabled = True
_active_graphs: list["Graph"] = []


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype.type not in _FLOAT_TYPES:
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_ufunc__ = None  # ndarray (op) Tensor defers to the Tensor's reflected operator

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _raise_not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # -- operators ----------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _raise_not_scalar(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Graph:
    """Ordered record of the differentiable ops executed inside ``with Graph():``.

    Nodes are appended at creation time, so the record is topologically
    ordered by construction.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _active_graphs.append(self)
        return self

    def __exit__(self, *exc):
        _active_graphs.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
        for g in _active_graphs:
            g.nodes.append(out)
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# -- backward ---------------------------------------------------------------

def _topo_order(loss: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
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


def _propagate(loss: Tensor, graph: Optional[Graph]) -> dict[int, np.ndarray]:
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    order = graph.nodes if graph is not None else _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return grads


def backward(loss: Tensor, graph: Optional[Graph] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    grads = _propagate(loss, graph)
    if not grads:
        return
    leaves = _collect_leaves(loss, graph)
    for leaf in leaves:
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        g = g.reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def _collect_leaves(loss: Tensor, graph: Optional[Graph]) -> list[Tensor]:
    nodes = graph.nodes if graph is not None else _topo_order(loss)
    leaves, seen = [], set()
    candidates = list(nodes) + [loss]
    for n in candidates:
        for p in (n._parents if n._backward is not None else ()):
            if p.requires_grad and p._backward is None and id(p) not in seen:
                seen.add(id(p))
                leaves.append(p)
    if loss._backward is None and loss.requires_grad and id(loss) not in seen:
        leaves.append(loss)
    return leaves


def grad(loss: Tensor, wrt: Iterable[Tensor], graph: Optional[Graph] = None) -> list[np.ndarray]:
    """Return d(loss)/d(w) for each ``w``; disconnected inputs get zeros.

    Does not touch ``.grad``.
    """
    wrt = list(wrt)
    grads = _propagate(loss, graph)
    out = []
    for w in wrt:
        g = grads.get(id(w))
        out.append(np.zeros_like(w.data) if g is None else g.reshape(w.shape).copy())
    return out


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _node(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _node(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = _wrap(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = _wrap(a)
    ad = a.data
    return _node(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _wrap(a)
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = _wrap(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    s = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _node(x * s, (a,), lambda g: (g * s * (1.0 + x * (1.0 - s)),), "silu")


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


# -- reductions and shape ---------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _node(a.data.sum(axis=axes, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    axes = _norm_axes(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    return tsum(a, axes, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def index(a, idx) -> Tensor:
    a = _wrap(a)
    shape, dtype = a.shape, a.data.dtype

    def bw(g):
        full = np.zeros(shape, dtype=np.result_type(dtype, g.dtype))
        np.add.at(full, idx, g)
        return (full,)

    return _node(a.data[idx], (a,), bw, "index")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError(f"matmul needs operands of rank >= 2, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul inner dimension mismatch: {ad.shape[-1]} vs {bd.shape[-2]}")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _node(ad @ bd, (a, b), bw, "matmul")


def logsumexp(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shift = np.max(a.data, axis=axis, keepdims=True)
    return log(tsum(exp(a - shift), axis=axis, keepdims=True)) + shift


def log_softmax(a, axis: int = -1) -> Tensor:
    return a - logsumexp(a, axis=axis)


# -- image ops ----------------------------------------------------------------

def _im2col(xd: np.ndarray, kh: int, kw: int, stride: int):
    """``[N,C,Hp,Wp]`` -> ``[N, C*kh*kw, Ho*Wo]`` patch matrix."""
    N, C, Hp, Wp = xd.shape
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    cols = np.empty((N, C, kh, kw, Ho, Wo), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xd[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
    return cols.reshape(N, C * kh * kw, Ho * Wo), Ho, Wo


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[N,C,H,W]`` with ``kernel[K,C,kh,kw]``."""
    x, kernel = _wrap(x), _wrap(kernel)
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be [N,C,H,W], got rank {x.ndim}")
    if kernel.ndim != 4:
        raise ValueError(f"conv2d kernel must be [K,C,kh,kw], got rank {kernel.ndim}")
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    N, C, H, W = x.shape
    K, Ck, kh, kw = kernel.shape
    if Ck != C:
        raise ValueError(f"conv2d channel dimension mismatch: input C={C}, kernel C={Ck}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp:
        raise ValueError(f"conv2d kernel height {kh} exceeds padded input height {Hp}")
    if kw > Wp:
        raise ValueError(f"conv2d kernel width {kw} exceeds padded input width {Wp}")

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols, Ho, Wo = _im2col(xd, kh, kw, stride)
    wmat = kernel.data.reshape(K, C * kh * kw)
    out = np.matmul(wmat, cols).reshape(N, K, Ho, Wo)
    parents = [x, kernel]
    if bias is not None:
        bias = _wrap(bias)
        out = out + bias.data.reshape(1, K, 1, 1)
        parents.append(bias)

    def bw(g):
        g2 = g.reshape(N, K, Ho * Wo)
        gk = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape) \
            if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2).reshape(N, C, kh, kw, Ho, Wo)
            gxp = np.zeros((N, C, Hp, Wp), dtype=gcols.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + H, padding:padding + W]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _node(out, parents, bw, "conv2d")


def upsample2x(x) -> Tensor:
    """Nearest-neighbour 2x upsampling of ``[N,C,H,W]``."""
    x = _wrap(x)
    N, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _node(out, (x,),
                 lambda g: (g.reshape(N, C, H, 2, W, 2).sum(axis=(3, 5)),), "upsample2x")


def normalize_spatial(x, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel standardization over H and W of ``[N,C,H,W]``."""
    x = _wrap(x)
    xd = x.data
    mu = xd.mean(axis=(2, 3), keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gxm = (g * xhat).mean(axis=(2, 3), keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return _node(xhat, (x,), bw, "normalize_spatial")


def adaptive_norm(x, t_embed, weight, bias, eps: float = 1e-5) -> Tensor:
    """Normalize ``x[N,C,H,W]`` per sample and channel, then apply a
    time-dependent affine.

    ``weight[D,2C]`` and ``bias[2C]`` map the embedding ``t_embed`` (``[D]``
    or ``[N,D]``) to ``(scale[C], shift[C])``.
    """
    x, t_embed, weight, bias = _wrap(x), _wrap(t_embed), _wrap(weight), _wrap(bias)
    C = x.shape[1]
    if weight.shape[-1] != 2 * C:
        raise ValueError(f"adaptive_norm affine emits {weight.shape[-1]} values, need 2*C={2 * C}")
    te = t_embed if t_embed.ndim == 2 else reshape(t_embed, (1, -1))
    affine = te @ weight + bias                       # [N or 1, 2C]
    scale = reshape(affine[:, :C], (-1, C, 1, 1))
    shift = reshape(affine[:, C:], (-1, C, 1, 1))
    return normalize_spatial(x, eps) * scale + shift


def gram_matrix(features) -> Tensor:
    """Normalized Gram matrix of ``[C,H,W]`` (or batched ``[N,C,H,W]``) features."""
    features = _wrap(features)
    if features.ndim not in (3, 4):
        raise ValueError(f"gram_matrix needs [C,H,W] or [N,C,H,W], got rank {features.ndim}")
    *lead, C, H, W = features.shape
    f = reshape(features, (*lead, C, H * W))
    return (f @ transpose(f, (*range(len(lead)), len(lead) + 1, len(lead)))) * (1.0 / (C * H * W))


def l2_normalize(a, axis: int = -1, min_norm: float = 1e-12) -> Tensor:
    a = _wrap(a)
    norms = np.sqrt((a.data * a.data).sum(axis=axis))
    if np.any(norms <= min_norm):
        raise ValueError("degenerate embedding: zero-norm vector cannot be normalized")
    return a / sqrt(tsum(a * a, axis=axis, keepdims=True))


def cosine_similarity(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise ValueError(f"cosine_similarity shape mismatch: {a.shape} vs {b.shape}")
    return tsum(l2_normalize(a, axis=-1) * l2_normalize(b, axis=-1), axis=-1)
