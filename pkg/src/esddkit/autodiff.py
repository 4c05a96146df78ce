"""A small reverse-mode autodiff engine over float64 numpy arrays.

Operations build :class:`Tensor` objects that remember their parents and a
vector-Jacobian closure. When a :class:`Graph` is active (``with Graph() as g``)
every differentiable node is also appended to ``g`` in creation order, which is
a valid topological order for :func:`backward`.

There is no implicit broadcasting: binary elementwise ops require equal shapes,
and :func:`expand` is the explicit way to tile a tensor along a new axis.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import GraphConsumed, NonFiniteValue, NonScalarRoot, ShapeMismatch

_ACTIVE: list["Graph"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "vjp", "tag", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.vjp: Callable | None = None
        self.tag = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = self.name or self.tag
        return f"Tensor({label}, shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar for the common cases
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Graph:
    """Ordered record of differentiable nodes; consumed by one backward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.consumed = False

    def __enter__(self):
        if self.consumed:
            raise GraphConsumed("graph was already consumed by backward()")
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def const(x) -> Tensor:
    return Tensor(x, requires_grad=False)


def _node(tag: str, out: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFiniteValue(f"{tag} produced non-finite values (output shape {out.shape})")
    t = Tensor(out)
    t.tag = tag
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t.parents = tuple(parents)
        t.vjp = vjp
        if _ACTIVE:
            _ACTIVE[-1].nodes.append(t)
    return t


def _same_shape(tag: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{tag}: shapes {a.shape} and {b.shape} differ")


# elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _node("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _node("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    return _node("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return _node("scale", a.data * s, (a,), lambda g: (g * s,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _node("log", out, (a,), lambda g: (g / a.data,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _node("exp", out, (a,), lambda g: (g * out,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data**p
    return _node("power", out, (a,), lambda g: (g * p * a.data ** (p - 1),))


# linear algebra --------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    return _node("matmul", a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def _to_nhwc(x: np.ndarray, layout: str) -> np.ndarray:
    return x.transpose(0, 2, 3, 1) if layout == "NCHW" else x


def _from_nhwc(x: np.ndarray, layout: str) -> np.ndarray:
    return x.transpose(0, 3, 1, 2) if layout == "NCHW" else x


def _check_layout(layout: str) -> None:
    if layout not in ("NCHW", "NHWC"):
        raise ValueError(f"layout must be NCHW or NHWC, got {layout!r}")


def conv2d(x, w, bias=None, stride: int = 1, padding: int = 0, layout: str = "NCHW") -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is (B, Cin, H, W) for NCHW or (B, H, W, Cin) for NHWC; ``w`` is always
    (Cout, Cin, kh, kw) and ``bias`` (Cout,). Computed as an im2col matmul in
    channels-last order.
    """
    _check_layout(layout)
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeMismatch(f"conv2d: expected 4-D input and kernel, got {x.shape} and {w.shape}")
    xd = _to_nhwc(x.data, layout)
    bsz, h, wd, cin = xd.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ShapeMismatch(f"conv2d: input {x.shape} ({layout}) has {cin} channels, kernel {w.shape} expects {wcin}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeMismatch(f"conv2d: bias {bias.shape} for {cout} output channels")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeMismatch(f"conv2d: kernel {(kh, kw)} larger than padded input {x.shape}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xd
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    offsets = [(i, j) for i in range(kh) for j in range(kw)]
    cols = np.concatenate([xp[:, i : i + hs : stride, j : j + ws : stride, :] for i, j in offsets], axis=-1)
    cols = cols.reshape(bsz * ho * wo, kh * kw * cin)
    # rows of wmat ordered (i, j, cin) to match the column layout
    wmat = w.data.transpose(2, 3, 1, 0).reshape(kh * kw * cin, cout)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = _from_nhwc(out.reshape(bsz, ho, wo, cout), layout)

    def vjp(g):
        g2 = np.ascontiguousarray(_to_nhwc(g, layout)).reshape(-1, cout)
        gw = None
        if w.requires_grad:
            gw = (cols.T @ g2).reshape(kh, kw, cin, cout).transpose(3, 2, 0, 1)
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(bsz, ho, wo, kh * kw * cin)
            dxp = np.zeros((bsz, hp, wp, cin))
            for k, (i, j) in enumerate(offsets):
                dxp[:, i : i + hs : stride, j : j + ws : stride, :] += dcols[..., k * cin : (k + 1) * cin]
            if padding:
                dxp = dxp[:, padding : padding + h, padding : padding + wd, :]
            gx = _from_nhwc(dxp, layout)
        grads = (gx, gw)
        if bias is not None:
            grads += (g2.sum(axis=0),)
        return grads

    parents = (x, w) if bias is None else (x, w, bias)
    return _node("conv2d", out, parents, vjp)


def maxpool2d(x, size: int = 2, layout: str = "NCHW") -> Tensor:
    """Non-overlapping max-pool; trailing rows/cols that do not fill a window are dropped.

    Ties resolve to the first position in row-major window order.
    """
    _check_layout(layout)
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeMismatch(f"maxpool2d: expected 4-D input, got {x.shape}")
    xd = _to_nhwc(x.data, layout)
    b, h, w, c = xd.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise ShapeMismatch(f"maxpool2d: input {x.shape} smaller than pool {size}")
    offsets = [(i, j) for i in range(size) for j in range(size)]

    def view(arr, i, j):
        return arr[:, i : ho * size : size, j : wo * size : size, :]

    out = view(xd, 0, 0).copy()
    arg = np.zeros(out.shape, dtype=np.int8)
    for k, (i, j) in enumerate(offsets[1:], start=1):
        v = view(xd, i, j)
        better = v > out
        np.copyto(out, v, where=better)
        arg[better] = k

    def vjp(g):
        g = _to_nhwc(g, layout)
        gx = np.zeros((b, h, w, c))
        for k, (i, j) in enumerate(offsets):
            view(gx, i, j)[...] = np.where(arg == k, g, 0.0)
        return (_from_nhwc(gx, layout),)

    return _node("maxpool2d", _from_nhwc(out, layout), (x,), vjp)


def global_avg_pool(x, layout: str = "NCHW") -> Tensor:
    """Mean over the spatial axes: (B, C, H, W) or (B, H, W, C) -> (B, C)."""
    _check_layout(layout)
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeMismatch(f"global_avg_pool: expected 4-D input, got {x.shape}")
    axes = (2, 3) if layout == "NCHW" else (1, 2)
    n = x.shape[axes[0]] * x.shape[axes[1]]
    out = x.data.mean(axis=axes)

    def vjp(g):
        g = g / n
        g = g[:, :, None, None] if layout == "NCHW" else g[:, None, None, :]
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node("global_avg_pool", out, (x,), vjp)


# reductions and shape ops ----------------------------------------------------


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    out = x.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.full(x.shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _node("sum", np.asarray(out), (x,), vjp)


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / n)


def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return _node(
        "softmax", s, (x,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),)
    )


def log_softmax(x) -> Tensor:
    """log(softmax(x)) over the last axis, computed stably."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _node("log_softmax", out, (x,), lambda g: (g - s * g.sum(axis=-1, keepdims=True),))


def l2norm(x) -> Tensor:
    """Euclidean norm over the last axis; the subgradient at 0 is taken as 0."""
    x = as_tensor(x)
    n = np.sqrt((x.data**2).sum(axis=-1))

    def vjp(g):
        safe = np.where(n > 0, n, 1.0)
        return (g[..., None] * x.data / safe[..., None] * (n > 0)[..., None],)

    return _node("l2norm", n, (x,), vjp)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ref = list(xs[0].shape)
    for x in xs[1:]:
        other = list(x.shape)
        if len(other) != len(ref) or other[:axis] + other[axis + 1 :] != ref[:axis] + ref[axis + 1 :]:
            raise ShapeMismatch(f"concat: shapes {[x.shape for x in xs]} along axis {axis}")
    out = np.concatenate([x.data for x in xs], axis=axis)
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _node("concat", out, xs, lambda g: tuple(np.split(g, splits, axis=axis)))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"reshape: cannot view {x.shape} as {tuple(shape)}") from exc
    return _node("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeMismatch(f"transpose: expected 2-D input, got {x.shape}")
    return _node("transpose", x.data.T, (x,), lambda g: (g.T,))


def expand(x, axis: int, n: int) -> Tensor:
    """Insert a new axis at ``axis`` and repeat ``x`` ``n`` times along it."""
    x = as_tensor(x)
    out = np.repeat(np.expand_dims(x.data, axis), n, axis=axis)
    return _node("expand", out, (x,), lambda g: (g.sum(axis=axis),))


# backward --------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return [n for n in order if not n.is_leaf]


def backward(root: Tensor, graph: Graph | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of scalar ``root`` with respect to every grad-requiring leaf.

    With ``graph`` given, its recorded order drives the sweep and the graph is
    consumed; otherwise the order is recovered from ``root``'s ancestry.
    """
    if root.data.size != 1 or root.data.ndim != 0:
        raise NonScalarRoot(f"backward needs a scalar root, got shape {root.shape}")
    if graph is not None:
        if graph.consumed:
            raise GraphConsumed("graph was already consumed by backward()")
        nodes = graph.nodes
    else:
        nodes = _topo_order(root)

    grads: dict[int, np.ndarray] = {id(root): np.ones(())}
    leaves: dict[int, Tensor] = {}
    if root.is_leaf and root.requires_grad:
        leaves[id(root)] = root
    for node in reversed(nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if parent.is_leaf:
                leaves[key] = parent
    if graph is not None:
        graph.nodes = []
        graph.consumed = True
    return {leaf: grads.get(key, np.zeros(leaf.shape)) for key, leaf in leaves.items()}
