"""Dense float64 tensors and a minimal reverse-mode autodiff tape.

The Tensor class is a thin immutable wrapper around a C-contiguous float64
ndarray. Node is the tape entry used for gradient-based training: it holds a
value, the nodes it was computed from, and a closure that maps the upstream
gradient to per-parent gradient contributions. backward() walks the tape once
in reverse topological order and sums contributions, so parameters used in
several places accumulate correctly.

Only the operations the toolkit actually needs are implemented. Broadcasting
is deliberately restricted to bias addition and per-channel scaling; anything
else must be shape-exact.
"""

import numpy as np

from .errors import ContractError, ShapeError


class Tensor:
    """Immutable, C-contiguous float64 array with finiteness enforced."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64, order="C")
        if not np.all(np.isfinite(arr)):
            raise ContractError("tensor values must be finite")
        arr.flags.writeable = False
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Internal fast path: trusts the caller to hand over a fresh finite
        # float64 array that nobody else mutates.
        out = cls.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        out.data = arr
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError("item() requires a single-element tensor, got shape %r" % (self.shape,))

    def __repr__(self):
        return "Tensor(shape=%r)" % (self.shape,)


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


class Node:
    """One tape entry: a computed value plus backward plumbing.

    value    -- Tensor holding the forward result
    grad     -- ndarray of d(loss)/d(value), allocated on demand
    _parents -- nodes this one was computed from
    _backward -- callable(out_grad) -> tuple of per-parent gradient arrays,
                 entries may be None for non-differentiable parents
    """

    __slots__ = ("value", "grad", "_parents", "_backward", "name")

    def __init__(self, value, parents=(), backward=None, name=""):
        if not isinstance(value, Tensor):
            value = Tensor._wrap(_as_array(value))
        self.value = value
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = " %s" % self.name if self.name else ""
        return "Node(shape=%r%s)" % (self.shape, tag)


def leaf(value, name="") -> Node:
    """Wrap a parameter or input as a tape leaf."""
    return Node(value, (), None, name=name)


def _topo_order(root: Node) -> list:
    # Iterative DFS; recursion depth would otherwise scale with graph depth.
    order = []
    seen = set()
    stack = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node):
    """Populate .grad on every node reachable from loss.

    The loss must be scalar. Each node's backward closure runs exactly once;
    gradients of shared nodes are summed.
    """
    if loss.data.size != 1:
        raise ShapeError("backward() requires a scalar loss, got shape %r" % (loss.shape,))
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        contribs = node._backward(node.grad)
        for parent, g in zip(node._parents, contribs):
            if g is None:
                continue
            if g.shape != parent.data.shape:
                raise ShapeError(
                    "gradient shape %r does not match value shape %r" % (g.shape, parent.data.shape)
                )
            if parent.grad is None:
                parent.grad = g.copy()
            else:
                parent.grad = parent.grad + g


# ---------------------------------------------------------------------------
# pure ndarray kernels, shared by autograd ops and the inference executors
# ---------------------------------------------------------------------------


def matmul_fp(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul expects (n,k)x(k,m), got %r x %r" % (a.shape, b.shape))
    return a @ b


def _conv_geometry(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride != 0:
        raise ShapeError(
            "conv geometry invalid: size=%d kernel=%d stride=%d padding=%d" % (size, k, stride, padding)
        )
    return span // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """Return windows of shape (N, C, Hout, Wout, kh, kw) plus (Hout, Wout)."""
    n, c, h, w = x.shape
    hout = _conv_geometry(h, kh, stride, padding)
    wout = _conv_geometry(w, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    if win.shape[2] != hout or win.shape[3] != wout:
        raise ShapeError("window extraction disagrees with conv geometry")
    return win, hout, wout


def _col2im(grad_win: np.ndarray, x_shape, kh, kw, stride, padding) -> np.ndarray:
    """Scatter window gradients (N, C, Hout, Wout, kh, kw) back onto x."""
    n, c, h, w = x_shape
    hout, wout = grad_win.shape[2], grad_win.shape[3]
    gx = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + stride * hout : stride, j : j + stride * wout : stride] += grad_win[:, :, :, :, i, j]
    if padding:
        gx = gx[:, :, padding : padding + h, padding : padding + w]
    return gx


def conv2d_fp(x, w, stride=1, padding=0) -> np.ndarray:
    """Standard conv. x: (N,C,H,W), w: (K,C,kh,kw) -> (N,K,Hout,Wout)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and weight")
    if x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d channel mismatch: input %r weight %r" % (x.shape, w.shape))
    win, hout, wout = _im2col(x, w.shape[2], w.shape[3], stride, padding)
    return np.einsum("ncpqij,kcij->nkpq", win, w)


def depthwise_conv2d_fp(x, w, stride=1, padding=0) -> np.ndarray:
    """Depthwise conv. x: (N,C,H,W), w: (C,1,kh,kw) -> (N,C,Hout,Wout)."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != 1:
        raise ShapeError("depthwise conv expects weight of shape (C,1,kh,kw)")
    if x.shape[1] != w.shape[0]:
        raise ShapeError("depthwise channel mismatch: input %r weight %r" % (x.shape, w.shape))
    win, hout, wout = _im2col(x, w.shape[2], w.shape[3], stride, padding)
    return np.einsum("ncpqij,cij->ncpq", win, w[:, 0])


def avgpool2d_fp(x, kernel: int, stride=None) -> np.ndarray:
    stride = kernel if stride is None else stride
    win, hout, wout = _im2col(x, kernel, kernel, stride, 0)
    return win.mean(axis=(4, 5))


def maxpool2d_fp(x, kernel: int, stride=None) -> np.ndarray:
    stride = kernel if stride is None else stride
    win, hout, wout = _im2col(x, kernel, kernel, stride, 0)
    return win.max(axis=(4, 5))


# ---------------------------------------------------------------------------
# autograd ops
# ---------------------------------------------------------------------------


def _same_shape(a: Node, b: Node, opname: str):
    if a.shape != b.shape:
        raise ShapeError("%s requires equal shapes, got %r and %r" % (opname, a.shape, b.shape))


def add(a: Node, b: Node) -> Node:
    _same_shape(a, b, "add")
    return Node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Node, b: Node) -> Node:
    _same_shape(a, b, "sub")
    return Node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Node, b: Node) -> Node:
    _same_shape(a, b, "mul")
    return Node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return Node(a.data * c, (a,), lambda g: (g * c,))


def shift(a: Node, c: float) -> Node:
    return Node(a.data + float(c), (a,), lambda g: (g,))


def neg(a: Node) -> Node:
    return Node(-a.data, (a,), lambda g: (-g,))


def _channel_view(v: np.ndarray, ndim: int, axis: int) -> np.ndarray:
    shape = [1] * ndim
    shape[axis] = v.shape[0]
    return v.reshape(shape)


def add_bias(x: Node, b: Node, axis: int = 1) -> Node:
    """x + b with b broadcast along one channel axis."""
    if b.data.ndim != 1 or x.data.shape[axis] != b.data.shape[0]:
        raise ShapeError("bias shape %r does not match axis %d of %r" % (b.shape, axis, x.shape))
    bview = _channel_view(b.data, x.data.ndim, axis)
    reduce_axes = tuple(i for i in range(x.data.ndim) if i != axis)

    def bwd(g):
        return g, g.sum(axis=reduce_axes)

    return Node(x.data + bview, (x, b), bwd)


def scale_channels(x: Node, s: Node, axis: int = 1) -> Node:
    """x * s with s broadcast along one channel axis."""
    if s.data.ndim != 1 or x.data.shape[axis] != s.data.shape[0]:
        raise ShapeError("scale shape %r does not match axis %d of %r" % (s.shape, axis, x.shape))
    sview = _channel_view(s.data, x.data.ndim, axis)
    reduce_axes = tuple(i for i in range(x.data.ndim) if i != axis)

    def bwd(g):
        return g * sview, (g * x.data).sum(axis=reduce_axes)

    return Node(x.data * sview, (x, s), bwd)


def matmul(a: Node, b: Node) -> Node:
    out = matmul_fp(a.data, b.data)

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return Node(out, (a, b), bwd)


def conv2d(x: Node, w: Node, stride: int = 1, padding: int = 0) -> Node:
    kh, kw = w.data.shape[2], w.data.shape[3]
    win, hout, wout = _im2col(x.data, kh, kw, stride, padding)
    out = np.einsum("ncpqij,kcij->nkpq", win, w.data)

    def bwd(g):
        gw = np.einsum("nkpq,ncpqij->kcij", g, win)
        grad_win = np.einsum("nkpq,kcij->ncpqij", g, w.data)
        gx = _col2im(grad_win, x.data.shape, kh, kw, stride, padding)
        return gx, gw

    return Node(out, (x, w), bwd)


def depthwise_conv2d(x: Node, w: Node, stride: int = 1, padding: int = 0) -> Node:
    if w.data.shape[1] != 1:
        raise ShapeError("depthwise conv expects weight of shape (C,1,kh,kw)")
    kh, kw = w.data.shape[2], w.data.shape[3]
    win, hout, wout = _im2col(x.data, kh, kw, stride, padding)
    out = np.einsum("ncpqij,cij->ncpq", win, w.data[:, 0])

    def bwd(g):
        gw = np.einsum("ncpq,ncpqij->cij", g, win)[:, None]
        grad_win = np.einsum("ncpq,cij->ncpqij", g, w.data[:, 0])
        gx = _col2im(grad_win, x.data.shape, kh, kw, stride, padding)
        return gx, gw

    return Node(out, (x, w), bwd)


def transpose2d(x: Node) -> Node:
    if x.data.ndim != 2:
        raise ShapeError("transpose2d expects a matrix, got %r" % (x.shape,))

    def bwd(g):
        return (np.ascontiguousarray(g.T),)

    return Node(np.ascontiguousarray(x.data.T), (x,), bwd)


def relu(x: Node) -> Node:
    mask = x.data > 0

    def bwd(g):
        return (g * mask,)

    return Node(np.where(mask, x.data, 0.0), (x,), bwd)


def relu6(x: Node, clip=6.0) -> Node:
    """Clip to [0, clip]. clip may be a scalar or a per-channel (axis 1) array."""
    c = np.asarray(clip, dtype=np.float64)
    if c.ndim == 1:
        c = _channel_view(c, x.data.ndim, 1)
    out = np.clip(x.data, 0.0, c)
    mask = (x.data > 0) & (x.data < c)

    def bwd(g):
        return (g * mask,)

    return Node(out, (x,), bwd)


def sigmoid(x: Node) -> Node:
    out = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return Node(out, (x,), bwd)


def clip(x: Node, lo, hi) -> Node:
    """Clamp to [lo, hi]; bounds may be scalars or broadcastable arrays."""
    out = np.clip(x.data, lo, hi)
    mask = (x.data >= lo) & (x.data <= hi)

    def bwd(g):
        return (g * mask,)

    return Node(out, (x,), bwd)


def absolute(x: Node) -> Node:
    def bwd(g):
        return (g * np.sign(x.data),)

    return Node(np.abs(x.data), (x,), bwd)


def power(x: Node, p: float) -> Node:
    p = float(p)
    out = x.data**p

    def bwd(g):
        return (g * p * x.data ** (p - 1.0),)

    return Node(out, (x,), bwd)


def reshape(x: Node, shape) -> Node:
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(x.data.shape),)

    return Node(out, (x,), bwd)


def flatten(x: Node) -> Node:
    """Collapse all axes after the batch axis."""
    n = x.data.shape[0]
    return reshape(x, (n, -1))


def concat(nodes, axis: int = 1) -> Node:
    nodes = list(nodes)
    if len(nodes) < 2:
        raise ShapeError("concat needs at least two inputs")
    out = np.concatenate([n.data for n in nodes], axis=axis)
    sizes = [n.data.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Node(out, tuple(nodes), bwd)


def avgpool2d(x: Node, kernel: int, stride=None) -> Node:
    stride = kernel if stride is None else stride
    win, hout, wout = _im2col(x.data, kernel, kernel, stride, 0)
    out = win.mean(axis=(4, 5))
    inv = 1.0 / (kernel * kernel)

    def bwd(g):
        grad_win = np.broadcast_to((g * inv)[..., None, None], win.shape)
        return (_col2im(grad_win, x.data.shape, kernel, kernel, stride, 0),)

    return Node(out, (x,), bwd)


def maxpool2d(x: Node, kernel: int, stride=None) -> Node:
    stride = kernel if stride is None else stride
    win, hout, wout = _im2col(x.data, kernel, kernel, stride, 0)
    flat = win.reshape(win.shape[:4] + (kernel * kernel,))
    idx = flat.argmax(axis=4)
    out = np.take_along_axis(flat, idx[..., None], axis=4)[..., 0]

    def bwd(g):
        grad_flat = np.zeros_like(flat)
        np.put_along_axis(grad_flat, idx[..., None], g[..., None], axis=4)
        grad_win = grad_flat.reshape(win.shape)
        return (_col2im(grad_win, x.data.shape, kernel, kernel, stride, 0),)

    return Node(out, (x,), bwd)


def reduce_sum(x: Node) -> Node:
    def bwd(g):
        return (np.full_like(x.data, float(g.reshape(-1)[0])),)

    return Node(np.array(x.data.sum()), (x,), bwd)


def reduce_mean(x: Node) -> Node:
    inv = 1.0 / x.data.size

    def bwd(g):
        return (np.full_like(x.data, float(g.reshape(-1)[0]) * inv),)

    return Node(np.array(x.data.mean()), (x,), bwd)


def mse_loss(pred: Node, target: np.ndarray) -> Node:
    t = _as_array(target)
    if t.shape != pred.shape:
        raise ShapeError("mse target shape %r does not match %r" % (t.shape, pred.shape))
    diff = pred.data - t
    inv = 1.0 / diff.size

    def bwd(g):
        return (2.0 * inv * float(g.reshape(-1)[0]) * diff,)

    return Node(np.array(np.mean(diff * diff)), (pred,), bwd)


def softmax_cross_entropy(logits: Node, labels: np.ndarray) -> Node:
    """Mean cross-entropy of softmax(logits) against integer class labels."""
    z = logits.data
    if z.ndim != 2:
        raise ShapeError("softmax_cross_entropy expects (N,C) logits, got %r" % (z.shape,))
    labels = np.asarray(labels)
    if labels.shape != (z.shape[0],):
        raise ShapeError("labels shape %r does not match batch %d" % (labels.shape, z.shape[0]))
    labels = labels.astype(np.int64)
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    p = ez / ez.sum(axis=1, keepdims=True)
    n = z.shape[0]
    nll = -np.log(p[np.arange(n), labels])

    def bwd(g):
        gp = p.copy()
        gp[np.arange(n), labels] -= 1.0
        return (float(g.reshape(-1)[0]) / n * gp,)

    return Node(np.array(nll.mean()), (logits,), bwd)


def softmax_fp(z: np.ndarray, axis: int = -1) -> np.ndarray:
    zmax = z.max(axis=axis, keepdims=True)
    ez = np.exp(z - zmax)
    return ez / ez.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0


def adam_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update with bias correction. Returns new parameter arrays."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractError("adam_step: params, grads and state lengths differ")
    state.t += 1
    t = state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            out.append(p)
            continue
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * (g * g)
        mhat = state.m[i] / (1.0 - beta1**t)
        vhat = state.v[i] / (1.0 - beta2**t)
        out.append(p - lr * mhat / (np.sqrt(vhat) + eps))
    return out
