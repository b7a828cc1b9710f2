"""Dense float64 tensors with a small reverse-mode autodiff engine.

Values are plain ``numpy.ndarray`` objects (float64, C-contiguous). Each op
returns a :class:`Node` whose value is computed eagerly; :func:`forward`
re-evaluates a graph after leaf values change and :func:`backward` fills in
``node.grad`` for every node on a path to the loss.

Image batches use NHWC layout; conv kernels are ``(kh, kw, c_in, c_out)``.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


class MissingGradientError(LookupError):
    pass


def as_tensor(data) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(data, dtype=np.float64))


class Node:
    """One vertex of the computation graph."""

    __slots__ = ("op", "inputs", "value", "grad", "requires_grad", "_fwd", "_bwd", "_ctx")

    def __init__(self, op, inputs=(), value=None, requires_grad=False, fwd=None, bwd=None):
        self.op = op
        self.inputs = tuple(inputs)
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad or any(n.requires_grad for n in self.inputs)
        self._fwd = fwd
        self._bwd = bwd
        self._ctx = None

    @property
    def shape(self):
        return self.value.shape

    def evaluate(self):
        if self._fwd is not None:
            self.value, self._ctx = self._fwd(*(n.value for n in self.inputs))
        return self.value

    def __repr__(self):
        return f"Node({self.op}, shape={None if self.value is None else self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Node):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def leaf(value, requires_grad=False, name="leaf") -> Node:
    return Node(name, value=as_tensor(value), requires_grad=requires_grad)


def _op(op, inputs, fwd, bwd) -> Node:
    node = Node(op, inputs, fwd=fwd, bwd=bwd)
    node.evaluate()
    return node


def _need_same(op, a, b):
    if a.value.shape != b.value.shape:
        raise ShapeError(f"{op}: shapes {a.value.shape} and {b.value.shape} do not match")


def _topo(root):
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
        for parent in reversed(node.inputs):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def forward(root: Node) -> np.ndarray:
    """Re-evaluate every node feeding ``root`` in dependency order."""
    for node in _topo(root):
        if node._fwd is None and node.value is None:
            raise ValueError(f"leaf {node.op!r} has no value")
        node.evaluate()
    return root.value


def backward(loss: Node) -> None:
    if loss.value is None or np.ndim(loss.value) != 0:
        shape = None if loss.value is None else loss.value.shape
        raise ShapeError(f"backward: loss must be a scalar, got shape {shape}")
    order = [n for n in _topo(loss) if n.requires_grad]
    for node in order:
        node.grad = None
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(order):
        if node.grad is None or node._bwd is None:
            continue
        grads = node._bwd(node._ctx, node.grad, *(n.value for n in node.inputs))
        for parent, g in zip(node.inputs, grads):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g


def grad_at(node: Node) -> np.ndarray:
    if node.grad is None:
        raise MissingGradientError(f"{node!r} holds no gradient; it is not on a path to the loss")
    return node.grad


# -- elementwise ------------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    _need_same("add", a, b)
    return _op("add", (a, b), lambda x, y: (x + y, None), lambda c, g, x, y: (g, g))


def sub(a: Node, b: Node) -> Node:
    _need_same("sub", a, b)
    return _op("sub", (a, b), lambda x, y: (x - y, None), lambda c, g, x, y: (g, -g))


def mul(a: Node, b: Node) -> Node:
    _need_same("mul", a, b)
    return _op("mul", (a, b), lambda x, y: (x * y, None), lambda c, g, x, y: (g * y, g * x))


def scale(a: Node, k: float) -> Node:
    k = float(k)
    return _op("scale", (a,), lambda x: (x * k, None), lambda c, g, x: (g * k,))


def relu(a: Node) -> Node:
    # relu'(0) = 0
    def fwd(x):
        mask = x > 0
        return x * mask, mask

    return _op("relu", (a,), fwd, lambda mask, g, x: (g * mask,))


def total(a: Node) -> Node:
    return _op("sum", (a,), lambda x: (np.asarray(x.sum()), None),
               lambda c, g, x: (np.full(x.shape, g, dtype=np.float64),))


def mean(a: Node) -> Node:
    def bwd(c, g, x):
        return (np.full(x.shape, g / x.size, dtype=np.float64),)

    return _op("mean", (a,), lambda x: (np.asarray(x.mean()), None), bwd)


# -- linear algebra ---------------------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    sa, sb = a.value.shape, b.value.shape
    if len(sa) != 2 or len(sb) != 2 or sa[1] != sb[0]:
        raise ShapeError(f"matmul: cannot multiply {sa} by {sb}")
    return _op("matmul", (a, b), lambda x, y: (x @ y, None), lambda c, g, x, y: (g @ y.T, x.T @ g))


def dense(x: Node, w: Node, b: Node) -> Node:
    """Affine map ``x @ w + b``; ``b`` is broadcast over the batch axis only."""
    sx, sw, sb = x.value.shape, w.value.shape, b.value.shape
    if len(sx) != 2 or len(sw) != 2 or sx[1] != sw[0] or sb != (sw[1],):
        raise ShapeError(f"dense: input {sx}, weight {sw}, bias {sb} are incompatible")
    return _op("dense", (x, w, b), lambda x, w, b: (x @ w + b, None),
               lambda c, g, x, w, b: (g @ w.T, x.T @ g, g.sum(axis=0)))


def flatten(a: Node) -> Node:
    if a.value.ndim < 2:
        raise ShapeError(f"flatten: needs a batch axis, got shape {a.value.shape}")
    return _op("flatten", (a,), lambda x: (x.reshape(x.shape[0], -1), None),
               lambda c, g, x: (g.reshape(x.shape),))


def conv2d(x: Node, w: Node, b: Node, stride: int = 1, padding: int = 0) -> Node:
    """2-D cross-correlation over NHWC input with zero padding."""
    sx, sw, sb = x.value.shape, w.value.shape, b.value.shape
    if len(sx) != 4 or len(sw) != 4 or sx[3] != sw[2] or sb != (sw[3],):
        raise ShapeError(f"conv2d: input {sx}, kernel {sw}, bias {sb} are incompatible")
    kh, kw = sw[0], sw[1]
    ho = (sx[1] + 2 * padding - kh) // stride + 1
    wo = (sx[2] + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {sw[:2]} larger than padded input {sx[1:3]}")
    s = stride

    def window(xp, i, j):
        return xp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :]

    def fwd(xv, wv, bv):
        xp = np.pad(xv, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xv
        out = np.zeros((xv.shape[0], ho, wo, wv.shape[3]))
        for i in range(kh):
            for j in range(kw):
                out += window(xp, i, j) @ wv[i, j]
        out += bv
        return out, xp

    def bwd(xp, g, xv, wv, bv):
        gx = np.zeros_like(xp)
        gw = np.empty_like(wv)
        cin = wv.shape[2]
        g2 = g.reshape(-1, g.shape[3])
        for i in range(kh):
            for j in range(kw):
                win = window(xp, i, j)
                gw[i, j] = win.reshape(-1, cin).T @ g2
                window(gx, i, j)[...] += g @ wv[i, j].T
        if padding:
            gx = gx[:, padding:-padding, padding:-padding, :]
        return gx, gw, g2.sum(axis=0)

    return _op("conv2d", (x, w, b), fwd, bwd)


def maxpool2d(a: Node) -> Node:
    """2x2 max pooling with stride 2; ties go to the first window element in row-major order."""
    sx = a.value.shape
    if len(sx) != 4 or sx[1] < 2 or sx[2] < 2:
        raise ShapeError(f"maxpool2d: needs NHWC input with H, W >= 2, got {sx}")

    def fwd(x):
        n, h, w, c = x.shape
        h2, w2 = h // 2, w // 2
        win = x[:, :2 * h2, :2 * w2, :].reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4)
        win = win.reshape(n, h2, w2, c, 4)
        arg = win.argmax(axis=-1)
        return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0], arg

    def bwd(arg, g, x):
        n, h, w, c = x.shape
        h2, w2 = h // 2, w // 2
        win = np.zeros((n, h2, w2, c, 4))
        np.put_along_axis(win, arg[..., None], g[..., None], axis=-1)
        win = win.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)
        gx = np.zeros_like(x)
        gx[:, :2 * h2, :2 * w2, :] = win
        return (gx,)

    return _op("maxpool2d", (a,), fwd, bwd)


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Node, labels, reduction: str = "sum") -> Node:
    """Cross-entropy of ``softmax(logits)`` against integer labels.

    ``reduction="sum"`` keeps per-sample gradients independent of batch size,
    which is what the attack code relies on; training uses ``"mean"``.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    sl = logits.value.shape
    if len(sl) != 2 or labels.shape[0] != sl[0]:
        raise ShapeError(f"softmax_cross_entropy: logits {sl} vs {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= sl[1]):
        raise ValueError(f"softmax_cross_entropy: label out of range [0, {sl[1]})")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    rows = np.arange(sl[0])
    norm = 1.0 if reduction == "sum" else 1.0 / sl[0]

    def fwd(z):
        logp = log_softmax(z)
        return np.asarray(-logp[rows, labels].sum() * norm), logp

    def bwd(logp, g, z):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g * norm),)

    return _op("softmax_cross_entropy", (logits,), fwd, bwd)
