"""Dense float64 tensors with reverse-mode differentiation.

Every op is a :class:`Function`.  Applying one records a node on the output
tensor; nodes carry a global sequence number, so sorting by it recovers the
order in which the graph was appended and gives a valid topological order.

Two families of ops exist.  *Structural* ops (add, mul, matmul, reshape,
indexing, unfold, tanh, ...) write their backward in terms of other tensor
ops, so gradients can themselves be differentiated (``create_graph=True``).
The remaining ops (softmax, layer norm, ...) compute their backward directly
in numpy and refuse to take part in a second derivative.
"""
from __future__ import annotations

import contextlib
import itertools
import math

import numpy as np
from scipy import special

DTYPE = np.float64

_seq = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        joined = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def _grad_mode(flag):
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = flag
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self, create_graph=False):
        grads = _run_backward(self, None, create_graph)
        for leaf, g in grads.values():
            gd = g.data
            leaf.grad = gd.copy() if leaf.grad is None else leaf.grad + gd

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad=False):
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=requires_grad)


class Function:
    """Base op.  Subclasses implement ``forward`` on arrays, ``backward`` on a Tensor."""

    double_differentiable = True

    def __init__(self, **kw):
        self.__dict__.update(kw)
        self.inputs = ()

    @classmethod
    def apply(cls, *inputs, **kw):
        fn = cls(**kw)
        inputs = tuple(as_tensor(x) for x in inputs)
        out = Tensor(fn.forward(*(t.data for t in inputs)))
        if _grad_enabled and any(t.requires_grad for t in inputs):
            fn.inputs = inputs
            fn.seq = next(_seq)
            out.requires_grad = True
            out._node = fn
        return out

    def forward(self, *arrays):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError

    @property
    def name(self):
        return type(self).__name__


def _sorted_graph(root):
    seen = set()
    nodes = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._node is not None:
            nodes.append(t)
            stack.extend(i for i in t._node.inputs if i.requires_grad and id(i) not in seen)
    nodes.sort(key=lambda t: t._node.seq)
    return nodes


def _run_backward(loss, targets, create_graph):
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad; graph is empty")
    nodes = _sorted_graph(loss)
    relevant = None
    if targets is not None:
        target_ids = {id(t) for t in targets}
        relevant = set(target_ids)
        for t in nodes:
            if any(id(i) in relevant for i in t._node.inputs):
                relevant.add(id(t))
        if id(loss) not in relevant:
            return {}
    grads = {id(loss): Tensor(np.ones_like(loss.data))}
    leaves = {}
    with _grad_mode(create_graph):
        for t in reversed(nodes):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            fn = t._node
            if create_graph and not fn.double_differentiable:
                raise RuntimeError(f"{fn.name} does not support create_graph")
            in_grads = fn.backward(g)
            for inp, ig in zip(fn.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if relevant is not None and id(inp) not in relevant:
                    continue
                if ig.shape != inp.shape:
                    raise ShapeError(f"{fn.name}.backward", ig.shape, inp.shape)
                if inp._node is None or (targets is not None and id(inp) in target_ids):
                    prev = leaves.get(id(inp))
                    leaves[id(inp)] = (inp, ig if prev is None else add(prev[1], ig))
                    if inp._node is None:
                        continue
                prev = grads.get(id(inp))
                grads[id(inp)] = ig if prev is None else add(prev, ig)
    return leaves


def grad(output, inputs, create_graph=False):
    """Gradients of scalar ``output`` w.r.t. each tensor in ``inputs``.

    Missing paths give zero gradients.  With ``create_graph`` the returned
    tensors are themselves differentiable.
    """
    found = _run_backward(output, list(inputs), create_graph)
    out = []
    for t in inputs:
        hit = found.get(id(t))
        out.append(hit[1] if hit is not None else Tensor(np.zeros_like(t.data)))
    return out


# ---------------------------------------------------------------- structural ops


def _broadcast_ok(a, b):
    """Allowed broadcast: one shape is a trailing suffix of the other."""
    if a == b:
        return True
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    return long_[len(long_) - len(short):] == short


def sum_to(g, shape):
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    return tsum(g, tuple(range(lead)))


class Add(Function):
    def forward(self, a, b):
        if not _broadcast_ok(a.shape, b.shape):
            raise ShapeError("add", a.shape, b.shape)
        return a + b

    def backward(self, g):
        a, b = self.inputs
        return sum_to(g, a.shape), sum_to(g, b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (neg(g),)


class Mul(Function):
    def forward(self, a, b):
        if not _broadcast_ok(a.shape, b.shape):
            raise ShapeError("mul", a.shape, b.shape)
        return a * b

    def backward(self, g):
        a, b = self.inputs
        ga = sum_to(mul(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb


class Power(Function):
    def forward(self, a):
        return a ** self.p

    def backward(self, g):
        (a,) = self.inputs
        if self.p == 1.0:
            return (g,)
        return (mul(g, mul(power(a, self.p - 1.0), self.p)),)


class MatMul(Function):
    """``(..., M, K) @ (K, N)`` or batched ``(..., M, K) @ (..., K, N)``."""

    def forward(self, a, b):
        ok = a.ndim >= 2 and b.ndim >= 2 and a.shape[-1] == b.shape[-2]
        if ok and b.ndim > 2:
            ok = a.shape[:-2] == b.shape[:-2]
        if not ok:
            raise ShapeError("matmul", a.shape, b.shape)
        return a @ b

    def backward(self, g):
        a, b = self.inputs
        ga = gb = None
        if b.ndim == 2:
            if a.requires_grad:
                ga = matmul(g, transpose(b, (1, 0)))
            if b.requires_grad:
                k, n = b.shape
                a2 = reshape(a, (-1, k))
                gb = matmul(transpose(a2, (1, 0)), reshape(g, (-1, n)))
        else:
            swap = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
            if a.requires_grad:
                ga = matmul(g, transpose(b, swap))
            if b.requires_grad:
                gb = matmul(transpose(a, swap), g)
        return ga, gb


class Reshape(Function):
    def forward(self, a):
        self.in_shape = a.shape
        try:
            return a.reshape(self.shape)
        except ValueError:
            raise ShapeError("reshape", a.shape, self.shape) from None

    def backward(self, g):
        return (reshape(g, self.in_shape),)


class Transpose(Function):
    def forward(self, a):
        if sorted(self.axes) != list(range(a.ndim)):
            raise ShapeError("transpose", a.shape, self.axes)
        return np.transpose(a, self.axes)

    def backward(self, g):
        return (transpose(g, tuple(np.argsort(self.axes))),)


class Sum(Function):
    def forward(self, a):
        self.in_shape = a.shape
        return np.sum(a, axis=self.axis)

    def backward(self, g):
        return (expand(g, self.axis, self.in_shape),)


class Expand(Function):
    """Inverse of ``Sum``: re-insert reduced axes and broadcast along them."""

    def forward(self, a):
        axis = self.axis
        if axis is None:
            axis = tuple(range(len(self.shape)))
        elif isinstance(axis, int):
            axis = (axis,)
        axis = tuple(ax % len(self.shape) for ax in axis)
        keep = [1 if i in axis else n for i, n in enumerate(self.shape)]
        self.norm_axis = axis
        return np.broadcast_to(a.reshape(keep), self.shape).copy()

    def backward(self, g):
        return (tsum(g, self.norm_axis),)


def _is_basic(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


class GetItem(Function):
    def forward(self, a):
        self.in_shape = a.shape
        try:
            return np.array(a[self.index], dtype=DTYPE)
        except IndexError as err:
            raise ShapeError("getitem", a.shape, (str(err),)) from None

    def backward(self, g):
        return (scatter_add(g, self.index, self.in_shape),)


class ScatterAdd(Function):
    """Place ``a`` into zeros of ``shape`` at ``index`` (summing duplicates)."""

    def forward(self, a):
        out = np.zeros(self.shape, dtype=DTYPE)
        if _is_basic(self.index):
            out[self.index] += a
        else:
            np.add.at(out, self.index, a)
        return out

    def backward(self, g):
        return (getitem(g, self.index),)


class Unfold(Function):
    """``(B, T, C)`` -> ``(B, T_out, k, C)`` sliding windows along time."""

    def forward(self, x):
        if x.ndim != 3:
            raise ShapeError("unfold", x.shape, (self.kernel, self.stride))
        b, t, c = x.shape
        self.in_shape = x.shape
        t_out = (t - self.kernel) // self.stride + 1 if t >= self.kernel else 0
        if t_out == 0:
            return np.zeros((b, 0, self.kernel, c))
        win = np.lib.stride_tricks.sliding_window_view(x, self.kernel, axis=1)
        win = win[:, : (t_out - 1) * self.stride + 1 : self.stride]
        return np.ascontiguousarray(np.transpose(win, (0, 1, 3, 2)))

    def backward(self, g):
        return (fold(g, self.kernel, self.stride, self.in_shape),)


class Fold(Function):
    def forward(self, cols):
        out = np.zeros(self.shape, dtype=DTYPE)
        t_out = cols.shape[1]
        if t_out:
            span = (t_out - 1) * self.stride + 1
            for j in range(self.kernel):
                out[:, j : j + span : self.stride] += cols[:, :, j]
        return out

    def backward(self, g):
        return (unfold(g, self.kernel, self.stride),)


class Tanh(Function):
    def forward(self, a):
        self.out = np.tanh(a)
        return self.out

    def backward(self, g):
        y = tanh(self.inputs[0]) if _grad_enabled else Tensor(self.out)
        return (mul(g, add(neg(mul(y, y)), 1.0)),)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, g):
        y = exp(self.inputs[0]) if _grad_enabled else Tensor(self.out)
        return (mul(g, y),)


class Log(Function):
    def forward(self, a):
        return np.log(a)

    def backward(self, g):
        return (mul(g, power(self.inputs[0], -1.0)),)


def add(a, b):
    return Add.apply(a, b)


def neg(a):
    return Neg.apply(a)


def sub(a, b):
    return add(a, neg(b))


def mul(a, b):
    return Mul.apply(a, b)


def power(a, p):
    return Power.apply(a, p=float(p))


def matmul(a, b):
    return MatMul.apply(a, b)


def reshape(a, shape):
    return Reshape.apply(a, shape=tuple(shape))


def transpose(a, axes):
    return Transpose.apply(a, axes=tuple(int(x) for x in axes))


def tsum(a, axis=None):
    if isinstance(axis, list):
        axis = tuple(axis)
    return Sum.apply(a, axis=axis)


def mean(a, axis=None):
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis), 1.0 / max(n, 1))


def expand(a, axis, shape):
    return Expand.apply(a, axis=axis, shape=tuple(shape))


def getitem(a, index):
    return GetItem.apply(a, index=index)


def scatter_add(a, index, shape):
    return ScatterAdd.apply(a, index=index, shape=tuple(shape))


def pad_time(x, left, right):
    """Zero-pad axis 1 of a ``(B, T, C)`` tensor."""
    b, t, c = x.shape
    return scatter_add(x, (slice(None), slice(left, left + t)), (b, t + left + right, c))


def unfold(x, kernel, stride):
    return Unfold.apply(x, kernel=int(kernel), stride=int(stride))


def fold(cols, kernel, stride, shape):
    return Fold.apply(cols, kernel=int(kernel), stride=int(stride), shape=tuple(shape))


def tanh(a):
    return Tanh.apply(a)


def exp(a):
    return Exp.apply(a)


def log(a):
    return Log.apply(a)


def conv1d(x, weight, bias=None, stride=1, padding=(0, 0)):
    """Channels-last 1-D convolution.

    x: ``(B, T, C_in)``; weight: ``(k, C_in, C_out)``; output
    ``(B, floor((T + pad - k) / stride) + 1, C_out)``.
    """
    x = as_tensor(x)
    weight = as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3 or x.shape[2] != weight.shape[1]:
        raise ShapeError("conv1d", x.shape, weight.shape)
    k, c_in, c_out = weight.shape
    if padding != (0, 0):
        x = pad_time(x, *padding)
    cols = unfold(x, k, stride)
    b, t_out = cols.shape[:2]
    y = matmul(reshape(cols, (b, t_out, k * c_in)), reshape(weight, (k * c_in, c_out)))
    if bias is not None:
        y = add(y, bias)
    return y


# ------------------------------------------------------- once-differentiable ops


class _OnceDiff(Function):
    double_differentiable = False


class Relu(_OnceDiff):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0.0)

    def backward(self, g):
        return (Tensor(g.data * self.mask),)


class LeakyRelu(_OnceDiff):
    def forward(self, a):
        self.slope_arr = np.where(a > 0, 1.0, self.slope)
        return a * self.slope_arr

    def backward(self, g):
        return (Tensor(g.data * self.slope_arr),)


class Gelu(_OnceDiff):
    def forward(self, a):
        self.a = a
        self.cdf = 0.5 * (1.0 + special.erf(a / math.sqrt(2.0)))
        return a * self.cdf

    def backward(self, g):
        pdf = np.exp(-0.5 * self.a * self.a) / math.sqrt(2.0 * math.pi)
        return (Tensor(g.data * (self.cdf + self.a * pdf)),)


class Sigmoid(_OnceDiff):
    def forward(self, a):
        self.out = special.expit(a)
        return self.out

    def backward(self, g):
        return (Tensor(g.data * self.out * (1.0 - self.out)),)


class LogSigmoid(_OnceDiff):
    def forward(self, a):
        self.a = a
        return -np.logaddexp(0.0, -a)

    def backward(self, g):
        return (Tensor(g.data * special.expit(-self.a)),)


class Softmax(_OnceDiff):
    def forward(self, a):
        z = a - a.max(axis=-1, keepdims=True)
        e = np.exp(z)
        self.out = e / e.sum(axis=-1, keepdims=True)
        return self.out

    def backward(self, g):
        y = self.out
        gd = g.data
        return (Tensor(y * (gd - (gd * y).sum(axis=-1, keepdims=True))),)


class LogSoftmax(_OnceDiff):
    def forward(self, a):
        z = a - a.max(axis=-1, keepdims=True)
        self.out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        return self.out

    def backward(self, g):
        gd = g.data
        return (Tensor(gd - np.exp(self.out) * gd.sum(axis=-1, keepdims=True)),)


class LayerNorm(_OnceDiff):
    def forward(self, x, gamma, beta):
        if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
            raise ShapeError("layer_norm", x.shape, gamma.shape)
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        self.rstd = 1.0 / np.sqrt(var + self.eps)
        self.xhat = xc * self.rstd
        self.gamma = gamma
        return self.xhat * gamma + beta

    def backward(self, g):
        gd = g.data
        lead = tuple(range(gd.ndim - 1))
        dgamma = (gd * self.xhat).sum(axis=lead)
        dbeta = gd.sum(axis=lead)
        dxhat = gd * self.gamma
        dx = self.rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - self.xhat * (dxhat * self.xhat).mean(axis=-1, keepdims=True)
        )
        return Tensor(dx), Tensor(dgamma), Tensor(dbeta)


class BatchNormTrain(_OnceDiff):
    """Normalise with statistics over every axis but the last."""

    def forward(self, x, gamma, beta):
        if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
            raise ShapeError("batch_norm", x.shape, gamma.shape)
        lead = tuple(range(x.ndim - 1))
        self.n = int(np.prod(x.shape[:-1]))
        if self.n < 2:
            raise ShapeError("batch_norm", x.shape, ("need >= 2 rows in training mode",))
        self.batch_mean = x.mean(axis=lead)
        xc = x - self.batch_mean
        self.batch_var = (xc * xc).mean(axis=lead)
        self.rstd = 1.0 / np.sqrt(self.batch_var + self.eps)
        self.xhat = xc * self.rstd
        self.gamma = gamma
        return self.xhat * gamma + beta

    def backward(self, g):
        gd = g.data
        lead = tuple(range(gd.ndim - 1))
        dgamma = (gd * self.xhat).sum(axis=lead)
        dbeta = gd.sum(axis=lead)
        dxhat = gd * self.gamma
        dx = self.rstd * (dxhat - dxhat.mean(axis=lead) - self.xhat * (dxhat * self.xhat).mean(axis=lead))
        return Tensor(dx), Tensor(dgamma), Tensor(dbeta)


class CrossEntropy(_OnceDiff):
    """Summed ``-log softmax(logits)[target]`` over rows of ``(N, C)`` logits."""

    def forward(self, logits):
        if logits.ndim != 2 or self.targets.shape != (logits.shape[0],):
            raise ShapeError("cross_entropy", logits.shape, self.targets.shape)
        if self.targets.size and (self.targets.min() < 0 or self.targets.max() >= logits.shape[1]):
            raise ValueError("cross_entropy: target index out of range")
        z = logits - logits.max(axis=-1, keepdims=True)
        self.logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        rows = np.arange(logits.shape[0])
        return -self.logp[rows, self.targets].sum()

    def backward(self, g):
        grad_ = np.exp(self.logp)
        grad_[np.arange(grad_.shape[0]), self.targets] -= 1.0
        return (Tensor(grad_ * g.data),)


class L2Norm(_OnceDiff):
    def forward(self, a):
        self.a = a
        self.out = np.sqrt((a * a).sum(axis=self.axis))
        return self.out

    def backward(self, g):
        axis = self.axis
        if axis is None:
            axis = tuple(range(self.a.ndim))
        elif isinstance(axis, int):
            axis = (axis,)
        out = np.expand_dims(self.out, axis)
        gd = np.expand_dims(g.data, axis)
        safe = np.where(out > 0, out, 1.0)
        return (Tensor(np.where(out > 0, gd * self.a / safe, 0.0)),)


class L2Normalize(_OnceDiff):
    """``x / (||x|| + eps)`` along the last axis."""

    def forward(self, a):
        self.a = a
        self.norm = np.sqrt((a * a).sum(axis=-1, keepdims=True))
        self.den = self.norm + self.eps
        return a / self.den

    def backward(self, g):
        gd = g.data
        safe = np.where(self.norm > 0, self.norm, 1.0)
        proj = (gd * self.a).sum(axis=-1, keepdims=True)
        dx = gd / self.den - self.a * proj / (self.den ** 2 * safe)
        return (Tensor(dx),)


class MaskReplace(_OnceDiff):
    """Rows of ``x`` (``(B, T, D)``) where ``mask`` is set become ``emb``."""

    def forward(self, x, emb):
        if x.ndim != 3 or self.mask.shape != x.shape[:2] or emb.shape != x.shape[-1:]:
            raise ShapeError("mask_replace", x.shape, emb.shape)
        out = x.copy()
        out[self.mask] = emb
        return out

    def backward(self, g):
        gd = g.data
        dx = gd.copy()
        dx[self.mask] = 0.0
        return Tensor(dx), Tensor(gd[self.mask].sum(axis=0))


def relu(a):
    return Relu.apply(a)


def leaky_relu(a, slope=0.2):
    return LeakyRelu.apply(a, slope=float(slope))


def gelu(a):
    return Gelu.apply(a)


def sigmoid(a):
    return Sigmoid.apply(a)


def log_sigmoid(a):
    return LogSigmoid.apply(a)


def softmax(a):
    return Softmax.apply(a)


def log_softmax(a):
    return LogSoftmax.apply(a)


def layer_norm(x, gamma, beta, eps=1e-5):
    return LayerNorm.apply(x, gamma, beta, eps=eps)


def cross_entropy(logits, targets, reduction="sum"):
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    out = CrossEntropy.apply(logits, targets=targets)
    if reduction == "mean":
        return mul(out, 1.0 / max(len(targets), 1))
    return out


def l2_norm(a, axis=None):
    return L2Norm.apply(a, axis=axis)


def l2_normalize(a, eps=1e-12):
    return L2Normalize.apply(a, eps=eps)


def embedding(table, idx):
    return getitem(table, np.asarray(idx, dtype=np.int64))


def mask_replace(x, mask, emb):
    return MaskReplace.apply(x, emb, mask=np.asarray(mask, dtype=bool))


def dropout(x, p, rng, training=True):
    """Inverted dropout; ``rng`` is a numpy Generator owned by the caller."""
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, keep)


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.9, eps=1e-5):
    """Batch norm over all leading axes.

    Training mode normalises with batch statistics and updates the running
    buffers in place (``running = momentum * running + (1 - momentum) * batch``);
    eval mode uses the running buffers.
    """
    if training:
        y = BatchNormTrain.apply(x, gamma, beta, eps=eps)
        fn = y._node if y._node is not None else None
        if fn is None:
            # no graph was recorded; recompute the statistics for the buffers
            lead = tuple(range(x.ndim - 1))
            bm = x.data.mean(axis=lead)
            bv = x.data.var(axis=lead)
        else:
            bm, bv = fn.batch_mean, fn.batch_var
        running_mean *= momentum
        running_mean += (1.0 - momentum) * bm
        running_var *= momentum
        running_var += (1.0 - momentum) * bv
        return y
    scale = gamma * Tensor(1.0 / np.sqrt(running_var + eps))
    return add(mul(add(x, Tensor(-running_mean)), scale), beta)


# --------------------------------------------------------------- verification


def finite_diff_check(f, x, eps=1e-5):
    """Max over elements of ``|analytic - numeric| / max(1, |numeric|)``.

    ``f`` maps a Tensor to a scalar Tensor; the numeric gradient uses central
    differences with step ``eps``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x0 = np.array(as_tensor(x).data, dtype=DTYPE)
    leaf = Tensor(x0.copy(), requires_grad=True)
    out = f(leaf)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("f returned a non-finite value")
    if out.requires_grad:
        (analytic,) = grad(out, [leaf])
        analytic = analytic.data
    else:
        analytic = np.zeros_like(x0)
    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    # the graph stays live here: f may itself call grad(create_graph=True)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xp[i] += eps
        fp = f(Tensor(xp.reshape(x0.shape))).data
        xp[i] -= 2 * eps
        fm = f(Tensor(xp.reshape(x0.shape))).data
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise FloatingPointError("f returned a non-finite value")
        flat[i] = (float(fp.sum()) - float(fm.sum())) / (2 * eps)
    if not np.all(np.isfinite(analytic)):
        raise FloatingPointError("analytic gradient is non-finite")
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0
