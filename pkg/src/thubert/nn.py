"""Parameter containers, layers, optimizer and learning-rate schedules."""
from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)


class Module:
    """Walks its attributes for parameters, buffers and sub-modules.

    Attribute insertion order fixes the parameter order, which the checkpoint
    format and the optimizer both rely on.
    """

    training = True

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name in getattr(self, "_buffer_names", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def register_buffer(self, name, value):
        if "_buffer_names" not in vars(self):
            self._buffer_names = []
        self._buffer_names.append(name)
        setattr(self, name, np.array(value, dtype=np.float64))

    def state_dict(self):
        out = OrderedDict()
        for name, p in self.named_parameters():
            out[name] = p.data.copy()
        for name, b in self.named_buffers():
            out[name] = b.copy()
        return out

    def load_state_dict(self, state, strict=True):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        if strict:
            missing = expected - set(state)
            extra = set(state) - expected
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, value in state.items():
            if name in params:
                target = params[name]
                if target.data.shape != np.shape(value):
                    raise T.ShapeError(f"load {name}", target.data.shape, np.shape(value))
                target.data = np.array(value, dtype=np.float64)
            elif name in buffers:
                buf = buffers[name]
                if buf.shape != np.shape(value):
                    raise T.ShapeError(f"load {name}", buf.shape, np.shape(value))
                buf[...] = value

    def train(self, mode=True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kw):
        return self.forward(*args, **kw)


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        self.weight = Parameter(_uniform(rng, d_in, (d_in, d_out)))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x):
        y = T.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class Conv1d(Module):
    """Channels-last conv; ``padding="same"`` keeps T for stride 1."""

    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding="valid", bias=True):
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(_uniform(rng, c_in * kernel, (kernel, c_in, c_out)))
        self.bias = Parameter(np.zeros(c_out)) if bias else None

    def pad_amounts(self):
        if self.padding == "same":
            left = (self.kernel - 1) // 2
            return left, self.kernel - 1 - left
        return 0, 0

    def forward(self, x):
        return T.conv1d(x, self.weight, self.bias, stride=self.stride, padding=self.pad_amounts())


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.eps = eps
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))

    def forward(self, x):
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class BatchNorm(Module):
    """Normalises the last axis using statistics over all leading axes."""

    def __init__(self, dim, momentum=0.9, eps=1e-5):
        self.momentum = momentum
        self.eps = eps
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.register_buffer("running_mean", np.zeros(dim))
        self.register_buffer("running_var", np.ones(dim))

    def forward(self, x):
        return T.batch_norm(
            x, self.weight, self.bias, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )


class Embedding(Module):
    def __init__(self, n, dim, rng, scale=1.0):
        self.weight = Parameter(rng.normal(0.0, scale, size=(n, dim)))

    def forward(self, idx):
        return T.embedding(self.weight, idx)


class DropoutStream:
    """Reproducible dropout masks: call ``i`` draws from SeedSequence([seed, i])."""

    def __init__(self, seed):
        self.seed = int(seed)
        self.calls = 0

    def next_rng(self):
        rng = np.random.default_rng([self.seed, self.calls])
        self.calls += 1
        return rng


class Adam:
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.data = p.data * (1.0 - lr * self.weight_decay)
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params, max_norm):
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def warmup_linear_lr(step, total, peak, warmup_frac):
    """Linear ramp to ``peak`` over ``warmup_frac`` of training, then linear decay to 0."""
    warm = warmup_frac * total
    if total <= 0:
        return 0.0
    if step < warm:
        return peak * step / warm
    return peak * max(0.0, (total - step) / max(total - warm, 1e-12))


def tri_stage_lr(step, total, peak, warmup=0.1, hold=0.4):
    """Warm up linearly, hold at ``peak``, then decay linearly to 0 at ``total``."""
    if total <= 0:
        return 0.0
    w_end = warmup * total
    h_end = (warmup + hold) * total
    if step < w_end:
        return peak * step / w_end
    if step <= h_end:
        return peak
    return peak * max(0.0, (total - step) / (total - h_end))
