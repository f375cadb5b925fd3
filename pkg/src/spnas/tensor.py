"""Minimal reverse-mode autodiff over numpy arrays.

Activations are NHWC, depthwise kernels are (k, k, C), pointwise kernels are
(Cin, Cout). Every op builds a node holding its parents and a closure that maps
the output gradient to one gradient per parent.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="", name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self.name = name

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op or 'leaf'})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

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

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn, op):
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn, op=op)


def _unbroadcast(grad, shape):
    # sum out axes that numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _apply(fn, a, b, op):
    try:
        return fn(a.data, b.data)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise

def add(x, y):
    x, y = as_tensor(x), as_tensor(y)

    def bw(g):
        return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)

    return _node(_apply(np.add, x, y, "add"), (x, y), bw, "add")


def sub(x, y):
    x, y = as_tensor(x), as_tensor(y)

    def bw(g):
        return _unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)

    return _node(_apply(np.subtract, x, y, "sub"), (x, y), bw, "sub")


def mul(x, y):
    x, y = as_tensor(x), as_tensor(y)

    def bw(g):
        return _unbroadcast(g * y.data, x.shape), _unbroadcast(g * x.data, y.shape)

    return _node(_apply(np.multiply, x, y, "mul"), (x, y), bw, "mul")


def scale(x, s):
    """Multiply ``x`` by a scalar tensor ``s``."""
    x, s = as_tensor(x), as_tensor(s)
    if s.size != 1:
        raise ValueError(f"scale: expected a scalar factor, got shape {s.shape}")
    if s.shape != ():
        s = reshape(s, ())
    return mul(x, s)


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape

    def bw(g):
        return (g.reshape(old),)

    return _node(x.data.reshape(shape), (x,), bw, "reshape")


def getitem(x, idx):
    x = as_tensor(x)

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _node(x.data[idx], (x,), bw, "getitem")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _node(np.where(mask, x.data, 0.0), (x,), bw, "relu")


def sigmoid(x):
    x = as_tensor(x)
    # split branches so neither exp overflows
    z = x.data
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bw(g):
        return (g * s * (1.0 - s),)

    return _node(s, (x,), bw, "sigmoid")


def log(x):
    x = as_tensor(x)

    def bw(g):
        return (g / x.data,)

    return _node(np.log(x.data), (x,), bw, "log")


def total(x):
    """Sum of all entries, as a 0-d tensor."""
    x = as_tensor(x)

    def bw(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(np.sum(x.data), (x,), bw, "sum")


def stop_gradient(x):
    """Same value as ``x``; the result is a constant for backward."""
    return Tensor(as_tensor(x).data.copy(), op="stop_gradient")


# ---------------------------------------------------------------- convolutions

def _require_nhwc(x, op):
    if x.ndim != 4:
        raise ValueError(f"{op}: expected NHWC input, got shape {x.shape}")


def pointwise_conv(x, w):
    """1x1 convolution: out[n,h,w,co] = sum_ci x[n,h,w,ci] * w[ci,co]."""
    x, w = as_tensor(x), as_tensor(w)
    _require_nhwc(x, "pointwise_conv")
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ValueError(
            f"pointwise_conv: input has {x.shape[-1]} channels but kernel shape is {w.shape}")
    cin, cout = w.shape
    out = (x.data.reshape(-1, cin) @ w.data).reshape(x.shape[:3] + (cout,))

    def bw(g):
        g2 = g.reshape(-1, cout)
        gx = (g2 @ w.data.T).reshape(x.shape)
        gw = x.data.reshape(-1, cin).T @ g2
        return gx, gw

    return _node(out, (x, w), bw, "pointwise_conv")


def _same_geometry(h, k, stride):
    pad = k // 2
    out = (h + 2 * pad - k) // stride + 1
    return pad, out


def _windows(xp, ks, stride):
    """(n, ho, wo, c, ks, ks) view of every kernel-sized patch of a padded input."""
    return sliding_window_view(xp, (ks, ks), axis=(1, 2))[:, ::stride, ::stride]


def _input_grad_windows(g, ks, stride, padded_hw):
    # scatter g back onto the padded input grid: dilate by stride, pad by ks-1,
    # then every padded-input pixel is a correlation with the flipped kernel
    n, ho, wo, c = g.shape
    dil = np.zeros((n, (ho - 1) * stride + 1, (wo - 1) * stride + 1, c), dtype=g.dtype)
    dil[:, ::stride, ::stride] = g
    ph, pw = padded_hw
    extra_h = ph - (dil.shape[1] + ks - 1)
    extra_w = pw - (dil.shape[2] + ks - 1)
    gp = np.pad(dil, ((0, 0), (ks - 1, ks - 1 + extra_h), (ks - 1, ks - 1 + extra_w), (0, 0)))
    return sliding_window_view(gp, (ks, ks), axis=(1, 2))


def depthwise_conv(x, k, stride=1):
    """Per-channel 2-D correlation with zero 'same' padding.

    ``k`` has shape (kh, kw, C) with kh == kw in {3, 5}.
    """
    x, k = as_tensor(x), as_tensor(k)
    _require_nhwc(x, "depthwise_conv")
    if k.ndim != 3 or k.shape[0] != k.shape[1] or k.shape[0] not in (3, 5):
        raise ValueError(f"depthwise_conv: unsupported kernel shape {k.shape}; need 3x3 or 5x5")
    if k.shape[2] != x.shape[3]:
        raise ValueError(f"depthwise_conv: input has {x.shape[3]} channels, kernel {k.shape[2]}")
    if stride < 1:
        raise ValueError("depthwise_conv: stride must be positive")
    ks = k.shape[0]
    pad = ks // 2
    h, wd = x.shape[1:3]
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = _windows(xp, ks, stride)
    out = np.einsum("nhwcij,ijc->nhwc", win, k.data)

    def bw(g):
        gk = np.einsum("nhwcij,nhwc->ijc", win, g)
        gwin = _input_grad_windows(g, ks, stride, xp.shape[1:3])
        gxp = np.einsum("nhwcij,ijc->nhwc", gwin, k.data[::-1, ::-1])
        return gxp[:, pad:pad + h, pad:pad + wd, :], gk

    return _node(out, (x, k), bw, "depthwise_conv")


def conv2d(x, w, stride=1):
    """Dense 'same'-padded convolution, ``w`` shaped (k, k, Cin, Cout)."""
    x, w = as_tensor(x), as_tensor(w)
    _require_nhwc(x, "conv2d")
    if w.ndim != 4 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
        raise ValueError(f"conv2d: kernel must be (k, k, Cin, Cout) with odd k, got {w.shape}")
    if w.shape[2] != x.shape[3]:
        raise ValueError(f"conv2d: input has {x.shape[3]} channels, kernel expects {w.shape[2]}")
    if stride < 1:
        raise ValueError("conv2d: stride must be positive")
    ks = w.shape[0]
    pad = ks // 2
    h, wd = x.shape[1:3]
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = _windows(xp, ks, stride)
    out = np.einsum("nhwcij,ijco->nhwo", win, w.data, optimize=True)

    def bw(g):
        gw = np.einsum("nhwcij,nhwo->ijco", win, g, optimize=True)
        gwin = _input_grad_windows(g, ks, stride, xp.shape[1:3])
        gxp = np.einsum("nhwoij,ijco->nhwc", gwin, w.data[::-1, ::-1], optimize=True)
        return gxp[:, pad:pad + h, pad:pad + wd, :], gw

    return _node(out, (x, w), bw, "conv2d")


# ---------------------------------------------------------------- network glue

def global_mean_pool(x):
    x = as_tensor(x)
    _require_nhwc(x, "global_mean_pool")
    n, h, w, c = x.shape

    def bw(g):
        return (np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).copy(),)

    return _node(x.data.mean(axis=(1, 2)), (x,), bw, "global_mean_pool")


def dense(x, w, b):
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ValueError(f"dense: incompatible shapes x{x.shape} w{w.shape} b{b.shape}")

    def bw(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return _node(x.data @ w.data + b.data, (x, w, b), bw, "dense")


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError(f"softmax_cross_entropy: logits must be N x K, got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"softmax_cross_entropy: need {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {k})")
    labels = labels.astype(np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z - lse[:, None]
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _node(loss, (logits,), bw, "softmax_cross_entropy")


# ---------------------------------------------------------------- backward

def _topo_order(root):
    order, seen = [], set()
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Interior nodes get their gradient overwritten, leaves accumulate, so call
    ``zero_grad`` on parameters between steps.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._parents:
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad or pg is None:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        else:
            node.grad = g.copy() if node.grad is None else node.grad + g


# ---------------------------------------------------------------- optimizer

class SGD:
    """SGD with heavy-ball momentum: v = m*v + g; w -= lr*v.

    ``groups`` is a list of (params, lr) pairs so thresholds can use their own rate.
    """

    def __init__(self, groups, momentum=0.9, clip_norm=None):
        self.groups = [(list(params), float(lr)) for params, lr in groups]
        self.momentum = float(momentum)
        self.clip_norm = clip_norm
        self.velocity = {}

    def zero_grad(self):
        for params, _ in self.groups:
            for p in params:
                p.grad = None

    def grad_norm(self):
        return float(np.sqrt(sum(np.sum(p.grad ** 2) for ps, _ in self.groups for p in ps if p.grad is not None)))

    def step(self):
        if self.clip_norm is not None:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                for params, _ in self.groups:
                    for p in params:
                        if p.grad is not None:
                            p.grad = p.grad * (self.clip_norm / norm)
        for params, lr in self.groups:
            sgd_with_momentum_step(params, lr, self.momentum, self.velocity)


def sgd_with_momentum_step(params, lr, momentum, velocity):
    """One in-place momentum update; ``velocity`` maps id(param) -> buffer."""
    for p in params:
        if p.grad is None:
            continue
        v = velocity.get(id(p))
        v = p.grad.copy() if v is None else momentum * v + p.grad
        velocity[id(p)] = v
        p.data -= lr * v
