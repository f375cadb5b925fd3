"""Searchable MBConv layer whose candidate ops are weight subsets of one kernel.

A layer owns a 5x5 depthwise kernel over 6*Cin expanded channels. The 3x3
candidate is its inner core; the expansion-3 candidate is the first half of the
channels; skipping is all channels off. Three thresholds decide, per layer, how
much of the kernel survives. Indicators are hard 0/1 in the forward pass and
take the sigmoid's gradient in the backward pass.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

MAX_KERNEL = 5
MAX_EXPANSION = 6

CORE_MASK = np.zeros((MAX_KERNEL, MAX_KERNEL, 1))
CORE_MASK[1:4, 1:4] = 1.0
RING_MASK = 1.0 - CORE_MASK

OP_NAMES = ("skip", "3x3e3", "3x3e6", "5x5e3", "5x5e6")


@dataclass(frozen=True)
class DecisionTriple:
    use_k5: bool
    use_e3_or_more: bool
    use_e6: bool

    def __post_init__(self):
        if self.use_e6 and not self.use_e3_or_more:
            raise ValueError("use_e6 requires use_e3_or_more")

    @property
    def skip(self):
        return not self.use_e3_or_more

    @property
    def kernel(self):
        return None if self.skip else (5 if self.use_k5 else 3)

    @property
    def expansion(self):
        return None if self.skip else (6 if self.use_e6 else 3)

    @property
    def name(self):
        if self.skip:
            return "skip"
        return f"{self.kernel}x{self.kernel}e{self.expansion}"

    @property
    def short(self):
        """Compact label used in metrics files ('s' for skip)."""
        return "s" if self.skip else self.name

    @classmethod
    def from_op(cls, kernel=None, expansion=None, skip=False):
        if skip:
            return cls(False, False, False)
        if kernel not in (3, 5) or expansion not in (3, 6):
            raise ValueError(f"unsupported op kernel={kernel} expansion={expansion}")
        return cls(kernel == 5, True, expansion == 6)

    @classmethod
    def from_name(cls, name):
        if name in ("s", "skip"):
            return cls.from_op(skip=True)
        k, e = name.split("x")[0], name.split("e")[-1]
        return cls.from_op(int(k), int(e))


def all_decisions(skip_allowed=True):
    ops = [DecisionTriple.from_name(n) for n in OP_NAMES]
    return ops if skip_allowed else ops[1:]


class SuperkernelLayer:
    """One searchable MBConv layer.

    Pipeline: expand 1x1 -> per-channel affine -> ReLU -> masked depthwise
    -> per-channel affine (bias gated with the channels) -> ReLU -> project 1x1,
    plus the residual when the layer may be skipped.
    """

    def __init__(self, cin, cout, stride=1, skip_allowed=False, temperature=1.0, rng=None, name="layer"):
        if skip_allowed and (stride != 1 or cin != cout):
            raise ValueError("skip is only possible for stride-1 layers with cin == cout")
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        rng = np.random.default_rng(rng)
        self.cin, self.cout, self.stride = cin, cout, stride
        self.skip_allowed = skip_allowed
        self.temperature = float(temperature)
        self.name = name
        c = MAX_EXPANSION * cin
        self.channels = c
        # dw init keeps every group norm O(1) so the sigmoid surrogate is not saturated
        dw_std = 1.0 / np.sqrt(16 * c)
        self.expand_w = Tensor(rng.normal(0, np.sqrt(2.0 / cin), (cin, c)), True, name=f"{name}.expand_w")
        self.expand_scale = Tensor(np.ones(c), True, name=f"{name}.expand_scale")
        self.expand_bias = Tensor(np.zeros(c), True, name=f"{name}.expand_bias")
        self.dw_super = Tensor(rng.normal(0, dw_std, (MAX_KERNEL, MAX_KERNEL, c)), True, name=f"{name}.dw_super")
        self.dw_scale = Tensor(np.full(c, 1.0 / (5 * dw_std)), True, name=f"{name}.dw_scale")
        self.dw_bias = Tensor(np.zeros(c), True, name=f"{name}.dw_bias")
        self.project_w = Tensor(rng.normal(0, np.sqrt(1.0 / c), (c, cout)), True, name=f"{name}.project_w")
        self.t_k5 = Tensor(0.0, True, name=f"{name}.t_k5")
        self.t_e3 = Tensor(0.0, True, name=f"{name}.t_e3")
        self.t_e6 = Tensor(0.0, True, name=f"{name}.t_e6")
        half = np.zeros(c)
        half[: c // 2] = 1.0
        self.low_mask = half
        self.high_mask = 1.0 - half

    def weights(self):
        return {
            "expand_w": self.expand_w, "expand_scale": self.expand_scale, "expand_bias": self.expand_bias,
            "dw_super": self.dw_super, "dw_scale": self.dw_scale, "dw_bias": self.dw_bias,
            "project_w": self.project_w,
        }

    def thresholds(self):
        return {"t_k5": self.t_k5, "t_e3": self.t_e3, "t_e6": self.t_e6}

    def parameters(self):
        return {**self.weights(), **self.thresholds()}

    def set_thresholds(self, k5=None, e3=None, e6=None):
        for t, v in ((self.t_k5, k5), (self.t_e3, e3), (self.t_e6, e6)):
            if v is not None:
                t.data = np.asarray(float(v))


def group_lasso_sq(w_subset):
    """Squared L2 norm of a weight group."""
    w_subset = T.as_tensor(w_subset)
    if w_subset.size == 0:
        raise ValueError("group_lasso_sq: empty weight group")
    return T.total(T.mul(w_subset, w_subset))


def indicator_ste(x, t, temperature=1.0, relaxed=False):
    """1(x > t) forward, d sigmoid((x - t) / temperature) backward.

    Ties (x == t) give 0. With ``relaxed`` the sigmoid is used in the forward
    pass too, which makes the whole network smooth for gradient checking.
    """
    if temperature <= 0:
        raise ValueError("indicator_ste: temperature must be positive")
    soft = T.sigmoid(T.mul(T.sub(x, t), 1.0 / temperature))
    if relaxed:
        return soft
    hard = Tensor((T.as_tensor(x).data > T.as_tensor(t).data).astype(soft.data.dtype))
    return T.add(hard, T.sub(soft, T.stop_gradient(soft)))


@dataclass
class Gates:
    kernel: Tensor          # w_k after the kernel-size decision
    weight: Tensor          # w after both expansion decisions
    channel_gate: Tensor    # per-channel multiplier, (C,)
    k5: Tensor
    e3: Tensor
    e6: Tensor


def _kernel_gate(layer, relaxed):
    w = layer.dw_super
    core = T.mul(w, CORE_MASK)
    shell = T.mul(w, RING_MASK)
    k5 = indicator_ste(group_lasso_sq(shell), layer.t_k5, layer.temperature, relaxed)
    return T.add(core, T.mul(shell, k5)), k5


def _channel_gate(w_k, layer, relaxed):
    if w_k.shape[-1] % 2:
        raise ValueError("effective_channels: channel count must be even")
    e6 = indicator_ste(group_lasso_sq(T.mul(w_k, layer.high_mask)), layer.t_e6, layer.temperature, relaxed)
    if layer.skip_allowed:
        e3 = indicator_ste(group_lasso_sq(T.mul(w_k, layer.low_mask)), layer.t_e3, layer.temperature, relaxed)
    else:
        e3 = Tensor(1.0)
    gate = T.mul(T.add(layer.low_mask, T.mul(layer.high_mask, e6)), e3)
    return gate, e3, e6


def gates(layer, relaxed=False):
    w_k, k5 = _kernel_gate(layer, relaxed)
    gate, e3, e6 = _channel_gate(w_k, layer, relaxed)
    return Gates(w_k, T.mul(w_k, gate), gate, k5, e3, e6)


def effective_kernel(layer, relaxed=False):
    """Inner 3x3 core plus the gated outer ring of the 5x5 superkernel."""
    return _kernel_gate(layer, relaxed)[0]


def effective_channels(w_k, layer, relaxed=False):
    """Gate the two channel halves of ``w_k``: e3 * (low + e6 * high)."""
    gate, _, _ = _channel_gate(T.as_tensor(w_k), layer, relaxed)
    return T.mul(w_k, gate)


def mbconv_forward(x, layer, relaxed=False):
    """Returns (output, gates) for one searchable layer."""
    x = T.as_tensor(x)
    if x.ndim != 4 or x.shape[-1] != layer.cin:
        raise ValueError(f"{layer.name}: expected NHWC input with {layer.cin} channels, got {x.shape}")
    g = gates(layer, relaxed)
    h = T.pointwise_conv(x, layer.expand_w)
    h = T.relu(T.add(T.mul(h, layer.expand_scale), layer.expand_bias))
    h = T.depthwise_conv(h, g.weight, layer.stride)
    h = T.add(T.mul(h, layer.dw_scale), T.mul(layer.dw_bias, g.channel_gate))
    h = T.relu(h)
    out = T.pointwise_conv(h, layer.project_w)
    if layer.skip_allowed:
        out = T.add(x, out)
    return out, g


def decide(layer):
    """Hard evaluation of the three gate conditions (strict '>')."""
    w = layer.dw_super.data
    shell_norm = float(np.sum((w * RING_MASK) ** 2))
    use_k5 = shell_norm > float(layer.t_k5.data)
    w_k = w if use_k5 else w * CORE_MASK
    half = layer.channels // 2
    use_e3 = float(np.sum(w_k[..., :half] ** 2)) > float(layer.t_e3.data)
    use_e6 = float(np.sum(w_k[..., half:] ** 2)) > float(layer.t_e6.data)
    if not layer.skip_allowed:
        use_e3 = True
    if not use_e3:
        return DecisionTriple.from_op(skip=True)
    return DecisionTriple(use_k5, True, use_e6)
