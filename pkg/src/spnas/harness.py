"""Check routines that pit the fast code paths against the oracles."""
from __future__ import annotations

import numpy as np

from . import oracle
from .search import nas_loss
from .search_space import build_supernet, set_decisions
from .superkernel import RING_MASK, all_decisions


def perturb_to_generic_point(net, rng):
    """Move a fresh supernet off its measure-zero init.

    Zero biases leave ReLU inputs exactly at 0 (dead channels, padded borders),
    and thresholds at 0 leave the sigmoid surrogate saturated. Random biases,
    jittered scales and thresholds placed near their group norms fix both.
    """
    for name, p in net.parameters().items():
        if name.endswith("bias") or name == "head.b":
            p.data = rng.normal(0.0, 0.1, p.shape)
        elif name.endswith("scale"):
            p.data = p.data * rng.uniform(0.5, 1.5, p.shape)
    for layer in net.layers:
        w = layer.dw_super.data
        shell = float(np.sum((w * RING_MASK) ** 2))
        half = layer.channels // 2
        layer.set_thresholds(
            k5=shell + rng.normal(0.0, layer.temperature),
            e3=float(np.sum(w[..., :half] ** 2)) + rng.normal(0.0, layer.temperature),
            e6=float(np.sum(w[..., half:] ** 2)) + rng.normal(0.0, layer.temperature),
        )


def gradcheck_nas_loss(arch, lut, seed, lam=0.5, batch=2, h=1e-5, tolerance=1e-4, max_coords=None):
    """Analytic vs central-difference gradients of the relaxed search loss."""
    rng = np.random.default_rng(seed)
    from dataclasses import replace

    net = build_supernet(replace(arch, seed=seed))
    perturb_to_generic_point(net, rng)
    x = rng.normal(size=(batch, arch.input_size, arch.input_size, arch.input_channels))
    y = rng.integers(arch.num_classes, size=batch)
    params = net.parameters()
    for p in params.values():
        p.grad = None
    nas_loss(x, y, net, lut, lam, relaxed=True).loss.backward()
    return oracle.gradcheck(lambda: nas_loss(x, y, net, lut, lam, relaxed=True).loss.item(), params,
                            h=h, tolerance=tolerance, max_coords=max_coords, seed=seed)


def subset_equivalence(arch, seed, n_inputs=20, layer_index=-1):
    """Max |supernet - sliced reference| over every op of one layer (others at 5x5e6)."""
    from . import tensor as T

    rng = np.random.default_rng(seed)
    net = build_supernet(arch)
    perturb_to_generic_point(net, rng)
    layer_index = layer_index % len(net.layers)
    full = all_decisions(False)[-1]
    worst = {}
    for op in all_decisions(net.layers[layer_index].skip_allowed):
        arch_ops = [full] * len(net.layers)
        arch_ops[layer_index] = op
        set_decisions(net, arch_ops)
        ref = oracle.build_sliced_reference(arch_ops, net)
        diff = 0.0
        for _ in range(n_inputs):
            x = rng.normal(size=(1, arch.input_size, arch.input_size, arch.input_channels))
            logits, _ = net.forward(T.Tensor(x))
            diff = max(diff, float(np.max(np.abs(logits.data - ref(x)))))
        worst[op.name] = diff
    return worst
