"""Brute-force references used to check the fast paths.

Nothing here calls into the tensor engine, the gating code or the latency
predictor: convolutions are explicit per-pixel loops, runtimes are plain table
lookups, and sliced networks copy weights by hand.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

# ------------------------------------------------------------------ loop convolutions


def loop_pointwise(x, w):
    n, h, wd, cin = x.shape
    cout = w.shape[1]
    out = np.zeros((n, h, wd, cout))
    for b in range(n):
        for i in range(h):
            for j in range(wd):
                for co in range(cout):
                    acc = 0.0
                    for ci in range(cin):
                        acc += x[b, i, j, ci] * w[ci, co]
                    out[b, i, j, co] = acc
    return out


def loop_depthwise(x, k, stride=1):
    """Per-output-pixel window gather; out-of-bounds taps are simply skipped."""
    n, h, wd, c = x.shape
    ks = k.shape[0]
    r = ks // 2
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    out = np.zeros((n, ho, wo, c))
    for b in range(n):
        for oi in range(ho):
            for oj in range(wo):
                ci, cj = oi * stride, oj * stride
                acc = np.zeros(c)
                for di in range(-r, r + 1):
                    for dj in range(-r, r + 1):
                        ii, jj = ci + di, cj + dj
                        if 0 <= ii < h and 0 <= jj < wd:
                            acc = acc + x[b, ii, jj] * k[di + r, dj + r]
                out[b, oi, oj] = acc
    return out


def loop_conv2d(x, w, stride=1):
    n, h, wd, _ = x.shape
    ks, _, _, cout = w.shape
    r = ks // 2
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    out = np.zeros((n, ho, wo, cout))
    for b in range(n):
        for oi in range(ho):
            for oj in range(wo):
                acc = np.zeros(cout)
                for di in range(-r, r + 1):
                    for dj in range(-r, r + 1):
                        ii, jj = oi * stride + di, oj * stride + dj
                        if 0 <= ii < h and 0 <= jj < wd:
                            acc = acc + x[b, ii, jj] @ w[di + r, dj + r]
                out[b, oi, oj] = acc
    return out


def _rowwise_pointwise(x, w):
    # faster than loop_pointwise, still one output pixel at a time
    n, h, wd, _ = x.shape
    out = np.zeros((n, h, wd, w.shape[1]))
    for b in range(n):
        for i in range(h):
            for j in range(wd):
                out[b, i, j] = x[b, i, j] @ w
    return out


def logsumexp_cross_entropy(logits, labels):
    total = 0.0
    for row, y in zip(np.asarray(logits, dtype=float), labels):
        m = max(row)
        lse = m + np.log(sum(np.exp(v - m) for v in row))
        total += lse - row[y]
    return total / len(labels)


# ------------------------------------------------------------------ finite differences


def finite_difference_grad(loss_fn, params, h=1e-5):
    """Central differences of ``loss_fn()`` (a float) w.r.t. every entry of ``params``.

    ``params`` are objects with a mutable ``.data`` array.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("finite_difference_grad: h must lie in [1e-7, 1e-3]")
    grads = []
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError("finite_difference_grad: parameters must be 64-bit")
        g = np.zeros_like(p.data)
        for idx in np.ndindex(p.data.shape):
            g[idx] = _central(loss_fn, p, idx, h)
        grads.append(g)
    return grads


def _central(loss_fn, p, idx, h):
    orig = p.data[idx]
    p.data[idx] = orig + h
    fp = float(loss_fn())
    p.data[idx] = orig - h
    fm = float(loss_fn())
    p.data[idx] = orig
    if not (np.isfinite(fp) and np.isfinite(fm)):
        raise ValueError("finite_difference_grad: loss is not finite")
    return (fp - fm) / (2 * h)


@dataclass
class GradCheckReport:
    max_rel_error: dict
    failing: list
    h: float
    tolerance: float
    abs_floor: float
    precision: str = "float64"
    nonsmooth: list = field(default_factory=list)
    checked: int = 0

    @property
    def passed(self):
        return not self.failing

    @property
    def worst(self):
        return max(self.max_rel_error.values(), default=0.0)

    def to_dict(self):
        return {"passed": self.passed, "worst_rel_error": self.worst, "max_rel_error": self.max_rel_error,
                "failing": self.failing, "nonsmooth": self.nonsmooth, "checked": self.checked,
                "h": self.h, "tolerance": self.tolerance, "abs_floor": self.abs_floor, "precision": self.precision}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=str)

    def __str__(self):
        lines = [f"gradcheck {'PASS' if self.passed else 'FAIL'}: {self.checked} coordinates, "
                 f"worst relative error {self.worst:.3e} (tol {self.tolerance:g}, h {self.h:g}, {self.precision})"]
        for name, err in self.max_rel_error.items():
            lines.append(f"  {name:28s} {err:.3e}")
        if self.nonsmooth:
            lines.append(f"  {len(self.nonsmooth)} coordinate(s) straddle a ReLU kink; excluded")
        for name, idx, a, n in self.failing[:20]:
            lines.append(f"  FAIL {name}{list(idx)}: analytic {a:.6e} numeric {n:.6e}")
        return "\n".join(lines)


def rel_error(a, n, abs_floor=1e-8):
    diff = abs(a - n)
    if diff <= abs_floor:
        return 0.0
    return diff / max(abs(a), abs(n))


def gradcheck(loss_fn, named_params, h=1e-5, tolerance=1e-4, abs_floor=1e-8, max_coords=None, seed=0):
    """Compare analytic ``.grad`` (already populated) with central differences.

    With ``max_coords`` a tensor larger than that is checked on a seeded random
    sample of that many coordinates; smaller tensors are checked exhaustively.

    ``loss_fn`` returns a float. Coordinates whose central differences at h and
    h/2 disagree by more than the tolerance sit on a non-differentiable point
    (a ReLU kink inside the stencil); they are reported as non-smooth rather
    than failing.
    """
    errors, failing, nonsmooth, checked = {}, [], [], 0
    rng = np.random.default_rng(seed)
    for name, p in named_params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else np.asarray(p.grad)
        worst = 0.0
        coords = list(np.ndindex(p.data.shape))
        if max_coords is not None and len(coords) > max_coords:
            coords = [coords[i] for i in sorted(rng.choice(len(coords), max_coords, replace=False))]
        for idx in coords:
            a = float(analytic[idx])
            num = _central(loss_fn, p, idx, h)
            checked += 1
            err = rel_error(a, num, abs_floor)
            if err > tolerance:
                half = _central(loss_fn, p, idx, h / 2)
                if rel_error(num, half, abs_floor) > tolerance:
                    nonsmooth.append((name, idx))
                    continue
                failing.append((name, idx, a, num))
            worst = max(worst, err)
        errors[name] = worst
    return GradCheckReport(errors, failing, h, tolerance, abs_floor, str(p.data.dtype), nonsmooth, checked)


# ------------------------------------------------------------------ enumeration

_OPS = ((False, False, False), (False, True, False), (False, True, True), (True, True, False), (True, True, True))


def enumerate_architectures(skip_mask, budget=100_000):
    """Every per-layer op assignment as (use_k5, use_e3_or_more, use_e6) tuples.

    ``skip_mask`` is a list of booleans, or an int L meaning L skippable layers.
    """
    if isinstance(skip_mask, int):
        skip_mask = [True] * skip_mask
    sizes = [5 if s else 4 for s in skip_mask]
    if int(np.prod(sizes, dtype=np.float64)) > budget:
        raise ValueError(f"enumerate_architectures: {np.prod(sizes, dtype=np.float64):.0f} architectures exceed budget")
    per_layer = [_OPS if s else _OPS[1:] for s in skip_mask]
    return list(itertools.product(*per_layer))


def brute_force_runtime(arch, lut):
    """Table-lookup runtime for ``arch`` (sequence of (k5, e3, e6) triples)."""
    if len(arch) != len(lut.layers):
        raise ValueError("brute_force_runtime: architecture and table lengths differ")
    total = lut.fixed_overhead_ms
    for (k5, e3, e6), row in zip(arch, lut.layers):
        if not e3:
            continue
        if k5:
            total += row.r5x5_e6_ms if e6 else row.r5x5_e3_ms
        else:
            total += row.r3x3_e6_ms if e6 else row.r3x3_e6_ms / row.r5x5_e6_ms * row.r5x5_e3_ms
    return total


# ------------------------------------------------------------------ sliced reference networks


class SlicedLayer:
    def __init__(self, src, k5, e3, e6):
        self.skip = not e3
        self.residual = src.skip_allowed
        self.stride = src.stride
        if self.skip:
            return
        c = src.channels if e6 else src.channels // 2
        ks = 5 if k5 else 3
        off = (5 - ks) // 2
        self.expand_w = np.array(src.expand_w.data[:, :c])
        self.expand_scale = np.array(src.expand_scale.data[:c])
        self.expand_bias = np.array(src.expand_bias.data[:c])
        self.dw = np.array(src.dw_super.data[off:off + ks, off:off + ks, :c])
        self.dw_scale = np.array(src.dw_scale.data[:c])
        self.dw_bias = np.array(src.dw_bias.data[:c])
        self.project_w = np.array(src.project_w.data[:c])

    def __call__(self, x):
        if self.skip:
            return x
        h = np.maximum(_rowwise_pointwise(x, self.expand_w) * self.expand_scale + self.expand_bias, 0.0)
        h = np.maximum(loop_depthwise(h, self.dw, self.stride) * self.dw_scale + self.dw_bias, 0.0)
        out = _rowwise_pointwise(h, self.project_w)
        return x + out if self.residual else out


class SlicedNetwork:
    def __init__(self, arch, supernet):
        if len(arch) != len(supernet.layers):
            raise ValueError("build_sliced_reference: wrong number of layer decisions")
        self.stem_w = np.array(supernet.stem_w.data)
        self.stem_scale = np.array(supernet.stem_scale.data)
        self.stem_bias = np.array(supernet.stem_bias.data)
        self.stem_stride = supernet.config.stem_stride
        self.head_w = np.array(supernet.head_w.data)
        self.head_b = np.array(supernet.head_b.data)
        self.layers = []
        for (k5, e3, e6), src in zip(arch, supernet.layers):
            if not e3 and not src.skip_allowed:
                raise ValueError(f"{src.name} cannot be skipped")
            self.layers.append(SlicedLayer(src, k5, e3, e6))

    def features(self, x):
        h = np.maximum(loop_conv2d(x, self.stem_w, self.stem_stride) * self.stem_scale + self.stem_bias, 0.0)
        for layer in self.layers:
            h = layer(h)
        return h

    def __call__(self, x):
        h = self.features(x)
        pooled = h.sum(axis=(1, 2)) / (h.shape[1] * h.shape[2])
        return pooled @ self.head_w + self.head_b


def build_sliced_reference(arch, supernet):
    """Plain numpy network made of hand-sliced copies of the supernet's weights.

    ``arch`` holds (use_k5, use_e3_or_more, use_e6) per layer; objects with
    those attributes are accepted too.
    """
    triples = [(d.use_k5, d.use_e3_or_more, d.use_e6) if hasattr(d, "use_k5") else tuple(d) for d in arch]
    return SlicedNetwork(triples, supernet)
