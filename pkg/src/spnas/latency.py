"""Differentiable runtime predictor built from a per-layer latency table.

Each searchable layer stores three profiled runtimes (ms): 5x5 with expansion 3,
5x5 with expansion 6 and 3x3 with expansion 6. The 3x3/e3 runtime is not
profiled; the predictor reaches it by scaling the 5x5/e3 entry with the 3x3/5x5
ratio measured at expansion 6.
"""
from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class LayerLatency:
    r5x5_e3_ms: float
    r5x5_e6_ms: float
    r3x3_e6_ms: float
    r3x3_e3_ms: float | None = None

    def to_dict(self):
        d = {"r5x5_e3_ms": self.r5x5_e3_ms, "r5x5_e6_ms": self.r5x5_e6_ms, "r3x3_e6_ms": self.r3x3_e6_ms}
        if self.r3x3_e3_ms is not None:
            d["r3x3_e3_ms"] = self.r3x3_e3_ms
        return d

    @property
    def kernel_ratio(self):
        return self.r3x3_e6_ms / self.r5x5_e6_ms


@dataclass(frozen=True)
class LatencyTable:
    layers: tuple[LayerLatency, ...]
    device_label: str = "synthetic"
    fixed_overhead_ms: float = 0.0
    _checked: bool = field(default=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.fixed_overhead_ms < 0:
            raise ValueError("fixed_overhead_ms must be non-negative")
        for i, row in enumerate(self.layers):
            vals = [row.r5x5_e3_ms, row.r5x5_e6_ms, row.r3x3_e6_ms]
            if row.r3x3_e3_ms is not None:
                vals.append(row.r3x3_e3_ms)
            if not all(math.isfinite(v) and v > 0 for v in vals):
                raise ValueError(f"latency table layer {i}: all runtimes must be positive, got {row}")
            if row.r5x5_e6_ms < row.r5x5_e3_ms or row.r5x5_e6_ms < row.r3x3_e6_ms:
                warnings.warn(f"latency table layer {i}: 5x5/e6 is cheaper than a smaller op ({row})")

    def __len__(self):
        return len(self.layers)

    def to_dict(self):
        return {
            "device_label": self.device_label,
            "fixed_overhead_ms": self.fixed_overhead_ms,
            "layers": [row.to_dict() for row in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        try:
            rows = [LayerLatency(**row) for row in d["layers"]]
            return cls(rows, d.get("device_label", "unknown"), float(d.get("fixed_overhead_ms", 0.0)))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed latency table: {exc}") from None

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def save_lut(lut, path):
    Path(path).write_text(lut.to_json())


def load_lut(path, num_layers=None):
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not valid JSON ({exc})") from None
    lut = LatencyTable.from_dict(data)
    if num_layers is not None and len(lut) != num_layers:
        raise ValueError(f"{path}: latency table has {len(lut)} layers, architecture has {num_layers}")
    return lut


def _blend(e3, e6, r_e3, r_e6):
    # e3 * (r_e3 + e6 * (r_e6 - r_e3)), arranged so hard 0/1 gates return table entries bit-exactly
    return T.mul(e3, T.add(T.mul(T.sub(1.0, e6), r_e3), T.mul(e6, r_e6)))


def layer_runtime_e(e3, e6, row):
    """Runtime of the 5x5 op as gated by the expansion indicators."""
    return _blend(e3, e6, row.r5x5_e3_ms, row.r5x5_e6_ms)


def layer_runtime(e3, e6, k5, row):
    """Per-layer runtime with the kernel-size indicator folded in.

    Equal to ratio * R_e + R_e * (1 - ratio) * k5 with ratio = R_3x3_6 / R_5x5_6;
    the 3x3 row is ratio * R_e, written out so the profiled 3x3/e6 entry is
    used directly.
    """
    r5 = layer_runtime_e(e3, e6, row)
    r3 = _blend(e3, e6, row.kernel_ratio * row.r5x5_e3_ms, row.r3x3_e6_ms)
    return T.add(T.mul(T.sub(1.0, k5), r3), T.mul(k5, r5))


def total_runtime(layer_gates, lut):
    """Sum of per-layer predicted runtimes plus the fixed stem/head overhead.

    ``layer_gates`` is a sequence of (k5, e3, e6) indicator tensors, one per
    searchable layer, in network order.
    """
    layer_gates = list(layer_gates)
    if len(layer_gates) != len(lut):
        raise ValueError(f"total_runtime: {len(layer_gates)} layers but latency table has {len(lut)}")
    out = Tensor(lut.fixed_overhead_ms)
    for (k5, e3, e6), row in zip(layer_gates, lut.layers):
        out = T.add(out, layer_runtime(e3, e6, k5, row))
    return out


def predict_ms(decisions, lut):
    """Predicted runtime of a hard architecture (sequence of DecisionTriple)."""
    gates = [(Tensor(float(d.use_k5)), Tensor(float(d.use_e3_or_more)), Tensor(float(d.use_e6))) for d in decisions]
    return total_runtime(gates, lut).item()


def device_ms(decision, row):
    """Runtime a device would show for one layer: the profiled entry when known."""
    if decision.skip:
        return 0.0
    if decision.use_k5:
        return row.r5x5_e6_ms if decision.use_e6 else row.r5x5_e3_ms
    if decision.use_e6:
        return row.r3x3_e6_ms
    if row.r3x3_e3_ms is not None:
        return row.r3x3_e3_ms
    return row.kernel_ratio * row.r5x5_e3_ms


@dataclass
class ValidationReport:
    rmse_ms: float
    mean_rel_error: float
    n_samples: int
    noise_sigma_ms: float

    def to_dict(self):
        return {"rmse_ms": self.rmse_ms, "mean_rel_error": self.mean_rel_error,
                "n_samples": self.n_samples, "noise_sigma_ms": self.noise_sigma_ms}

    def __str__(self):
        return (f"RMSE {self.rmse_ms:.4f} ms, mean relative error {100 * self.mean_rel_error:.3f}% "
                f"over {self.n_samples} random architectures (noise sigma {self.noise_sigma_ms} ms)")


def validate_runtime_model(lut, n_samples=100, noise_sigma=0.5, rng_seed=0, skip_mask=None):
    """Compare predictions against synthetic measurements of random architectures.

    A measurement is the device-side table sum (using the profiled 3x3/e3 entry
    when the table has one) plus N(0, noise_sigma) noise.
    """
    from .superkernel import all_decisions

    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    skip_mask = [True] * len(lut) if skip_mask is None else list(skip_mask)
    if len(skip_mask) != len(lut):
        raise ValueError("skip_mask length differs from the latency table")
    rng = np.random.default_rng(rng_seed)
    choices = [all_decisions(s) for s in skip_mask]
    pred, meas = np.empty(n_samples), np.empty(n_samples)
    for s in range(n_samples):
        arch = [opts[rng.integers(len(opts))] for opts in choices]
        pred[s] = predict_ms(arch, lut)
        true = lut.fixed_overhead_ms + sum(device_ms(d, row) for d, row in zip(arch, lut.layers))
        meas[s] = true + rng.normal(0.0, noise_sigma)
    err = pred - meas
    rmse = float(np.sqrt(np.mean(err ** 2)))
    rel = float(np.mean(np.abs(err) / np.abs(meas)))
    return ValidationReport(rmse, rel, n_samples, noise_sigma)


def synth_lut(layer_specs, seed=0, base_ms_per_mmac=40.0, fixed_overhead_ms=1.0, with_r3x3_e3=True,
              device_label="synthetic"):
    """Plausible table for a macro-architecture.

    ``layer_specs`` lists (cin, cout, stride, input_hw) per searchable layer. The
    5x5/e6 runtime is proportional to that op's multiply-accumulates with
    multiplicative jitter; the other entries are drawn as fractions of it so
    the ordering invariants always hold.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for cin, cout, stride, hw in layer_specs:
        c = 6 * cin
        out_hw = -(-hw // stride)
        macs = hw * hw * cin * c + out_hw * out_hw * c * 25 + out_hw * out_hw * c * cout
        r56 = base_ms_per_mmac * macs / 1e6 * rng.uniform(0.8, 1.25)
        r53 = r56 * rng.uniform(0.45, 0.65)
        r36 = r56 * rng.uniform(0.6, 0.85)
        row = dict(r5x5_e3_ms=round(r53, 6), r5x5_e6_ms=round(r56, 6), r3x3_e6_ms=round(r36, 6))
        if with_r3x3_e3:
            row["r3x3_e3_ms"] = round(r36 / r56 * r53 * rng.uniform(0.95, 1.05), 6)
        rows.append(LayerLatency(**row))
    return LatencyTable(rows, device_label, fixed_overhead_ms)
