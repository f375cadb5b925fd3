"""MobileNetV2-style macro-architecture of superkernel layers.

Network: 3x3 conv stem (+ per-channel affine, ReLU) -> blocks of searchable
MBConv layers -> global mean pool -> dense classifier. Within a block only the
first layer may change stride or width; the rest keep shape and may be skipped.
"""
from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .superkernel import DecisionTriple, SuperkernelLayer, decide, mbconv_forward
from .tensor import Tensor

SCHEMA_VERSION = 1


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def digest(obj):
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


@dataclass(frozen=True)
class BlockConfig:
    num_layers: int
    out_channels: int
    stride: int = 1


@dataclass(frozen=True)
class MacroArchConfig:
    input_size: int = 8
    input_channels: int = 2
    stem_channels: int = 4
    blocks: tuple = (BlockConfig(2, 4, 1),)
    num_classes: int = 2
    seed: int = 0
    stem_stride: int = 1

    def __post_init__(self):
        blocks = tuple(b if isinstance(b, BlockConfig) else BlockConfig(**b) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        if self.input_size < 1 or self.input_channels < 1 or self.stem_channels < 1:
            raise ValueError("input size and channel counts must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        for b in blocks:
            if b.num_layers < 1 or b.out_channels < 1 or b.stride not in (1, 2):
                raise ValueError(f"invalid block {b}")

    def to_dict(self):
        d = asdict(self)
        d["blocks"] = [asdict(b) for b in self.blocks]
        return d

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(**{**d, "blocks": tuple(BlockConfig(**b) for b in d["blocks"])})
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed architecture config: {exc}") from None

    def digest(self):
        return digest(self.to_dict())

    def layer_specs(self):
        """(cin, cout, stride, input_hw, skip_allowed) for every searchable layer."""
        specs = []
        c = self.stem_channels
        hw = -(-self.input_size // self.stem_stride)
        for b in self.blocks:
            for i in range(b.num_layers):
                stride = b.stride if i == 0 else 1
                specs.append((c, b.out_channels, stride, hw, i > 0))
                c = b.out_channels
                hw = -(-hw // stride)
        return specs

    @property
    def num_layers(self):
        return sum(b.num_layers for b in self.blocks)

    @property
    def skip_mask(self):
        return [s[4] for s in self.layer_specs()]


class Supernet:
    def __init__(self, config):
        self.config = config
        rng = np.random.default_rng(config.seed)
        cin, c = config.input_channels, config.stem_channels
        self.stem_w = Tensor(rng.normal(0, np.sqrt(2.0 / (9 * cin)), (3, 3, cin, c)), True, name="stem.w")
        self.stem_scale = Tensor(np.ones(c), True, name="stem.scale")
        self.stem_bias = Tensor(np.zeros(c), True, name="stem.bias")
        self.layers = []
        for i, (lin, lout, stride, _, skip) in enumerate(config.layer_specs()):
            self.layers.append(SuperkernelLayer(lin, lout, stride, skip, rng=rng, name=f"layer{i}"))
        last = self.layers[-1].cout if self.layers else c
        self.head_w = Tensor(rng.normal(0, np.sqrt(1.0 / last), (last, config.num_classes)), True, name="head.w")
        self.head_b = Tensor(np.zeros(config.num_classes), True, name="head.b")

    def stem_head(self):
        return {"stem.w": self.stem_w, "stem.scale": self.stem_scale, "stem.bias": self.stem_bias,
                "head.w": self.head_w, "head.b": self.head_b}

    def parameters(self):
        params = dict(self.stem_head())
        for layer in self.layers:
            for k, v in layer.parameters().items():
                params[f"{layer.name}.{k}"] = v
        return params

    def weight_params(self):
        return [p for k, p in self.parameters().items() if ".t_" not in k]

    def threshold_params(self):
        return [p for k, p in self.parameters().items() if ".t_" in k]

    def stem(self, x):
        h = T.conv2d(x, self.stem_w, self.config.stem_stride)
        return T.relu(T.add(T.mul(h, self.stem_scale), self.stem_bias))

    def head(self, h):
        return T.dense(T.global_mean_pool(h), self.head_w, self.head_b)

    def forward(self, x, relaxed=False):
        """Returns (logits, per-layer Gates)."""
        h = self.stem(x)
        all_gates = []
        for layer in self.layers:
            h, g = mbconv_forward(h, layer, relaxed)
            all_gates.append(g)
        return self.head(h), all_gates

    def decisions(self):
        return [decide(layer) for layer in self.layers]


def build_supernet(config):
    return Supernet(config)


def count_params(params):
    return int(sum(p.size for p in params))


def supernet_param_count(config):
    """Closed-form trainable-parameter count of the supernet."""
    total = 9 * config.input_channels * config.stem_channels + 2 * config.stem_channels
    last = config.stem_channels
    for cin, cout, *_ in config.layer_specs():
        c = 6 * cin
        total += cin * c + 2 * c + 25 * c + 2 * c + c * cout + 3
        last = cout
    return total + last * config.num_classes + config.num_classes


def fixed_param_count(config, ops):
    """Closed-form parameter count of a plain network with the given per-layer ops."""
    total = 9 * config.input_channels * config.stem_channels + 2 * config.stem_channels
    last = config.stem_channels
    for (cin, cout, *_), d in zip(config.layer_specs(), ops):
        if not d.skip:
            c = d.expansion * cin
            total += cin * c + 2 * c + d.kernel ** 2 * c + 2 * c + c * cout
        last = cout
    return total + last * config.num_classes + config.num_classes


# ------------------------------------------------------------------ derivation

@dataclass
class DerivedArchitecture:
    config: MacroArchConfig
    decisions: list
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.decisions = list(self.decisions)
        if len(self.decisions) != self.config.num_layers:
            raise ValueError(
                f"derived architecture has {len(self.decisions)} layers, config has {self.config.num_layers}")
        for i, (d, allowed) in enumerate(zip(self.decisions, self.config.skip_mask)):
            if d.skip and not allowed:
                raise ValueError(f"layer {i} is skipped but cannot be skipped")

    def layer_entries(self):
        return [{"skip": True} if d.skip else {"k": d.kernel, "e": d.expansion} for d in self.decisions]

    def to_dict(self):
        return {"version": SCHEMA_VERSION, "config": self.config.to_dict(),
                "layers": self.layer_entries(), "provenance": self.provenance}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict) or d.get("version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported architecture schema version: {d.get('version') if isinstance(d, dict) else d!r}")
        try:
            config = MacroArchConfig.from_dict(d["config"])
            decisions = []
            for entry in d["layers"]:
                if entry.get("skip"):
                    decisions.append(DecisionTriple.from_op(skip=True))
                else:
                    decisions.append(DecisionTriple.from_op(entry["k"], entry["e"]))
        except (KeyError, TypeError, AttributeError) as exc:
            raise ValueError(f"malformed architecture file: {exc}") from None
        return cls(config, decisions, d.get("provenance", {}))

    def summary(self):
        return ",".join(d.short for d in self.decisions)


def derive_architecture(supernet, **provenance):
    """Read the hard decisions off a (searched) supernet."""
    prov = {"config_hash": supernet.config.digest(), **provenance}
    return DerivedArchitecture(supernet.config, supernet.decisions(), prov)


def save_architecture(derived, path):
    Path(path).write_text(derived.to_json())


def load_architecture(path, config=None):
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not valid JSON ({exc})") from None
    derived = DerivedArchitecture.from_dict(data)
    if config is not None and derived.config != config:
        if len(derived.decisions) != config.num_layers:
            raise ValueError(f"{path}: {len(derived.decisions)} layers, config has {config.num_layers}")
        raise ValueError(f"{path}: architecture was derived for a different config")
    return derived


def save_config(config, path):
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")


def load_config(path):
    try:
        return MacroArchConfig.from_dict(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not valid JSON ({exc})") from None


def save_checkpoint(supernet, path):
    arrays = {f"param/{k}": v.data for k, v in supernet.parameters().items()}
    arrays["config_json"] = np.frombuffer(canonical_json(supernet.config.to_dict()).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path):
    try:
        with np.load(path) as f:
            config = MacroArchConfig.from_dict(json.loads(f["config_json"].tobytes().decode()))
            net = Supernet(config)
            params = net.parameters()
            stored = {k[len("param/"):]: f[k] for k in f.files if k.startswith("param/")}
    except (OSError, KeyError, ValueError) as exc:
        raise ValueError(f"{path}: unreadable checkpoint ({exc})") from None
    if set(stored) != set(params):
        raise ValueError(f"{path}: checkpoint parameters do not match its config")
    for k, p in params.items():
        if stored[k].shape != p.shape:
            raise ValueError(f"{path}: parameter {k} has shape {stored[k].shape}, expected {p.shape}")
        p.data = stored[k].astype(p.data.dtype)
    return net


# ------------------------------------------------------------------ materialization

class MBConv:
    """Plain MBConv-kxk-e layer."""

    def __init__(self, cin, cout, kernel, expansion, stride, residual, name="mbconv"):
        self.cin, self.cout, self.kernel, self.expansion = cin, cout, kernel, expansion
        self.stride, self.residual, self.name = stride, residual, name
        c = expansion * cin
        self.expand_w = Tensor(np.zeros((cin, c)), True)
        self.expand_scale = Tensor(np.ones(c), True)
        self.expand_bias = Tensor(np.zeros(c), True)
        self.dw = Tensor(np.zeros((kernel, kernel, c)), True)
        self.dw_scale = Tensor(np.ones(c), True)
        self.dw_bias = Tensor(np.zeros(c), True)
        self.project_w = Tensor(np.zeros((c, cout)), True)

    def parameters(self):
        return {"expand_w": self.expand_w, "expand_scale": self.expand_scale, "expand_bias": self.expand_bias,
                "dw": self.dw, "dw_scale": self.dw_scale, "dw_bias": self.dw_bias, "project_w": self.project_w}

    def __call__(self, x):
        h = T.pointwise_conv(x, self.expand_w)
        h = T.relu(T.add(T.mul(h, self.expand_scale), self.expand_bias))
        h = T.depthwise_conv(h, self.dw, self.stride)
        h = T.relu(T.add(T.mul(h, self.dw_scale), self.dw_bias))
        out = T.pointwise_conv(h, self.project_w)
        return T.add(x, out) if self.residual else out


class CompactNet:
    """Non-searchable network for a derived architecture."""

    def __init__(self, config, decisions):
        self.config = config
        self.decisions = list(decisions)
        c, k = config.stem_channels, config.num_classes
        self.stem_w = Tensor(np.zeros((3, 3, config.input_channels, c)), True)
        self.stem_scale = Tensor(np.ones(c), True)
        self.stem_bias = Tensor(np.zeros(c), True)
        self.layers = []
        last = c
        for i, ((cin, cout, stride, _, skip), d) in enumerate(zip(config.layer_specs(), self.decisions)):
            self.layers.append(None if d.skip else MBConv(cin, cout, d.kernel, d.expansion, stride, skip, f"layer{i}"))
            last = cout
        self.head_w = Tensor(np.zeros((last, k)), True)
        self.head_b = Tensor(np.zeros(k), True)

    def parameters(self):
        params = {"stem.w": self.stem_w, "stem.scale": self.stem_scale, "stem.bias": self.stem_bias,
                  "head.w": self.head_w, "head.b": self.head_b}
        for i, layer in enumerate(self.layers):
            if layer is not None:
                params.update({f"layer{i}.{k}": v for k, v in layer.parameters().items()})
        return params

    def forward(self, x):
        h = T.conv2d(x, self.stem_w, self.config.stem_stride)
        h = T.relu(T.add(T.mul(h, self.stem_scale), self.stem_bias))
        for layer in self.layers:
            if layer is not None:
                h = layer(h)
        return T.dense(T.global_mean_pool(h), self.head_w, self.head_b)

    __call__ = forward


def materialize(derived, supernet):
    """Build the plain network for ``derived``, initialised from the supernet's weight subsets."""
    decisions = derived.decisions if isinstance(derived, DerivedArchitecture) else list(derived)
    config = supernet.config
    if isinstance(derived, DerivedArchitecture) and derived.config != config:
        raise ValueError("materialize: derived architecture belongs to a different config")
    if len(decisions) != len(supernet.layers):
        raise ValueError(f"materialize: {len(decisions)} decisions for {len(supernet.layers)} layers")
    net = CompactNet(config, decisions)
    for name in ("stem_w", "stem_scale", "stem_bias", "head_w", "head_b"):
        getattr(net, name).data = getattr(supernet, name).data.copy()
    for layer, src, d in zip(net.layers, supernet.layers, decisions):
        if d.skip:
            if not src.skip_allowed:
                raise ValueError(f"materialize: {src.name} cannot be skipped")
            continue
        c = layer.expansion * layer.cin
        lo = (5 - layer.kernel) // 2
        layer.expand_w.data = src.expand_w.data[:, :c].copy()
        layer.expand_scale.data = src.expand_scale.data[:c].copy()
        layer.expand_bias.data = src.expand_bias.data[:c].copy()
        layer.dw.data = src.dw_super.data[lo:lo + layer.kernel, lo:lo + layer.kernel, :c].copy()
        layer.dw_scale.data = src.dw_scale.data[:c].copy()
        layer.dw_bias.data = src.dw_bias.data[:c].copy()
        layer.project_w.data = src.project_w.data[:c, :].copy()
    return net


def set_decisions(supernet, decisions, margin=1e6):
    """Force hard decisions by pushing thresholds far below or above the group norms."""
    for layer, d in zip(supernet.layers, decisions):
        if d.skip and not layer.skip_allowed:
            raise ValueError(f"{layer.name} cannot be skipped")
        layer.set_thresholds(
            k5=-margin if d.use_k5 else margin,
            e3=-margin if d.use_e3_or_more else margin,
            e6=-margin if d.use_e6 else margin,
        )

