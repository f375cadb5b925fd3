"""Latency-aware search loop, toy datasets and retraining of derived networks."""
from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .latency import load_lut, total_runtime
from .search_space import MacroArchConfig, build_supernet, derive_architecture, digest, materialize
from .tensor import SGD

# ------------------------------------------------------------------ toy data

DATASET_KINDS = ("channel_mean", "wide_rf")


@dataclass(frozen=True)
class DatasetSpec:
    """Synthetic image-classification task.

    channel_mean: Gaussian noise images, class c adds ``signal`` to channel c.
        Linearly separable after pooling, so stem + head alone solve it.
    wide_rf: Gaussian texture repeating every ``period`` pixels, horizontally
        for class 0 and vertically for class 1. With period 5 every 5x5 window
        holds 25 independent values in both classes, so a stem + 3x3
        depthwise stack (receptive field 5) is at chance; a 5x5 depthwise
        (receptive field 7) sees the repeats.
    """
    kind: str = "channel_mean"
    n_train: int = 512
    n_test: int = 256
    image_size: int = 8
    channels: int = 2
    num_classes: int = 2
    noise: float = 1.0
    signal: float = 1.0
    period: int = 5

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}; choose from {DATASET_KINDS}")
        if self.kind == "channel_mean" and self.num_classes > self.channels:
            raise ValueError("channel_mean needs at least one channel per class")
        if self.kind == "wide_rf":
            if self.num_classes != 2:
                raise ValueError("wide_rf is a two-class task")
            if self.image_size <= self.period:
                raise ValueError("wide_rf image must be larger than the period")


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    def batches(self, batch_size, rng):
        """Endless stream of shuffled training batches."""
        n = len(self.y_train)
        while True:
            order = rng.permutation(n)
            for s in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
                idx = order[s:s + batch_size]
                yield self.x_train[idx], self.y_train[idx]


def _channel_mean(spec, n, rng):
    y = rng.integers(spec.num_classes, size=n)
    x = rng.normal(0.0, spec.noise, (n, spec.image_size, spec.image_size, spec.channels))
    x[np.arange(n), :, :, y] += spec.signal
    return x, y


def _wide_rf(spec, n, rng):
    s, period = spec.image_size, spec.period
    y = rng.integers(2, size=n)
    x = np.empty((n, s, s, spec.channels))
    idx = np.arange(s) % period
    for i in range(n):
        if y[i] == 0:
            tile = rng.normal(0.0, spec.signal, (s, period, spec.channels))
            x[i] = tile[:, idx]
        else:
            tile = rng.normal(0.0, spec.signal, (period, s, spec.channels))
            x[i] = tile[idx]
    if spec.noise:
        x += rng.normal(0.0, spec.noise, x.shape)
    return x, y


def toy_dataset(spec, seed=0):
    rng = np.random.default_rng(seed)
    make = _channel_mean if spec.kind == "channel_mean" else _wide_rf
    xtr, ytr = make(spec, spec.n_train, rng)
    xte, yte = make(spec, spec.n_test, rng)
    return Dataset(xtr, ytr, xte, yte)


# ------------------------------------------------------------------ loss


@dataclass
class LossParts:
    loss: T.Tensor
    ce: T.Tensor
    runtime: T.Tensor
    gates: list


def nas_loss(x, y, supernet, lut, lam, relaxed=False):
    """Cross-entropy plus lam * ln(predicted runtime in ms)."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    logits, gates = supernet.forward(T.Tensor(x), relaxed)
    ce = T.softmax_cross_entropy(logits, y)
    runtime = total_runtime([(g.k5, g.e3, g.e6) for g in gates], lut)
    if runtime.item() <= 0:
        raise ValueError("predicted runtime is not positive; give the latency table a fixed_overhead_ms > 0")
    loss = T.add(ce, T.mul(lam, T.log(runtime)))
    return LossParts(loss, ce, runtime, gates)


def decision_string(gates):
    out = []
    for g in gates:
        k5, e3, e6 = (float(t.data) > 0.5 for t in (g.k5, g.e3, g.e6))
        out.append("s" if not e3 else f"{5 if k5 else 3}x{5 if k5 else 3}e{6 if e6 else 3}")
    return ",".join(out)


# ------------------------------------------------------------------ search


@dataclass(frozen=True)
class SearchConfig:
    arch: MacroArchConfig = field(default_factory=MacroArchConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    lut_path: str | None = None
    lam: float = 0.1
    steps: int = 200
    batch_size: int = 32
    learning_rate: float = 0.02
    threshold_learning_rate: float | None = None
    momentum: float = 0.9
    grad_clip: float | None = 1.0
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    def to_dict(self):
        d = asdict(self)
        d["arch"] = self.arch.to_dict()
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        try:
            if "lambda" in d:
                d["lam"] = d.pop("lambda")
            if "arch" in d:
                d["arch"] = MacroArchConfig.from_dict(d["arch"])
            if "dataset" in d:
                d["dataset"] = DatasetSpec(**d["dataset"])
            return cls(**d)
        except TypeError as exc:
            raise ValueError(f"malformed search config: {exc}") from None

    def with_seed(self, seed):
        return replace(self, seed=seed, arch=replace(self.arch, seed=seed))


@dataclass
class StepRecord:
    step: int
    ce: float
    runtime_ms: float
    loss: float
    decisions: str


@dataclass
class SearchMetrics:
    steps: list = field(default_factory=list)
    wall_clock_s: float = 0.0

    CSV_HEADER = ("step", "ce", "runtime_ms", "loss", "decisions")

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.CSV_HEADER)
            for r in self.steps:
                w.writerow([r.step, repr(r.ce), repr(r.runtime_ms), repr(r.loss), r.decisions])

    @classmethod
    def read_csv(cls, path):
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        return cls([StepRecord(int(r["step"]), float(r["ce"]), float(r["runtime_ms"]), float(r["loss"]),
                               r["decisions"]) for r in rows])


@dataclass
class SearchResult:
    supernet: object
    metrics: SearchMetrics
    derived: object
    lut: object


def run_search(config, lut=None, dataset=None, log_every=0, log=print):
    """Joint SGD over weights and thresholds on the latency-aware loss."""
    start = time.perf_counter()
    if lut is None:
        if config.lut_path is None:
            raise ValueError("run_search: no latency table given and config.lut_path is unset")
        lut = load_lut(config.lut_path)
    if len(lut) != config.arch.num_layers:
        raise ValueError(f"latency table has {len(lut)} layers, architecture has {config.arch.num_layers}")
    if dataset is None:
        dataset = toy_dataset(config.dataset, config.seed)
    if dataset.x_train.shape[1:] != (config.arch.input_size, config.arch.input_size, config.arch.input_channels):
        raise ValueError(f"dataset images {dataset.x_train.shape[1:]} do not fit the architecture input")
    net = build_supernet(config.arch)
    for layer in net.layers:
        layer.temperature = config.temperature
    t_lr = config.learning_rate if config.threshold_learning_rate is None else config.threshold_learning_rate
    opt = SGD([(net.weight_params(), config.learning_rate), (net.threshold_params(), t_lr)], config.momentum, config.grad_clip)
    rng = np.random.default_rng(config.seed + 1)
    batches = dataset.batches(config.batch_size, rng)
    metrics = SearchMetrics()
    for step in range(config.steps):
        x, y = next(batches)
        parts = nas_loss(x, y, net, lut, config.lam)
        if not np.isfinite(parts.loss.item()):
            raise FloatingPointError(f"search diverged at step {step}; lower the learning rate")
        opt.zero_grad()
        parts.loss.backward()
        opt.step()
        rec = StepRecord(step, parts.ce.item(), parts.runtime.item(), parts.loss.item(), decision_string(parts.gates))
        metrics.steps.append(rec)
        if log_every and (step % log_every == 0 or step == config.steps - 1):
            log(f"step {step:5d} ce {rec.ce:.4f} runtime {rec.runtime_ms:.3f} ms loss {rec.loss:.4f} [{rec.decisions}]")
    metrics.wall_clock_s = time.perf_counter() - start
    derived = derive_architecture(net, lut_hash=lut.digest(), **{"lambda": config.lam},
                                  seed=config.seed, search_steps=config.steps,
                                  search_config_hash=digest(config.to_dict()))
    return SearchResult(net, metrics, derived, lut)


# ------------------------------------------------------------------ evaluation and retraining


def accuracy(model_fn, x, y, batch_size=256):
    correct = 0
    for s in range(0, len(y), batch_size):
        logits = model_fn(T.Tensor(x[s:s + batch_size])).data
        correct += int(np.sum(np.argmax(logits, axis=1) == y[s:s + batch_size]))
    return correct / max(len(y), 1)


def train_network(net, dataset, epochs, batch_size=32, learning_rate=0.02, momentum=0.9, seed=0, grad_clip=1.0):
    params = list(net.parameters().values())
    opt = SGD([(params, learning_rate)], momentum, grad_clip)
    rng = np.random.default_rng(seed)
    n = len(dataset.y_train)
    steps_per_epoch = max(n // batch_size, 1)
    batches = dataset.batches(batch_size, rng)
    for _ in range(epochs * steps_per_epoch):
        x, y = next(batches)
        loss = T.softmax_cross_entropy(net(T.Tensor(x)), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return net


def train_derived(derived, supernet, dataset, epochs, batch_size=32, learning_rate=0.02, momentum=0.9, seed=0,
                  grad_clip=1.0):
    """Retrain the materialised network; returns held-out and training accuracy."""
    net = materialize(derived, supernet)
    train_network(net, dataset, epochs, batch_size, learning_rate, momentum, seed, grad_clip)
    return {
        "accuracy": accuracy(net, dataset.x_test, dataset.y_test),
        "train_accuracy": accuracy(net, dataset.x_train, dataset.y_train),
        "epochs": epochs,
        "network": net,
    }


def lambda_sweep(config, lut, lams=(0.01, 0.1, 1.0), seeds=(0, 1, 2), dataset=None):
    """Derived-architecture runtime for each (lambda, seed); used to pick a default lambda."""
    from .latency import predict_ms

    rows = []
    for lam in lams:
        for seed in seeds:
            cfg = replace(config, lam=lam).with_seed(seed)
            res = run_search(cfg, lut, dataset)
            rows.append({
                "lambda": lam, "seed": seed,
                "runtime_ms": predict_ms(res.derived.decisions, lut),
                "architecture": res.derived.summary(),
                "final_ce": res.metrics.steps[-1].ce,
            })
    return rows


def write_rows(rows, path):
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
