"""``spnas`` command line: synthesize tables, search, derive, retrain, validate.

Every command takes one JSON config (see configs/) plus optional --seed and
--out overrides, and writes a manifest.json next to its outputs.

Exit codes: 0 success, 1 usage or input error, 2 failed check.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from . import __version__
from .harness import gradcheck_nas_loss
from .latency import load_lut, save_lut, synth_lut, validate_runtime_model
from .search import SearchConfig, run_search, toy_dataset, train_derived
from .search_space import derive_architecture, load_architecture, load_checkpoint, save_architecture, save_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_CHECK = 0, 1, 2


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


# ------------------------------------------------------------------ config file


@dataclass(frozen=True)
class LutSynthSection:
    base_ms_per_mmac: float = 40.0
    fixed_overhead_ms: float = 1.0
    with_r3x3_e3: bool = True
    device_label: str = "synthetic"


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 25
    batch_size: int = 32
    learning_rate: float = 0.02
    momentum: float = 0.9
    grad_clip: float | None = 1.0


@dataclass(frozen=True)
class ValidateSection:
    n_samples: int = 100
    noise_sigma: float = 0.5
    max_rmse_ms: float | None = None


@dataclass(frozen=True)
class GradcheckSection:
    seeds: int = 1
    lam: float = 0.5
    batch: int = 2
    h: float = 1e-5
    tolerance: float = 1e-4
    max_coords: int | None = 128


@dataclass(frozen=True)
class RunConfig:
    search: SearchConfig = field(default_factory=SearchConfig)
    lut_synth: LutSynthSection = field(default_factory=LutSynthSection)
    train: TrainSection = field(default_factory=TrainSection)
    validate_latency: ValidateSection = field(default_factory=ValidateSection)
    gradcheck: GradcheckSection = field(default_factory=GradcheckSection)

    SECTIONS = {"lut_synth": LutSynthSection, "train": TrainSection,
                "validate_latency": ValidateSection, "gradcheck": GradcheckSection}

    @classmethod
    def from_dict(cls, d, base_dir=None):
        if not isinstance(d, dict):
            raise ValueError("config must be a JSON object")
        d = dict(d)
        sections = {}
        for key, kind in cls.SECTIONS.items():
            raw = dict(d.pop(key, {}))
            if "lambda" in raw:
                raw["lam"] = raw.pop("lambda")
            try:
                sections[key] = kind(**raw)
            except TypeError as exc:
                raise ValueError(f"malformed [{key}] section: {exc}") from None
        search = SearchConfig.from_dict(d)
        if search.lut_path is not None and base_dir is not None:
            p = Path(search.lut_path)
            if not p.is_absolute():
                search = replace(search, lut_path=str((Path(base_dir) / p).resolve()))
        return cls(search, **sections)

    def to_dict(self):
        d = self.search.to_dict()
        for key in self.SECTIONS:
            sec = asdict(getattr(self, key))
            if "lam" in sec:
                sec["lambda"] = sec.pop("lam")
            d[key] = sec
        return d

    def with_seed(self, seed):
        return replace(self, search=self.search.with_seed(seed))


def load_run_config(path, seed=None):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: not valid JSON ({exc})") from None
    try:
        cfg = RunConfig.from_dict(raw, base_dir=path.parent)
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None
    return cfg if seed is None else cfg.with_seed(seed)


def _require_lut(cfg):
    path = cfg.search.lut_path
    if path is None:
        raise UsageError("config has no lut_path; generate one with `spnas lut-synth`")
    if not Path(path).is_file():
        raise UsageError(f"latency table not found: {path}")
    return load_lut(path, cfg.search.arch.num_layers)


# ------------------------------------------------------------------ manifest


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class Run:
    """Collects artifacts of one command and writes the manifest."""

    def __init__(self, command, out, config, seed, argv):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = {"command": command, "argv": list(argv), "config": config, "seed": seed,
                         "artifacts": {}, "tool_version": __version__, "started": _now()}

    def path(self, name):
        return self.out / name

    def add(self, key, name):
        self.manifest["artifacts"][key] = {"path": name, "sha256": _sha256(self.out / name)}

    def finish(self, **extra):
        self.manifest.update(extra)
        self.manifest["finished"] = _now()
        (self.out / "manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------ commands


def cmd_lut_synth(args):
    cfg = load_run_config(args.config, args.seed)
    sec = cfg.lut_synth
    specs = [s[:4] for s in cfg.search.arch.layer_specs()]
    lut = synth_lut(specs, seed=cfg.search.seed, base_ms_per_mmac=sec.base_ms_per_mmac,
                    fixed_overhead_ms=sec.fixed_overhead_ms, with_r3x3_e3=sec.with_r3x3_e3,
                    device_label=sec.device_label)
    run = Run("lut-synth", args.out, cfg.to_dict(), cfg.search.seed, args.argv)
    save_lut(lut, run.path("lut.json"))
    run.add("lut", "lut.json")
    run.finish(lut_hash=lut.digest())
    print(f"wrote {run.path('lut.json')} ({len(lut)} layers, hash {lut.digest()[:12]})")


def cmd_search(args):
    cfg = load_run_config(args.config, args.seed)
    lut = _require_lut(cfg)
    run = Run("search", args.out, cfg.to_dict(), cfg.search.seed, args.argv)
    try:
        res = run_search(cfg.search, lut, log_every=args.log_every, log=print)
    except FloatingPointError as exc:
        raise CheckFailed(str(exc)) from None
    res.metrics.write_csv(run.path("metrics.csv"))
    save_architecture(res.derived, run.path("derived.json"))
    save_checkpoint(res.supernet, run.path("checkpoint.npz"))
    for key, name in (("metrics", "metrics.csv"), ("derived", "derived.json"), ("checkpoint", "checkpoint.npz")):
        run.add(key, name)
    run.finish(lut_hash=lut.digest(), wall_clock_s=res.metrics.wall_clock_s)
    print(f"derived {res.derived.summary()} in {res.metrics.wall_clock_s:.1f} s -> {run.out}")


def cmd_derive(args):
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    try:
        net = load_checkpoint(args.checkpoint)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    derived = derive_architecture(net, checkpoint_sha256=_sha256(args.checkpoint))
    run = Run("derive", args.out, {"checkpoint": str(Path(args.checkpoint).resolve())},
              net.config.seed, args.argv)
    save_architecture(derived, run.path("derived.json"))
    run.add("derived", "derived.json")
    run.finish()
    print(derived.summary())


def cmd_train(args):
    cfg = load_run_config(args.config, args.seed)
    for p in (args.arch, args.checkpoint):
        if not Path(p).is_file():
            raise UsageError(f"file not found: {p}")
    try:
        net = load_checkpoint(args.checkpoint)
        derived = load_architecture(args.arch, net.config)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if cfg.search.arch.input_size != net.config.input_size or cfg.search.arch.input_channels != net.config.input_channels:
        raise UsageError("dataset in config does not match the checkpoint's input shape")
    t = cfg.train
    data = toy_dataset(cfg.search.dataset, cfg.search.seed)
    res = train_derived(derived, net, data, t.epochs, t.batch_size, t.learning_rate, t.momentum,
                        cfg.search.seed, t.grad_clip)
    metrics = {"accuracy": res["accuracy"], "train_accuracy": res["train_accuracy"], "epochs": res["epochs"],
               "architecture": derived.summary()}
    run = Run("train", args.out, {**cfg.to_dict(), "arch_file": str(Path(args.arch).resolve()),
                                  "checkpoint": str(Path(args.checkpoint).resolve())}, cfg.search.seed, args.argv)
    run.path("train_metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    run.add("metrics", "train_metrics.json")
    run.finish()
    print(f"accuracy {res['accuracy']!r}")


def cmd_validate_latency(args):
    cfg = load_run_config(args.config, args.seed)
    lut = _require_lut(cfg)
    v = cfg.validate_latency
    report = validate_runtime_model(lut, v.n_samples, v.noise_sigma, cfg.search.seed, cfg.search.arch.skip_mask)
    run = Run("validate-latency", args.out, cfg.to_dict(), cfg.search.seed, args.argv)
    run.path("validation.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    run.add("report", "validation.json")
    ok = v.max_rmse_ms is None or report.rmse_ms <= v.max_rmse_ms
    run.finish(lut_hash=lut.digest(), passed=ok)
    print(report)
    if not ok:
        raise CheckFailed(f"RMSE {report.rmse_ms:.4f} ms exceeds max_rmse_ms {v.max_rmse_ms}")


def cmd_gradcheck(args):
    cfg = load_run_config(args.config, args.seed)
    lut = _require_lut(cfg)
    g = cfg.gradcheck
    reports = {}
    for s in range(cfg.search.seed, cfg.search.seed + g.seeds):
        rep = gradcheck_nas_loss(cfg.search.arch, lut, s, g.lam, g.batch, g.h, g.tolerance, g.max_coords)
        reports[str(s)] = rep.to_dict()
        print(f"seed {s}: {rep}")
    ok = all(r["passed"] for r in reports.values())
    run = Run("gradcheck", args.out, cfg.to_dict(), cfg.search.seed, args.argv)
    run.path("gradcheck.json").write_text(json.dumps(reports, indent=2, sort_keys=True, default=str) + "\n")
    run.add("report", "gradcheck.json")
    run.finish(lut_hash=lut.digest(), passed=ok)
    if not ok:
        raise CheckFailed("gradient check failed")


# ------------------------------------------------------------------ entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="spnas", description="Single-path NAS with a differentiable runtime model.")
    p.add_argument("--version", action="version", version=f"spnas {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, default_out, config=True):
        if config:
            sp.add_argument("config", help="JSON run config")
            sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out", default=default_out, help=f"output directory (default {default_out})")

    sp = sub.add_parser("lut-synth", help="write a synthetic latency table for the config's architecture")
    common(sp, "runs/lut")
    sp.set_defaults(func=cmd_lut_synth)

    sp = sub.add_parser("search", help="run the architecture search")
    common(sp, "runs/search")
    sp.add_argument("--log-every", type=int, default=0, help="print progress every N steps")
    sp.set_defaults(func=cmd_search)

    sp = sub.add_parser("derive", help="read the hard decisions off a searched checkpoint")
    sp.add_argument("checkpoint")
    common(sp, "runs/derive", config=False)
    sp.set_defaults(func=cmd_derive)

    sp = sub.add_parser("train", help="retrain a derived architecture from its supernet weights")
    common(sp, "runs/train")
    sp.add_argument("--arch", required=True, help="derived architecture JSON")
    sp.add_argument("--checkpoint", required=True, help="search checkpoint (.npz)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("validate-latency", help="check the runtime model against noisy simulated measurements")
    common(sp, "runs/validate")
    sp.set_defaults(func=cmd_validate_latency)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the search loss gradients")
    common(sp, "runs/gradcheck")
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    try:
        args.func(args)
    except UsageError as exc:
        print(f"spnas {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckFailed as exc:
        print(f"spnas {args.command}: check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except ValueError as exc:
        print(f"spnas {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
