"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (the lines are repeated in the
terminal summary) or directly with ``python tests/test_acceptance.py``.
"""
import json
import statistics
import time
from dataclasses import replace
from pathlib import Path

from spnas import cli, oracle
from spnas.harness import gradcheck_nas_loss, subset_equivalence
from spnas.latency import layer_runtime, load_lut, predict_ms, synth_lut, total_runtime, validate_runtime_model
from spnas.search import DatasetSpec, SearchConfig, SearchMetrics, run_search, toy_dataset, train_derived
from spnas.search_space import (
    BlockConfig,
    CompactNet,
    MacroArchConfig,
    build_supernet,
    count_params,
    fixed_param_count,
    supernet_param_count,
)
from spnas.superkernel import DecisionTriple
from spnas.tensor import Tensor

ROOT = Path(__file__).resolve().parent.parent
RESULTS = []

# 2-layer net on 8x8x2 inputs with 4 channels
TWO_LAYER = MacroArchConfig(input_size=8, input_channels=2, stem_channels=4, blocks=(BlockConfig(2, 4, 1),))
# 2 blocks x 2 layers, second block strided
TOY = MacroArchConfig(blocks=(BlockConfig(2, 4, 1), BlockConfig(2, 8, 2)))


def _lut(arch, seed=0, **kw):
    return synth_lut([s[:4] for s in arch.layer_specs()], seed=seed, **kw)


def report(n, ok, detail):
    line = f"ACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    RESULTS.append(line)
    print(line)
    return ok


# ---------------------------------------------------------------- 1


def test_1_gradient_fidelity():
    lut = _lut(TWO_LAYER)
    t0 = time.perf_counter()
    reports = [gradcheck_nas_loss(TWO_LAYER, lut, seed, lam=0.5, max_coords=128) for seed in range(10)]
    elapsed = time.perf_counter() - t0
    worst = max(r.worst for r in reports)
    kinks = sum(len(r.nonsmooth) for r in reports)
    checked = sum(r.checked for r in reports)
    ok = all(r.passed for r in reports) and worst <= 1e-4 and elapsed < 60
    assert report(1, ok, f"10 seeds, {checked} coordinates, max rel error {worst:.2e} (tol 1e-4), "
                         f"{kinks} ReLU-kink coordinates excluded, {elapsed:.1f} s (< 60 s)")


# ---------------------------------------------------------------- 2


def test_2_subset_semantics():
    t0 = time.perf_counter()
    worst = subset_equivalence(TWO_LAYER, seed=0, n_inputs=20, layer_index=1)
    elapsed = time.perf_counter() - t0
    ok = len(worst) == 5 and max(worst.values()) <= 1e-10 and elapsed < 30
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert report(2, ok, f"max |supernet - sliced| over 20 inputs: {detail} (tol 1e-10), {elapsed:.1f} s (< 30 s)")


# ---------------------------------------------------------------- 3


def test_3_latency_oracle_equivalence():
    t0 = time.perf_counter()
    specs = [(4, 4, 1, 8)] * 3
    worst, count = 0.0, 0
    for lut in (synth_lut(specs, seed=0), synth_lut(specs, seed=1, with_r3x3_e3=False)):
        for arch in oracle.enumerate_architectures(3):
            gates = [tuple(Tensor(float(v)) for v in op) for op in arch]
            fast = total_runtime(gates, lut).item()
            ref = oracle.brute_force_runtime(arch, lut)
            worst = max(worst, abs(fast - ref) / abs(ref))
            count += 1
    elapsed = time.perf_counter() - t0
    ok = count == 250 and worst <= 1e-9 and elapsed < 10
    assert report(3, ok, f"125 architectures x 2 tables, max rel diff {worst:.1e} (tol 1e-9), {elapsed:.2f} s (< 10 s)")


# ---------------------------------------------------------------- 4


def test_4_closed_form_latency():
    one, zero = Tensor(1.0), Tensor(0.0)
    failures, rows = [], 0
    for seed in range(5):
        for i, row in enumerate(_lut(TOY, seed).layers):
            rows += 1
            cases = [
                ("e=(1,1),k=1", layer_runtime(one, one, one, row).item(), row.r5x5_e6_ms),
                ("e=(1,1),k=0", layer_runtime(one, one, zero, row).item(), row.r3x3_e6_ms),
            ]
            for k in (zero, one):
                for e6 in (zero, one):
                    cases.append(("e3=0", layer_runtime(zero, e6, k, row).item(), 0.0))
            failures += [(seed, i, name) for name, got, want in cases if got != want]
    assert report(4, not failures, f"{rows} table rows, exact equality; failures: {failures or 'none'}")


# ---------------------------------------------------------------- 5


def _search_cfg(lam, seed, **kw):
    return SearchConfig(arch=TOY, lam=lam, steps=200, **kw).with_seed(seed)


def test_5_lambda_pressure():
    t0 = time.perf_counter()
    lut = _lut(TOY)
    medians, archs = [], {}
    for lam in (0.0, 0.1, 1.0):
        runtimes = []
        for seed in (0, 1, 2):
            res = run_search(_search_cfg(lam, seed), lut)
            runtimes.append(predict_ms(res.derived.decisions, lut))
            archs[(lam, seed)] = res.derived.summary()
        medians.append(statistics.median(runtimes))
    monotone = all(a >= b for a, b in zip(medians, medians[1:]))

    wide = cli.load_run_config(ROOT / "configs" / "wide_rf.json")
    wide_res = run_search(replace(wide.search, lam=0.0), load_lut(wide.search.lut_path))
    k5 = any(d.kernel == 5 for d in wide_res.derived.decisions)
    elapsed = time.perf_counter() - t0
    ok = monotone and k5 and elapsed < 15 * 60
    meds = ", ".join(f"lambda {lam}: {m:.3f} ms" for lam, m in zip((0.0, 0.1, 1.0), medians))
    assert report(5, ok, f"median derived runtime {meds} (non-increasing: {monotone}); "
                         f"wide-RF lambda=0 derives {wide_res.derived.summary()} (kernel 5: {k5}); "
                         f"{elapsed:.0f} s (< 900 s)")


# ---------------------------------------------------------------- 6


def test_6_single_path_parameter_count():
    desk = cli.load_run_config(ROOT / "configs" / "desk.json").search.arch
    lines, ok = [], True
    for name, cfg in (("two-layer", TWO_LAYER), ("toy", TOY), ("desk", desk)):
        full = [DecisionTriple.from_name("5x5e6")] * cfg.num_layers
        supernet = count_params(build_supernet(cfg).parameters().values())
        largest = count_params(CompactNet(cfg, full).parameters().values())
        closed = supernet_param_count(cfg) == supernet and fixed_param_count(cfg, full) == largest
        ok &= closed and supernet == largest + 3 * cfg.num_layers
        lines.append(f"{name} {supernet} = {largest} + 3*{cfg.num_layers}")
    assert report(6, ok, "; ".join(lines))


# ---------------------------------------------------------------- 7


def test_7_determinism(tmp_path):
    cfg = ROOT / "configs" / "toy.json"
    codes = [cli.main(["search", str(cfg), "--out", str(tmp_path / run)]) for run in ("a", "b")]
    a, b = tmp_path / "a", tmp_path / "b"
    same_json = (a / "derived.json").read_bytes() == (b / "derived.json").read_bytes()
    da = [r.decisions for r in SearchMetrics.read_csv(a / "metrics.csv").steps]
    db = [r.decisions for r in SearchMetrics.read_csv(b / "metrics.csv").steps]
    ok = codes == [0, 0] and same_json and da == db
    arch = json.loads((a / "derived.json").read_text())["layers"]
    assert report(7, ok, f"exit codes {codes}, derived JSON byte-identical: {same_json}, "
                         f"{len(da)} decision strings identical: {da == db}; layers {arch}")


# ---------------------------------------------------------------- 8


def test_8_runtime_model_validation():
    lut = _lut(TOY, seed=0, with_r3x3_e3=False)
    rep = validate_runtime_model(lut, n_samples=100, noise_sigma=0.5, rng_seed=0, skip_mask=TOY.skip_mask)
    text = str(rep)
    ok = 0.3 <= rep.rmse_ms <= 0.7 and "mean relative error" in text and rep.n_samples == 100
    assert report(8, ok, f"{text}; RMSE in [0.3, 0.7]: {0.3 <= rep.rmse_ms <= 0.7}")


# ---------------------------------------------------------------- 9


def test_9_end_to_end_accuracy():
    t0 = time.perf_counter()
    spec = DatasetSpec(kind="channel_mean", n_train=512, n_test=512)
    cfg = replace(_search_cfg(0.0, 0), dataset=spec)
    lut = _lut(TOY)
    data = toy_dataset(spec, 0)
    res = run_search(cfg, lut, data)
    trained = train_derived(res.derived, res.supernet, data, epochs=10, seed=0)
    elapsed = time.perf_counter() - t0
    ok = trained["accuracy"] >= 0.95 and elapsed < 600
    assert report(9, ok, f"derived {res.derived.summary()}, held-out accuracy {trained['accuracy']:.4f} "
                         f"(>= 0.95) after 10 epochs, {elapsed:.0f} s (< 600 s)")


if __name__ == "__main__":
    import tempfile

    for fn in (test_1_gradient_fidelity, test_2_subset_semantics, test_3_latency_oracle_equivalence,
               test_4_closed_form_latency, test_5_lambda_pressure, test_6_single_path_parameter_count):
        try:
            fn()
        except AssertionError:
            pass
    with tempfile.TemporaryDirectory() as d:
        try:
            test_7_determinism(Path(d))
        except AssertionError:
            pass
    for fn in (test_8_runtime_model_validation, test_9_end_to_end_accuracy):
        try:
            fn()
        except AssertionError:
            pass
