"""Runtime-model validation: RMSE and mean relative error against noisy simulated measurements.

Runs the harness over a grid of noise levels, with the 3x3/e3 table entry both
absent (the scaling proxy is exact) and present (the proxy carries model error).

    python scripts/validate_latency.py [--samples 100] [--repeats 20]
"""
import argparse

import numpy as np

from spnas.latency import synth_lut, validate_runtime_model
from spnas.search_space import BlockConfig, MacroArchConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--samples", type=int, default=100)
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--sigmas", type=float, nargs="+", default=[0.0, 0.25, 0.5, 1.0])
    args = ap.parse_args()

    arch = MacroArchConfig(blocks=(BlockConfig(2, 4, 1), BlockConfig(2, 8, 2)))
    specs = [s[:4] for s in arch.layer_specs()]
    print(f"{'table':>14} {'sigma':>6} {'rmse mean':>10} {'rmse sd':>8} {'rel err':>8}")
    for profiled in (False, True):
        lut = synth_lut(specs, seed=0, with_r3x3_e3=profiled)
        for sigma in args.sigmas:
            reps = [validate_runtime_model(lut, args.samples, sigma, s, arch.skip_mask) for s in range(args.repeats)]
            rmse = np.array([r.rmse_ms for r in reps])
            rel = np.mean([r.mean_rel_error for r in reps])
            label = "3x3e3 profiled" if profiled else "proxy exact"
            print(f"{label:>14} {sigma:6.2f} {rmse.mean():10.4f} {rmse.std():8.4f} {100 * rel:7.2f}%")


if __name__ == "__main__":
    main()
