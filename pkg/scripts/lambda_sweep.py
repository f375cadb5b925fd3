"""Derived-architecture runtime across lambda and seeds on the toy config.

    python scripts/lambda_sweep.py [--config configs/toy.json] [--out runs/lambda_sweep.csv]
"""
import argparse
import statistics
from pathlib import Path

from spnas.cli import load_run_config
from spnas.latency import load_lut
from spnas.search import lambda_sweep, write_rows


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(Path(__file__).resolve().parent.parent / "configs" / "toy.json"))
    ap.add_argument("--lambdas", type=float, nargs="+", default=[0.0, 0.01, 0.1, 0.3, 1.0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default="runs/lambda_sweep.csv")
    args = ap.parse_args()

    cfg = load_run_config(args.config).search
    rows = lambda_sweep(cfg, load_lut(cfg.lut_path), args.lambdas, args.seeds)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_rows(rows, args.out)
    for lam in args.lambdas:
        sel = [r for r in rows if r["lambda"] == lam]
        med = statistics.median(r["runtime_ms"] for r in sel)
        print(f"lambda {lam:<6g} median {med:8.3f} ms   " + "  ".join(r["architecture"] for r in sel))
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
