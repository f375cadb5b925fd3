"""Fixed 3x3 vs 5x5 nets on the wide-receptive-field task, then a lambda=0 search.

    python scripts/wide_rf_check.py [--seeds 0 1 2] [--epochs 25]
"""
import argparse
from dataclasses import replace
from pathlib import Path

from spnas.cli import load_run_config
from spnas.latency import load_lut
from spnas.search import run_search, toy_dataset, train_derived
from spnas.search_space import build_supernet
from spnas.superkernel import DecisionTriple


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(Path(__file__).resolve().parent.parent / "configs" / "wide_rf.json"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=25)
    args = ap.parse_args()

    cfg = load_run_config(args.config)
    lut = load_lut(cfg.search.lut_path)
    for seed in args.seeds:
        search = cfg.search.with_seed(seed)
        data = toy_dataset(search.dataset, seed)
        accs = {}
        for name in ("3x3e6", "5x5e6"):
            ops = [DecisionTriple.from_name(name)] * search.arch.num_layers
            accs[name] = train_derived(ops, build_supernet(search.arch), data, args.epochs, seed=seed)["accuracy"]
        res = run_search(replace(search, lam=0.0), lut, data)
        print(f"seed {seed}: fixed 3x3 {accs['3x3e6']:.3f}  fixed 5x5 {accs['5x5e6']:.3f}  "
              f"lambda=0 search derives {res.derived.summary()}")


if __name__ == "__main__":
    main()
