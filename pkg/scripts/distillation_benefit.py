"""Distilled student vs. no-division baseline vs. mean shape, over training seeds.

    python3 scripts/distillation_benefit.py --seeds 0 1 2 3 4 --epochs 60 --out results/distill.json
"""
import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np

from xrayocc.config import load_config
from xrayocc.evaluation import mean_cd
from xrayocc.experiments import Benchmark, distillation_run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="run config JSON (defaults if omitted)")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--epochs", type=int, help="override train.epochs for every model")
    ap.add_argument("--lr", type=float, help="override train.lr for every model")
    ap.add_argument("--warmup", type=int, help="override train.warmup_epochs for every model")
    ap.add_argument("--alpha", type=float, default=0.2)
    ap.add_argument("--out", default="results/distillation_benefit.json")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING, format="%(message)s")

    cfg = load_config(args.config)
    if args.epochs:
        cfg.train.epochs = args.epochs
    if args.lr:
        cfg.train.lr = args.lr
    if args.warmup is not None:
        cfg.train.warmup_epochs = args.warmup
    t0 = time.perf_counter()
    bench = Benchmark.build(cfg)
    mean_shape = mean_cd(bench.mean_shape_report())
    rows = []
    for seed in args.seeds:
        row = distillation_run(bench, seed, args.alpha)
        row.pop("models")
        rows.append(row)
        print(f"seed {seed}: teacher {row['teacher']:.3f}  student {row['student']:.3f}  baseline {row['baseline']:.3f}  ({row['seconds']:.0f} s)")
    summary = {k: float(np.mean([r[k] for r in rows])) for k in ("teacher", "student", "baseline")}
    summary["mean_shape"] = mean_shape
    print(f"mean over seeds: " + "  ".join(f"{k} {v:.3f}" for k, v in summary.items()))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"config": cfg.to_dict(), "alpha": args.alpha, "runs": rows, "summary": summary,
                               "seconds": time.perf_counter() - t0}, indent=2) + "\n")


if __name__ == "__main__":
    main()
