"""Evaluate one trained student at several grid resolutions without retraining.

    python3 scripts/resolution_sweep.py --resolutions 32 64 96 --out results/resolution.json

Trains a teacher and a distilled student on the default benchmark (or loads
``--checkpoint``), then reports mean test CD, inference time and peak
inference memory per resolution.
"""
import argparse
import json
import logging
import time
from pathlib import Path

from xrayocc.checkpoint import load_checkpoint
from xrayocc.config import config_from_dict, load_config
from xrayocc.evaluation import mean_cd
from xrayocc.experiments import Benchmark, distillation_run, inference_peak_bytes


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="run config JSON (defaults if omitted)")
    ap.add_argument("--checkpoint", help="student checkpoint; its config snapshot is used")
    ap.add_argument("--seed", type=int, default=0, help="training seed when no checkpoint is given")
    ap.add_argument("--resolutions", type=int, nargs="+", default=[32, 64, 96])
    ap.add_argument("--out", default="results/resolution_sweep.json")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    if args.checkpoint:
        model, manifest = load_checkpoint(args.checkpoint)
        cfg = config_from_dict(manifest["config"])
        bench = Benchmark.build(cfg)
    else:
        cfg = load_config(args.config)
        bench = Benchmark.build(cfg)
        model = distillation_run(bench, args.seed)["models"]["student"]

    rows = []
    for R in args.resolutions:
        t0 = time.perf_counter()
        report = bench.evaluate(model, R=R)
        peak = inference_peak_bytes(model, bench.setup, bench.test[0].originals, R, cfg.eval.chunk)
        infer = sum(v["infer_seconds"] for v in report["summary"].values()) / len(report["summary"])
        rows.append({"resolution": R, "cd": mean_cd(report), "infer_seconds": infer, "peak_bytes": peak,
                     "summary": report["summary"], "seconds": time.perf_counter() - t0})
        print(f"R={R:3d}: CD {rows[-1]['cd']:.3f} mm  inference {infer:.2f} s/phantom  peak {peak / 1e6:.1f} MB")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"config": cfg.to_dict(), "rows": rows}, indent=2) + "\n")


if __name__ == "__main__":
    main()
