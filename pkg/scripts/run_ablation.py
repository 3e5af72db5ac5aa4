"""Run the full pipeline over several seeds and collect one ablation table.

    python scripts/run_ablation.py --seeds 0 1 2 3 4 --out runs/ablation
"""

import argparse
import time
from pathlib import Path

from apodistill.config import load_config
from apodistill.io import export_metrics, read_metrics
from apodistill.pipeline import run_pipeline


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()

    rows = []
    for seed in args.seeds:
        cfg = load_config(args.config)
        cfg.seed = seed
        cfg.run_dir = str(Path(args.out) / f"seed{seed}")
        t0 = time.perf_counter()
        res = run_pipeline(cfg.validate())
        best = max(float(t["macro_acc"]) for t in read_metrics(res.run_dir / "teachers.csv"))
        for r in res.rows:
            rows.append({"seed": seed, "ablation": r["ablation"], "macro_acc": r["macro_acc"], "best_teacher": best})
        line = "  ".join(f"{r['ablation']}={r['macro_acc']:.3f}" for r in res.rows)
        print(f"seed {seed}: {line}  best teacher={best:.3f}  ({time.perf_counter() - t0:.1f}s)")
    out = Path(args.out) / "ablation.csv"
    export_metrics(rows, out, keys=["seed", "ablation", "macro_acc", "best_teacher"])
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
