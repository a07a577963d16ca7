"""Scoring time against detection accuracy for several rolling-stride rates.

Reads the checkpoints written by ``run_synthetic_benchmark.py``:

    python3 scripts/stride_tradeoff.py --root runs/benchmark --rates 0.05 0.1 0.3 0.5 1.0
"""

import argparse
import dataclasses
import time
from pathlib import Path

import numpy as np

from vqprior_ad.checkpoint import load_checkpoint
from vqprior_ad.data import generate_synthetic, read_manifest
from vqprior_ad.evaluation import topk_correct
from vqprior_ad.scoring import score_series


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--root", default="runs/benchmark")
    p.add_argument("--rates", type=float, nargs="+", default=[0.05, 0.1, 0.3, 0.5, 1.0])
    p.add_argument("--csv", default=None, help="output CSV (default <root>/stride_tradeoff.csv)")
    return p.parse_args()


def main():
    args = parse_args()
    root = Path(args.root)
    specs = read_manifest(root / "manifest.txt")
    loaded = []
    for spec in specs:
        models, cfg, _ = load_checkpoint(root / "checkpoints" / f"{spec.name}.pt")
        loaded.append((generate_synthetic(spec), models, cfg))
    rows = []
    for rate in args.rates:
        seconds, hits1, hits3 = 0.0, [], []
        for record, models, cfg in loaded:
            scoring = dataclasses.replace(cfg.scoring, stride_rate=rate)
            t0 = time.perf_counter()
            b = score_series(record, models.tokenizer, models.prior, scoring)
            seconds += time.perf_counter() - t0
            interval = (record.anomaly_begin, record.anomaly_end)
            hits1.append(topk_correct(b.final, 1, interval, b.offset))
            hits3.append(topk_correct(b.final, 3, interval, b.offset))
        rows.append((rate, seconds, float(np.mean(hits1)), float(np.mean(hits3))))
        print(f"r_stride={rate:<5} time={seconds:7.1f}s top1={rows[-1][2]:.3f} top3={rows[-1][3]:.3f}", flush=True)
    out = Path(args.csv) if args.csv else root / "stride_tradeoff.csv"
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("stride_rate,score_seconds,top1,top3\n")
        for r in rows:
            fh.write(f"{r[0]},{r[1]:.3f},{r[2]:.4f},{r[3]:.4f}\n")


if __name__ == "__main__":
    main()
