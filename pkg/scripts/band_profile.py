"""Per-band anomaly scores over each labeled anomaly, for the band-factorization check.

Level shifts should load the lowest band and spikes the highest one:

    python3 scripts/band_profile.py --root runs/benchmark
"""

import argparse
from pathlib import Path

from vqprior_ad.checkpoint import load_checkpoint
from vqprior_ad.data import generate_synthetic, read_manifest
from vqprior_ad.scoring import score_series


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--root", default="runs/benchmark")
    return p.parse_args()


def main():
    args = parse_args()
    root = Path(args.root)
    rows = []
    for spec in read_manifest(root / "manifest.txt"):
        models, cfg, _ = load_checkpoint(root / "checkpoints" / f"{spec.name}.pt")
        record = generate_synthetic(spec)
        b = score_series(record, models.tokenizer, models.prior, cfg.scoring)
        a0, a1 = record.anomaly_begin - b.offset, record.anomaly_end - b.offset
        bands = b.summed[:, a0 : a1 + 1].mean(axis=1)
        expect = {"level-shift": bands[0] > bands[-1], "spike": bands[-1] > bands[0]}.get(spec.kind)
        rows.append((spec.name, spec.kind, bands, expect))
        print(f"{spec.name:28s} " + " ".join(f"{v:7.2f}" for v in bands) + ("" if expect is None else f"  {expect}"))
    checked = [r[3] for r in rows if r[3] is not None]
    if checked:
        print(f"band ordering as expected on {sum(checked)}/{len(checked)} spike/level-shift series")
    with open(root / "band_profile.csv", "w", encoding="utf-8", newline="\n") as fh:
        H = len(rows[0][2])
        fh.write("dataset,kind," + ",".join(f"band_{h}" for h in range(H)) + "\n")
        for name, kind, bands, _ in rows:
            fh.write(f"{name},{kind}," + ",".join(f"{v:.6g}" for v in bands) + "\n")


if __name__ == "__main__":
    main()
