#!/usr/bin/env python3
"""Mode-shape uncertainty against per-setup duration (median over seeds).

    python scripts/duration_scaling.py --seeds 4 --durations-min 15 30 --out scaling.csv
"""
import argparse
import csv

import numpy as np

from msbfft.studies import recovery_run


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, default=4)
    ap.add_argument("--durations-min", type=float, nargs="+", default=[15.0, 30.0])
    ap.add_argument("--out", default="scaling.csv")
    args = ap.parse_args()

    med = {}
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["duration_min", "seed", "pcm_ok", "mode", "shape_uncertainty"])
        for d in args.durations_min:
            got = []
            for seed in range(args.seeds):
                o = recovery_run(seed, 4, d * 60.0)
                for i, u in enumerate(o["shape_uncertainty"]):
                    w.writerow([d, seed, int(o["pcm_ok"]), i + 1, f"{u:.8e}"])
                if o["pcm_ok"]:
                    got.append(o["shape_uncertainty"])
                fh.flush()
            med[d] = np.median(got, axis=0) if got else None
            print(f"{d} min: PCM for {len(got)}/{args.seeds} seeds, median uncertainty "
                  f"{None if med[d] is None else np.round(med[d], 4)}", flush=True)
    ds = args.durations_min
    for a, b in zip(ds, ds[1:]):
        if med[a] is not None and med[b] is not None:
            print(f"ratio {a}/{b} min: {np.round(med[a] / med[b], 3)}")


if __name__ == "__main__":
    main()
