#!/usr/bin/env python3
"""Wall-time benchmarks of the fast PCM; writes bench_duration.csv and bench_setups.csv.

The CSVs are picked up by ``msbfft report --out DIR``.

    python scripts/bench.py --out results/ [--fd]
"""
import argparse
import csv
import os

from msbfft.studies import TIMING_RIDGE, bench_duration, bench_setups, time_fd_hessian, time_pcm, truth_theta
from msbfft.synth import preset_bands


def _write(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default=".")
    ap.add_argument("--durations-min", type=float, nargs="+", default=[5.0, 10.0, 20.0])
    ap.add_argument("--setups", type=int, nargs="+", default=[2, 4, 8])
    ap.add_argument("--fd", action="store_true", help="also time the full finite-difference Hessian (slow)")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)

    rows = bench_duration([d * 60.0 for d in args.durations_min])
    _write(os.path.join(args.out, "bench_duration.csv"), rows)
    for r in rows:
        print(f"duration {r['duration_s']:.0f}s  lines {r['n_lines']}  pcm {r['pcm_s']:.3f}s")
    rows = bench_setups(args.setups)
    _write(os.path.join(args.out, "bench_setups.csv"), rows)
    for r in rows:
        print(f"setups {r['n_setups']}  dofs {r['n_dofs']}  pcm {r['pcm_s']:.3f}s")
    if args.fd:
        model, _, bands = preset_bands(4, 300.0, 0)
        th = truth_theta(model, bands, TIMING_RIDGE)
        t_fast = time_pcm(th, bands)
        t_fd, _ = time_fd_hessian(th, bands)
        _write(os.path.join(args.out, "bench_fd.csv"),
               [dict(pcm_s=t_fast, fd_hessian_s=t_fd, speedup=t_fd / t_fast)])
        print(f"pcm {t_fast:.3f}s  FD Hessian {t_fd:.1f}s  speed-up {t_fd / t_fast:.0f}x")


if __name__ == "__main__":
    main()
