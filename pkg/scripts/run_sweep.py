"""Scaled background RMSE of every filter against the assimilation window.

Generates the surrogate truth, estimates the 3D-Var background covariance
window by window (each estimate seeding the next), runs all four filters at
every window, and writes ``filter,window_s,scaled_bg_rmse`` rows.

    python scripts/run_sweep.py --out runs/sweep.csv
"""

import argparse
import csv
import time
from pathlib import Path

from thermoda.experiment import climatological_B, run_experiment, threedvar_B_ladder
from thermoda.filters import FILTER_KINDS, FilterConfig
from thermoda.models import EmParams
from thermoda.nature import LoopConfig, observe, simulate_truth


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--windows", type=float, nargs="+", default=[float(w) for w in range(30, 601, 30)])
    ap.add_argument("--filters", nargs="+", default=list(FILTER_KINDS))
    ap.add_argument("--n-spinup", type=int, default=500)
    ap.add_argument("--n-measure", type=int, default=2500)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--out", default="runs/sweep.csv")
    args = ap.parse_args(argv)

    p = EmParams()
    t0 = time.time()
    n_cycles = args.n_spinup + args.n_measure + 1
    truth = simulate_truth(LoopConfig(), n_cycles * max(args.windows) + 10.0, seed=args.seed)
    y = observe(truth, 6e-4, seed=args.seed + 4)
    print(f"truth: {len(truth)} samples in {time.time() - t0:.0f} s")

    ladder = {}
    if "threedvar" in args.filters:
        ladder = threedvar_B_ladder(truth, y, args.windows, p, climatological_B(p),
                                    n_spinup=args.n_spinup, n_measure=args.n_measure)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["filter", "window_s", "scaled_bg_rmse"])
        for kind in args.filters:
            row = []
            for w in args.windows:
                B = ladder[w].B if kind == "threedvar" else None
                res = run_experiment(truth, y, FilterConfig(window=w, filter_kind=kind), p,
                                     args.n_spinup, args.n_measure, args.seed, B=B)
                wr.writerow([kind, f"{w:g}", repr(res.scaled_bg_rmse)])
                row.append(res.scaled_bg_rmse)
            print(kind, " ".join(f"{v:.3f}" for v in row))
    print(f"wrote {out} ({time.time() - t0:.0f} s)")


if __name__ == "__main__":
    main()
