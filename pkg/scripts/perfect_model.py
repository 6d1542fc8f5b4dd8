"""Perfect-model control: the EM model assimilates its own noise-free output.

    python scripts/perfect_model.py
"""

import argparse

from thermoda.experiment import climatological_B, run_experiment, threedvar_estimate_B
from thermoda.filters import FILTER_KINDS, FilterConfig
from thermoda.models import EmParams
from thermoda.nature import em_truth, observe


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--window", type=float, default=30.0)
    ap.add_argument("--n-spinup", type=int, default=500)
    ap.add_argument("--n-measure", type=int, default=2500)
    ap.add_argument("--obs-noise", type=float, default=0.0)
    args = ap.parse_args(argv)

    p = EmParams()
    n = args.n_spinup + args.n_measure + 1
    truth, _ = em_truth(p, n * args.window + 10.0)
    y = observe(truth, args.obs_noise, seed=0)
    B = threedvar_estimate_B(truth, y, FilterConfig(window=args.window, filter_kind="threedvar"), p,
                             climatological_B(p), max_iter=5, n_spinup=args.n_spinup,
                             n_measure=args.n_measure).B
    for kind in FILTER_KINDS:
        light = {} if kind in ("threedvar", "ekf") else {"delta": 0.05, "mu": 0.01}
        res = run_experiment(truth, y, FilterConfig(window=args.window, filter_kind=kind, **light), p,
                             args.n_spinup, args.n_measure, 0, B=B if kind == "threedvar" else None)
        print(f"{kind:10s} scaled background RMSE {res.scaled_bg_rmse:.3e}")


if __name__ == "__main__":
    main()
