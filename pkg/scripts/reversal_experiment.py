"""Flow-reversal forecasts from an EKF experiment.

Runs the EKF at a 30 s window against either the surrogate loop or the EM
model itself, breeds along the analyses, and scores the three occurrence
tests and the residency forecasts on the second half of the cycles.

    python scripts/reversal_experiment.py --truth loop --retune
"""

import argparse
import json

from thermoda.breeding import growth_series
from thermoda.experiment import run_experiment
from thermoda.filters import FilterConfig
from thermoda.models import EmParams
from thermoda.nature import LoopConfig, em_truth, observe, simulate_truth
from thermoda.reversal import ReversalConfig, evaluate
from thermoda.verification import SkillReport, skill_table


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--truth", choices=["loop", "em"], default="loop")
    ap.add_argument("--cycles", type=int, default=5500)
    ap.add_argument("--retune", action="store_true", help="re-fit thresholds on the training half")
    ap.add_argument("--json", help="also write the full report here")
    args = ap.parse_args(argv)

    p = EmParams()
    window, spin = 30.0, 500
    duration = (spin + args.cycles + 1) * window + 10.0
    truth = simulate_truth(LoopConfig(), duration, seed=1) if args.truth == "loop" else em_truth(p, duration)[0]
    y = observe(truth, 6e-4, seed=3)
    res = run_experiment(truth, y, FilterConfig(window=window, filter_kind="ekf"), p, spin, args.cycles, 0)
    rec = res.records.slice(spin)
    rec.bv_growth = growth_series(rec, p)
    report = evaluate(rec, p, ReversalConfig(retune=args.retune))
    print(f"scaled background RMSE {res.scaled_bg_rmse:.3f}; "
          f"{report['events_train']} training and {report['events_test']} test reversals")
    rows = {k: SkillReport(t["ts"], t["far"], t["pod"], t["rps_avg"], t["rps_med"])
            for k, t in report["tests"].items()}
    print(skill_table(rows))
    for k, t in report["tests"].items():
        w = t["warning_times"]
        print(f"{k}: threshold {t['threshold']:.3f}, warning time mean {w['mean_s']:.0f} s, "
              f"median {w['median_s']:.0f} s")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(report, fh, indent=1, default=float)


if __name__ == "__main__":
    main()
