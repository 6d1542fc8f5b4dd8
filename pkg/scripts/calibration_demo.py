"""Recover the EM parameters from a q series by multiple shooting.

    python scripts/calibration_demo.py --noise 6e-4 --corners 8
"""

import argparse
import itertools

from thermoda.calibration import PARAM_NAMES, ShootingProblem, calibrate_staged
from thermoda.models import EmParams
from thermoda.nature import em_truth, observe


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--hours", type=float, default=4.0)
    ap.add_argument("--noise", type=float, default=0.0, help="observation noise std, kg/s")
    ap.add_argument("--offset", type=float, default=0.2, help="relative offset of the initial guesses")
    ap.add_argument("--corners", type=int, default=32, help="how many of the 32 guess corners to try")
    args = ap.parse_args(argv)

    true = EmParams()
    truth, _ = em_truth(true, args.hours * 3600.0)
    q = observe(truth, args.noise, seed=2) if args.noise > 0 else truth.q
    problem = ShootingProblem.from_series(truth.times, q, n_windows=6)
    print(f"{problem.n_windows} windows of {problem.window_samples} samples")
    print("corner  " + "  ".join(f"{n:>8s}" for n in PARAM_NAMES) + "   worst")
    for i, signs in enumerate(itertools.product((-1, 1), repeat=5)):
        if i >= args.corners:
            break
        guess = EmParams(*[getattr(true, n) * (1 + args.offset * s) for n, s in zip(PARAM_NAMES, signs)])
        res = calibrate_staged(problem, guess)
        rel = [getattr(res.params, n) / getattr(true, n) - 1 for n in PARAM_NAMES]
        print(f"{i:6d}  " + "  ".join(f"{r:+8.2%}" for r in rel) + f"  {max(map(abs, rel)):6.2%}")


if __name__ == "__main__":
    main()
