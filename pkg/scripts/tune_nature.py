"""Scan the surrogate loop's model-error knobs and report truth statistics.

The fluid and heat-transfer coefficients are solved so that the loop's
first-mode reduction equals the reference EM parameters; the thermal
diffusivity is then set from the target Rayleigh number.  For each value of
the quadratic friction coefficient the script integrates a truth run and
prints its climatology, oscillation period and reversal rate.  The
``LoopConfig`` defaults were pinned from this scan.

    python scripts/tune_nature.py --hours 24 --c-quad 0 0.02 0.05 0.1
"""

import argparse
import math
from dataclasses import replace

import numpy as np

from thermoda.models import EmParams
from thermoda.nature import climatology, em_equivalent, loop_config_for_em, rayleigh, simulate_truth
from thermoda.reversal import detect_truth_reversals, segment_oscillations


def kappa_for_rayleigh(c, ra):
    return 8.0 * c.g * c.gamma * c.r ** 3 * c.delta_T / (c.nu * ra)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--hours", type=float, default=24.0)
    ap.add_argument("--rayleigh", type=float, default=1.5e5)
    ap.add_argument("--c-quad", type=float, nargs="+", default=[0.0, 0.02, 0.05, 0.1])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    p = EmParams()
    for geometry in ("2d", "3d"):
        c = loop_config_for_em(p, geometry=geometry)
        print(f"{geometry} geometry: rho0 = {c.rho0:.1f} kg/m^3, h_w0 = {c.h_w0:.1f}, g = {c.g:.5f}")
    base = loop_config_for_em(p)
    base = replace(base, kappa=kappa_for_rayleigh(base, args.rayleigh))
    print(f"kappa = {base.kappa:.6e} m^2/s gives Ra = {rayleigh(base):.3e}")
    print(f"first-mode EM parameters: {em_equivalent(base)}")

    print(f"{'c_quad':>7} {'clim kg/s':>10} {'period min':>10} {'reversals/h':>12}")
    for cq in args.c_quad:
        c = replace(base, c_quad=cq)
        truth = simulate_truth(c, args.hours * 3600.0, seed=args.seed)
        x1 = truth.q / p.q_scale
        segs = segment_oscillations(x1)
        period = np.median([(s.end - s.start) * truth.interval / 60.0 for s in segs]) if segs else math.nan
        n_rev = len(detect_truth_reversals(truth.q))
        print(f"{cq:7.3f} {climatology(truth.q):10.5f} {period:10.1f} {n_rev / args.hours:12.2f}")


if __name__ == "__main__":
    main()
