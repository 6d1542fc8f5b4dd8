"""
Command line interface.

    thermoda nature      --config C [--duration S] [--out PATH]
    thermoda assimilate  --config C --truth PATH [--filter K] [--window W]
    thermoda sweep       --config C --truth PATH [--workers N] [--filters ..] [--windows ..]
    thermoda breed       --config C --records PATH [--out PATH]
    thermoda reversal    --config C --records PATH --truth PATH [--tests lead,bv,corr]
    thermoda calibrate   --config C --truth PATH
    thermoda verify      (--report PATH | --table NAME=a,b,c,d ...)

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Outputs go under the config's ``output_dir``; ``THERMODA_OUTPUT_ROOT``
relocates it.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, seeding
from .breeding import growth_series
from .calibration import ShootingProblem, calibrate_staged
from .config import ConfigError, ExperimentConfig, load
from .experiment import (
    climatological_B,
    read_records_csv,
    run_experiment,
    threedvar_B_ladder,
    threedvar_estimate_B,
    write_records_csv,
)
from .filters import FILTER_KINDS, FilterConfig
from .models import EmParams, window_steps, MODEL_DT
from .nature import BlowUpError, TruthSeries, em_truth, observe, read_truth_csv, simulate_truth, write_truth_csv
from .reversal import TESTS, evaluate
from .verification import ContingencyTable, SkillReport, categorical_scores, skill_table

log = logging.getLogger("thermoda")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _stamp(cfg: ExperimentConfig) -> dict:
    return {"config_hash": cfg.hash(), "tool_version": __version__}


def make_truth(cfg: ExperimentConfig, duration_s: float) -> TruthSeries:
    """Truth series of the configured kind (surrogate loop or the EM model itself)."""
    if cfg.experiment.truth == "em":
        series, _ = em_truth(cfg.model, duration_s, cfg.nature.report_interval)
        return series
    return simulate_truth(cfg.nature, duration_s, seed=cfg.seed)


def make_observations(cfg: ExperimentConfig, truth: TruthSeries) -> np.ndarray:
    return observe(truth, cfg.experiment.obs_noise_std, seeding.stream(cfg.seed, seeding.OBSERVATION_NOISE))


def filter_config(cfg: ExperimentConfig, kind: str | None = None, window: float | None = None) -> FilterConfig:
    f = cfg.filter
    return FilterConfig(window=float(window if window is not None else f.window),
                        filter_kind=kind or f.kind, delta=f.delta, mu=f.mu,
                        obs_var=f.obs_error_std ** 2, ensemble_size=f.ensemble_size)


def _note_window(window: float, params: EmParams):
    n, dt = window_steps(window, params)
    if abs(dt - MODEL_DT) > 1e-12:
        log.info("window %g s -> %d model steps of %.5f (nominal step %.2f, %.3f s per step)", window, n,
                 dt, MODEL_DT, MODEL_DT * params.t_scale)


def _load_truth(path) -> TruthSeries:
    try:
        return read_truth_csv(path)
    except (OSError, ValueError) as err:
        raise UsageError(f"cannot read truth series {path}: {err}") from err


def _check_length(cfg, truth, window):
    from .experiment import required_samples

    need = required_samples(truth.interval, window, cfg.experiment.n_spinup + cfg.experiment.n_measure)
    if len(truth) < need:
        raise UsageError(f"truth series too short: {len(truth)} samples ({len(truth) * truth.interval:.0f} s); "
                         f"{need} samples ({need * truth.interval:.0f} s) are needed for "
                         f"{cfg.experiment.n_spinup}+{cfg.experiment.n_measure} cycles of {window:g} s")


# ---------------------------------------------------------------------------
# subcommands


def cmd_nature(cfg: ExperimentConfig, duration: float | None = None, out=None) -> Path:
    duration = cfg.required_duration() if duration is None else float(duration)
    truth = make_truth(cfg, duration)
    path = Path(out) if out else cfg.output_root / "truth.csv"
    write_truth_csv(truth, path, extra_meta={**_stamp(cfg), "truth_kind": cfg.experiment.truth})
    log.info("wrote %d samples to %s", len(truth), path)
    return path


def _estimate_B(cfg: ExperimentConfig, truth, obs, window: float, ladder: bool):
    B0 = climatological_B(cfg.model)
    kw = dict(max_iter=cfg.sweep.b_max_iter, tol=cfg.sweep.b_tol, n_spinup=cfg.experiment.n_spinup,
              n_measure=cfg.experiment.n_measure, seed=cfg.seed)
    if ladder:
        kw["obs_var"] = cfg.filter.obs_error_std ** 2
        windows = sorted(w for w in cfg.sweep.windows if w <= window)
        if not windows or windows[-1] != window:
            windows.append(window)
        return threedvar_B_ladder(truth, obs, windows, cfg.model, B0, **kw)[window].B
    return threedvar_estimate_B(truth, obs, filter_config(cfg, "threedvar", window), cfg.model, B0, **kw).B


def _summary(cfg, res, kind, window, truth_path):
    return {"filter": kind, "window_s": window, "scaled_bg_rmse": res.scaled_bg_rmse,
            "scaled_an_rmse": res.scaled_an_rmse, "climatology_kg_s": res.climatology,
            "diverged": res.diverged, "message": res.message, "n_spinup": cfg.experiment.n_spinup,
            "n_measure": cfg.experiment.n_measure, "seed": cfg.seed,
            "truth_sha256": file_sha256(truth_path), **_stamp(cfg)}


def cmd_assimilate(cfg: ExperimentConfig, truth_path, kind: str | None = None, window: float | None = None,
                   out_dir=None) -> dict:
    kind = kind or cfg.filter.kind
    if kind not in FILTER_KINDS:
        raise UsageError(f"unknown filter kind {kind!r}; expected one of {', '.join(FILTER_KINDS)}")
    window = float(window if window is not None else cfg.filter.window)
    truth = _load_truth(truth_path)
    _check_length(cfg, truth, window)
    _note_window(window, cfg.model)
    obs = make_observations(cfg, truth)
    B = _estimate_B(cfg, truth, obs, window, ladder=False) if kind == "threedvar" else None
    res = run_experiment(truth, obs, filter_config(cfg, kind, window), cfg.model, cfg.experiment.n_spinup,
                         cfg.experiment.n_measure, cfg.seed, B=B)
    out = Path(out_dir) if out_dir else cfg.output_root
    stem = f"{kind}_{window:g}s"
    write_records_csv(res.records, out / f"records_{stem}.csv")
    summary = _summary(cfg, res, kind, window, truth_path)
    if B is not None:
        summary["B"] = B.tolist()
    write_json(out / f"summary_{stem}.json", summary)
    return summary


def _cell_key(cfg, truth_sha, kind, window, B):
    payload = json.dumps({"config": cfg.hash(), "truth": truth_sha, "filter": kind, "window": window,
                          "B": None if B is None else np.asarray(B).round(15).tolist(),
                          "version": __version__}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def _run_cell(args):
    cfg, truth_path, kind, window, B, key, cell_path = args
    try:
        truth = read_truth_csv(truth_path)
        obs = make_observations(cfg, truth)
        res = run_experiment(truth, obs, filter_config(cfg, kind, window), cfg.model, cfg.experiment.n_spinup,
                             cfg.experiment.n_measure, cfg.seed, B=B)
        out = {"filter": kind, "window_s": window, "scaled_bg_rmse": res.scaled_bg_rmse,
               "diverged": res.diverged, "message": res.message, "ok": True}
    except Exception as err:  # recorded per cell; the sweep carries on
        out = {"filter": kind, "window_s": window, "scaled_bg_rmse": float("nan"), "diverged": False,
               "message": f"{type(err).__name__}: {err}", "ok": False}
    out.update({"checksum": key, "config_hash": cfg.hash(), "tool_version": __version__})
    write_json(cell_path, out)
    return out


def cmd_sweep(cfg: ExperimentConfig, truth_path, filters=None, windows=None, workers=None) -> Path:
    filters = list(filters or cfg.sweep.filters)
    windows = [float(w) for w in (windows or cfg.sweep.windows)]
    bad = [k for k in filters if k not in FILTER_KINDS]
    if bad:
        raise UsageError(f"unknown filter kind(s): {', '.join(bad)}")
    truth = _load_truth(truth_path)
    _check_length(cfg, truth, max(windows))
    truth_sha = file_sha256(truth_path)
    out = cfg.output_root / "sweep"
    cells_dir = out / "cells"

    Bs = {}
    if "threedvar" in filters:
        B_path = out / "threedvar_B.json"
        B_key = _cell_key(cfg, truth_sha, "threedvar-B", windows, None)
        cached = json.loads(B_path.read_text()) if B_path.exists() else None
        if cached and cached.get("checksum") == B_key:
            Bs = {float(w): np.array(b) for w, b in cached["B"].items()}
        else:
            obs = make_observations(cfg, truth)
            ladder = threedvar_B_ladder(truth, obs, windows, cfg.model, climatological_B(cfg.model),
                                        max_iter=cfg.sweep.b_max_iter, tol=cfg.sweep.b_tol,
                                        n_spinup=cfg.experiment.n_spinup, n_measure=cfg.experiment.n_measure,
                                        seed=cfg.seed, obs_var=cfg.filter.obs_error_std ** 2)
            Bs = {w: est.B for w, est in ladder.items()}
            write_json(B_path, {"checksum": B_key, "B": {repr(w): b.tolist() for w, b in Bs.items()},
                                "converged": {repr(w): est.converged for w, est in ladder.items()},
                                **_stamp(cfg)})

    jobs, results = [], []
    for kind in filters:
        for w in windows:
            B = Bs.get(w) if kind == "threedvar" else None
            key = _cell_key(cfg, truth_sha, kind, w, B)
            cell_path = cells_dir / f"{kind}_{w:g}s.json"
            if cell_path.exists():
                try:
                    prev = json.loads(cell_path.read_text())
                except ValueError:
                    prev = {}
                if prev.get("checksum") == key and prev.get("ok"):
                    results.append(prev)
                    continue
            jobs.append((cfg, str(truth_path), kind, w, B, key, cell_path))
    log.info("sweep: %d cells to run, %d reused", len(jobs), len(results))
    n_workers = workers or cfg.sweep.workers or os.cpu_count() or 1
    if jobs:
        if n_workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=n_workers) as pool:
                results.extend(pool.map(_run_cell, jobs))
        else:
            results.extend(map(_run_cell, jobs))
    order = {k: i for i, k in enumerate(FILTER_KINDS)}
    results.sort(key=lambda r: (order.get(r["filter"], 99), r["filter"], float(r["window_s"])))
    csv_path = out / "sweep.csv"
    with open(csv_path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["filter", "window_s", "scaled_bg_rmse"])
        for r in results:
            wr.writerow([r["filter"], f"{float(r['window_s']):g}", repr(float(r["scaled_bg_rmse"]))])
    failed = [r for r in results if not r.get("ok")]
    for r in failed:
        log.error("cell %s/%gs failed: %s", r["filter"], r["window_s"], r["message"])
    return csv_path


def cmd_breed(cfg: ExperimentConfig, records_path, out=None) -> Path:
    rec = read_records_csv(records_path)
    rec.bv_growth = growth_series(rec, cfg.model, rescale_amplitude=cfg.breeding.rescale_amplitude)
    path = Path(out) if out else Path(records_path)
    write_records_csv(rec, path)
    return path


def cmd_reversal(cfg: ExperimentConfig, records_path, truth_path, tests=TESTS, out=None) -> dict:
    rec = read_records_csv(records_path)
    truth = _load_truth(truth_path)
    idx = np.rint(rec.t_s / truth.interval).astype(int)
    if idx.max() >= len(truth) or np.any(np.abs(idx * truth.interval - rec.t_s) > 1e-6 * truth.interval):
        raise UsageError(f"analysis records (cycles up to t = {rec.t_s.max():.0f} s) do not line up with "
                         f"the truth series ({len(truth)} samples every {truth.interval:g} s)")
    if not np.allclose(truth.q[idx], rec.q_truth, rtol=1e-9, atol=1e-12):
        raise UsageError("truth values in the analysis records differ from the truth series")
    growth = rec.bv_growth
    if "bv" in tests and np.all(np.isnan(growth)):
        log.info("no bred-vector growth in %s; breeding now", records_path)
        growth = growth_series(rec, cfg.model, rescale_amplitude=cfg.breeding.rescale_amplitude)
    report = evaluate(rec, cfg.model, cfg.reversal, tuple(tests), growth)
    report.update({"records_sha256": file_sha256(records_path), "truth_sha256": file_sha256(truth_path),
                   **_stamp(cfg)})
    path = Path(out) if out else cfg.output_root / f"reversal_{Path(records_path).stem}.json"
    write_json(path, report)
    print(render_report(report))
    return report


def cmd_calibrate(cfg: ExperimentConfig, truth_path, out=None) -> dict:
    truth = _load_truth(truth_path)
    c = cfg.calibration
    guess = replace(cfg.model, **c.guess) if c.guess else cfg.model
    problem = ShootingProblem.from_series(truth.times, truth.q, c.n_periods, c.n_windows, c.lambda_cont)
    res = calibrate_staged(problem, guess, max_iter=c.max_iter)
    out_d = {**res.to_dict(), "n_windows": problem.n_windows, "window_samples": problem.window_samples,
             "guess": guess.to_dict(), "truth_sha256": file_sha256(truth_path), **_stamp(cfg)}
    write_json(Path(out) if out else cfg.output_root / "calibration.json", out_d)
    return out_d


def render_report(report: dict) -> str:
    rows = {}
    order = {t: i for i, t in enumerate(TESTS)}
    for name, t in sorted(report["tests"].items(), key=lambda kv: order.get(kv[0], len(order))):
        rows[name] = SkillReport(t["ts"], t["far"], t["pod"], t.get("rps_avg"), t.get("rps_med"))
    return skill_table(rows)


def cmd_verify(report_path=None, tables=()) -> str:
    if report_path:
        try:
            report = json.loads(Path(report_path).read_text())
        except (OSError, ValueError) as err:
            raise UsageError(f"cannot read report {report_path}: {err}") from err
        text = render_report(report)
    else:
        rows = {}
        for item in tables:
            try:
                name, vals = item.split("=")
                a, b, c_, d = (int(v) for v in vals.split(","))
            except ValueError as err:
                raise UsageError(f"--table expects NAME=a,b,c,d, got {item!r}") from err
            rows[name] = SkillReport(*categorical_scores(ContingencyTable(a, b, c_, d)))
        if not rows:
            raise UsageError("verify needs --report or at least one --table")
        text = skill_table(rows)
    print(text)
    return text


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    p = argparse.ArgumentParser(prog="thermoda", description=__doc__.split("\n\n")[0].strip(),
                                parents=[common])
    sub = p.add_subparsers(dest="command", required=True)
    _add = sub.add_parser
    sub.add_parser = lambda *a, **k: _add(*a, parents=[common], **k)

    def with_config(sp):
        sp.add_argument("--config", required=True, help="YAML experiment configuration")
        return sp

    s = with_config(sub.add_parser("nature", help="generate the truth series"))
    s.add_argument("--duration", type=float, help="reported length in seconds")
    s.add_argument("--out")

    s = with_config(sub.add_parser("assimilate", help="run one filter at one window"))
    s.add_argument("--truth", required=True)
    s.add_argument("--filter")
    s.add_argument("--window", type=float)
    s.add_argument("--out-dir")

    s = with_config(sub.add_parser("sweep", help="filters x windows matrix"))
    s.add_argument("--truth", required=True)
    s.add_argument("--filters", type=lambda v: v.split(","))
    s.add_argument("--windows", type=lambda v: [float(x) for x in v.split(",")])
    s.add_argument("--workers", type=int)

    s = with_config(sub.add_parser("breed", help="add bred-vector growth to analysis records"))
    s.add_argument("--records", required=True)
    s.add_argument("--out")

    s = with_config(sub.add_parser("reversal", help="reversal tests and residency forecasts"))
    s.add_argument("--records", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--tests", default=",".join(TESTS), type=lambda v: [t for t in v.split(",") if t])
    s.add_argument("--out")

    s = with_config(sub.add_parser("calibrate", help="multiple-shooting parameter fit"))
    s.add_argument("--truth", required=True)
    s.add_argument("--out")

    s = sub.add_parser("verify", help="render skill scores")
    s.add_argument("--report")
    s.add_argument("--table", action="append", default=[], help="NAME=a,b,c,d")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse exits 2 on usage errors
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "verify":
            cmd_verify(args.report, args.table)
            return 0
        cfg = load(args.config)
        if args.command == "nature":
            print(cmd_nature(cfg, args.duration, args.out))
        elif args.command == "assimilate":
            s = cmd_assimilate(cfg, args.truth, args.filter, args.window, args.out_dir)
            print(json.dumps({k: s[k] for k in ("filter", "window_s", "scaled_bg_rmse", "diverged")}))
            if s["diverged"]:
                return 1
        elif args.command == "sweep":
            print(cmd_sweep(cfg, args.truth, args.filters, args.windows, args.workers))
        elif args.command == "breed":
            print(cmd_breed(cfg, args.records, args.out))
        elif args.command == "reversal":
            bad = [t for t in args.tests if t not in TESTS]
            if bad:
                raise UsageError(f"unknown test(s): {', '.join(bad)}; expected {', '.join(TESTS)}")
            cmd_reversal(cfg, args.records, args.truth, args.tests, args.out)
        elif args.command == "calibrate":
            r = cmd_calibrate(cfg, args.truth, args.out)
            print(json.dumps(r["params"]))
            if not r["converged"]:
                return 1
    except (ConfigError, UsageError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (BlowUpError, RuntimeError, ValueError, ArithmeticError, OSError, np.linalg.LinAlgError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
