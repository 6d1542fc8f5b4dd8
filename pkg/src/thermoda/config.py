"""
Experiment configuration: one YAML file with nested sections, validated
into dataclasses.  Unknown keys are rejected; the physical keys of the
``nature`` section are required.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .filters import FILTER_KINDS, OBS_NOISE_STD
from .models import EmParams
from .nature import LoopConfig
from .reversal import ReversalConfig

OUTPUT_ROOT_ENV = "THERMODA_OUTPUT_ROOT"

NATURE_REQUIRED = ("R", "r", "T_h", "T_c", "g", "gamma", "nu", "kappa", "rho0", "c_p", "h_w0",
                   "f_w0", "k_coeff_true")


class ConfigError(ValueError):
    """Invalid configuration (exit code 2 on the command line)."""


@dataclass
class FilterSection:
    kind: str = "ekf"
    window: float = 30.0
    delta: float | None = None  # None: per-window table default
    mu: float | None = None
    obs_error_std: float = OBS_NOISE_STD  # assumed observation error (kg/s)
    ensemble_size: int = 10


@dataclass
class ExperimentSection:
    truth: str = "loop"  # "loop" (surrogate nature run) or "em" (perfect model)
    obs_noise_std: float = OBS_NOISE_STD  # noise actually added to the truth (kg/s)
    n_spinup: int = 500
    n_measure: int = 2500
    duration_s: float | None = None  # default: enough for the longest sweep window


@dataclass
class SweepSection:
    filters: list = field(default_factory=lambda: list(FILTER_KINDS))
    windows: list = field(default_factory=lambda: list(range(30, 601, 30)))
    workers: int | None = None  # default: number of processors
    b_max_iter: int = 20
    b_tol: float = 1e-2


@dataclass
class BreedingSection:
    rescale_amplitude: float = 1e-3


@dataclass
class CalibrationSection:
    n_windows: int = 6
    n_periods: float = 2.0
    lambda_cont: float = 10.0
    max_iter: int = 200
    guess: dict | None = None  # EmParams fields; default: the model section


@dataclass
class ExperimentConfig:
    nature: LoopConfig
    model: EmParams = field(default_factory=EmParams)
    filter: FilterSection = field(default_factory=FilterSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    breeding: BreedingSection = field(default_factory=BreedingSection)
    reversal: ReversalConfig = field(default_factory=ReversalConfig)
    calibration: CalibrationSection = field(default_factory=CalibrationSection)
    seed: int = 0
    output_dir: str = "runs/default"
    raw: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def output_root(self) -> Path:
        """``output_dir``, relocated under ``$THERMODA_OUTPUT_ROOT`` when that is set."""
        root = os.environ.get(OUTPUT_ROOT_ENV)
        out = Path(self.output_dir)
        if root:
            out = Path(root) / (out.name if out.is_absolute() else out)
        return out

    def hash(self) -> str:
        """Stable hash of the validated configuration (the output location excluded)."""
        payload = {k: v for k, v in to_dict(self).items() if k != "output_dir"}
        text = json.dumps(payload, sort_keys=True, default=str)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def required_duration(self, window: float | None = None) -> float:
        e = self.experiment
        if e.duration_s is not None:
            return float(e.duration_s)
        w = window if window is not None else max([self.filter.window, *self.sweep.windows])
        return (e.n_spinup + e.n_measure) * float(w) + self.nature.report_interval


def _build(cls, data, section: str, required=()):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"section '{section}' must be a mapping")
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {', '.join(unknown)}")
    missing = [k for k in required if k not in data]
    if missing:
        raise ConfigError(f"missing required key(s) in '{section}': {', '.join(missing)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid '{section}' section: {err}") from err


def from_dict(d: dict) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("configuration must be a mapping")
    top = {f.name for f in dataclasses.fields(ExperimentConfig) if f.name != "raw"}
    unknown = sorted(set(d) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    if "nature" not in d:
        raise ConfigError("missing required section 'nature'")
    nature = _build(LoopConfig, d["nature"], "nature", NATURE_REQUIRED)
    filt = _build(FilterSection, d.get("filter"), "filter")
    if filt.kind not in FILTER_KINDS:
        raise ConfigError(f"unknown filter kind {filt.kind!r}; expected one of {', '.join(FILTER_KINDS)}")
    exp = _build(ExperimentSection, d.get("experiment"), "experiment")
    if exp.truth not in ("loop", "em"):
        raise ConfigError("experiment.truth must be 'loop' or 'em'")
    sweep = _build(SweepSection, d.get("sweep"), "sweep")
    bad = [k for k in sweep.filters if k not in FILTER_KINDS]
    if bad:
        raise ConfigError(f"unknown filter kind(s) in sweep: {', '.join(map(str, bad))}")
    rev = d.get("reversal") or {}
    if isinstance(rev, dict) and "typical_minutes" in rev:
        rev = {**rev, "typical_minutes": tuple(rev["typical_minutes"])}
    cfg = ExperimentConfig(
        nature=nature,
        model=_build(EmParams, d.get("model"), "model"),
        filter=filt,
        experiment=exp,
        sweep=sweep,
        breeding=_build(BreedingSection, d.get("breeding"), "breeding"),
        reversal=_build(ReversalConfig, rev, "reversal"),
        calibration=_build(CalibrationSection, d.get("calibration"), "calibration"),
        seed=int(d.get("seed", 0)),
        output_dir=str(d.get("output_dir", "runs/default")),
        raw=d,
    )
    return cfg


def load(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError(f"{path} is not valid YAML: {err}") from err
    return from_dict(data or {})


def to_dict(cfg: ExperimentConfig) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        if f.name == "raw":
            continue
        v = getattr(cfg, f.name)
        out[f.name] = dataclasses.asdict(v) if dataclasses.is_dataclass(v) else v
    if isinstance(out["reversal"].get("typical_minutes"), tuple):
        out["reversal"]["typical_minutes"] = list(out["reversal"]["typical_minutes"])
    return out


def dump(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)
