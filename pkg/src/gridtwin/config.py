"""Declarative experiment configuration (YAML) for ``gridtwin twin``.

Schema, with defaults::

    case_path: fixtures/ieee9.case     # required; relative to the config file
    output_dir: out/ieee9              # relative to the config file
    seed: 0                            # default for every stochastic stage
    fluctuation:
      relative_sigma: 0.02
      background_sigma: 0.005
      artificial_noise_sigma: 1.0e-6
      samples: 9600
      seed: <seed>
      tolerance: 1.0e-10               # per-sample power-flow tolerance
    lse_windows: [240, 4800]           # consecutive windows from sample 0
    outliers: {threshold: 5.0, max_outliers: 50}
    corruption: null                   # branch edit applied to the benchmark description
    correction: null                   # branch edit applied on top of the corruption
    mlp:
      enabled: false
      layer_sizes: null                # default [p, 50, 50, 50, p]
      train_range: [0, 8400]
      test_range: [8400, 9600]
      epochs: 200
      batch_size: 64
      learning_rate: 1.0e-3
      optimizer: adam
      seed: <seed>
      monitored: [P5, P7, P9]
    analytics:
      enabled: true
      num_factors: auto                # or an integer
      scaling: two-way                 # or robust, rows
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import BranchEditError, ConfigError
from .estimation import OutlierRule
from .network import BranchEdit, edit_from_dict
from .neural import TrainConfig
from .telemetry import FluctuationConfig


@dataclass(frozen=True)
class MlpConfig:
    enabled: bool = False
    layer_sizes: tuple[int, ...] | None = None
    train: TrainConfig = TrainConfig()
    monitored: tuple[str, ...] = ("P5", "P7", "P9")


@dataclass(frozen=True)
class AnalyticsConfig:
    enabled: bool = True
    num_factors: int | None = None
    scaling: str = "two-way"


@dataclass(frozen=True)
class ExperimentConfig:
    case_path: Path
    output_dir: Path
    fluctuation: FluctuationConfig = FluctuationConfig()
    pf_tolerance: float = 1e-10
    lse_windows: tuple[int, ...] = (240, 4800)
    outliers: OutlierRule = OutlierRule()
    corruption: BranchEdit | None = None
    correction: BranchEdit | None = None
    mlp: MlpConfig = MlpConfig()
    analytics: AnalyticsConfig = AnalyticsConfig()
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    def seeds(self) -> dict:
        out = {"fluctuation": self.fluctuation.seed}
        if self.mlp.enabled:
            out["mlp"] = self.mlp.train.seed
        return out

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(
            self,
            fluctuation=dataclasses.replace(self.fluctuation, seed=seed),
            mlp=dataclasses.replace(self.mlp,
                                    train=dataclasses.replace(self.mlp.train, seed=seed)))

    def with_output(self, output_dir) -> "ExperimentConfig":
        return dataclasses.replace(self, output_dir=Path(output_dir))


_TOP = {"case_path", "output_dir", "seed", "fluctuation", "lse_windows", "outliers",
        "corruption", "correction", "mlp", "analytics"}


def _section(doc: dict, name: str, allowed: set[str]) -> dict:
    sec = doc.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"{name}: expected a mapping")
    unknown = set(sec) - allowed
    if unknown:
        raise ConfigError(f"{name}: unknown keys {sorted(unknown)}")
    return sec


def _range(value, name) -> tuple[int, int]:
    if not (isinstance(value, (list, tuple)) and len(value) == 2):
        raise ConfigError(f"{name} must be a [start, stop) pair")
    return int(value[0]), int(value[1])


def _edit(spec, name):
    if spec is None:
        return None
    if not isinstance(spec, dict):
        raise ConfigError(f"{name}: expected a mapping")
    try:
        return edit_from_dict(spec)
    except BranchEditError as exc:
        raise ConfigError(f"{name}: {exc}") from None


def config_from_dict(doc: dict, base_dir=".") -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a mapping")
    unknown = set(doc) - _TOP
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    if "case_path" not in doc:
        raise ConfigError("case_path is required")
    base = Path(base_dir)
    seed = int(doc.get("seed", 0))
    try:
        fl = _section(doc, "fluctuation", {"relative_sigma", "background_sigma",
                                           "artificial_noise_sigma", "samples", "seed",
                                           "tolerance"})
        fluct = FluctuationConfig(
            relative_sigma=float(fl.get("relative_sigma", 0.02)),
            artificial_noise_sigma=float(fl.get("artificial_noise_sigma", 1e-6)),
            seed=int(fl.get("seed", seed)),
            samples=int(fl.get("samples", 9600)),
            background_sigma=float(fl.get("background_sigma", 5e-3)))
        ol = _section(doc, "outliers", {"threshold", "max_outliers"})
        rule = OutlierRule(float(ol.get("threshold", 5.0)), ol.get("max_outliers", 50))
        ml = _section(doc, "mlp", {"enabled", "layer_sizes", "train_range", "test_range",
                                   "epochs", "batch_size", "learning_rate", "optimizer",
                                   "seed", "monitored"})
        train = TrainConfig(
            train_range=_range(ml.get("train_range", [0, 8400]), "mlp.train_range"),
            test_range=_range(ml.get("test_range", [8400, 9600]), "mlp.test_range"),
            epochs=int(ml.get("epochs", 200)),
            batch_size=int(ml.get("batch_size", 64)),
            learning_rate=float(ml.get("learning_rate", 1e-3)),
            seed=int(ml.get("seed", seed)),
            optimizer=str(ml.get("optimizer", "adam")))
        sizes = ml.get("layer_sizes")
        mlp = MlpConfig(bool(ml.get("enabled", False)),
                        tuple(int(s) for s in sizes) if sizes else None, train,
                        tuple(ml.get("monitored", ["P5", "P7", "P9"])))
        an = _section(doc, "analytics", {"enabled", "num_factors", "scaling"})
        nf = an.get("num_factors", "auto")
        analytics = AnalyticsConfig(bool(an.get("enabled", True)),
                                    None if nf in (None, "auto") else int(nf),
                                    str(an.get("scaling", "two-way")))
        if analytics.scaling not in ("two-way", "robust", "rows"):
            raise ConfigError("analytics.scaling must be two-way, robust or rows, "
                              f"not {analytics.scaling!r}")
        windows = tuple(int(w) for w in (doc.get("lse_windows") or ()))
        if any(w > fluct.samples for w in windows):
            raise ConfigError(f"lse_windows {windows} exceed the {fluct.samples} samples")
        return ExperimentConfig(
            case_path=base / doc["case_path"],
            output_dir=base / doc.get("output_dir", "out"),
            fluctuation=fluct,
            pf_tolerance=float(fl.get("tolerance", 1e-10)),
            lse_windows=windows,
            outliers=rule,
            corruption=_edit(doc.get("corruption"), "corruption"),
            correction=_edit(doc.get("correction"), "correction"),
            mlp=mlp,
            analytics=analytics,
            raw=doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(doc, path.parent)
