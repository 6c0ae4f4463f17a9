"""End-to-end experiment runs shared by the CLI and the acceptance tests."""
from __future__ import annotations

import csv
import io
import json
import os
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import datacube
from .augment import AugmentPolicy, augment_set
from .datacube import DataFormatError, HyperCube, LabelMap
from .network import Model, ModelConfig, build_model, load_model_config
from .render import colorize, ppm_bytes, side_by_side
from .sampling import (
    TEST,
    TRAIN,
    AuditReport,
    SamplingError,
    WindowPartition,
    audit_partition,
    extract_windows,
    leakage_free_sample,
    subsample_train,
)
from .train_eval import EpochLog, MetricsReport, TrainConfig, confusion, metrics, predict, train

__all__ = [
    "PipelineError",
    "AuditFailure",
    "stage",
    "ExperimentConfig",
    "load_experiment",
    "prepare_data",
    "TrainResult",
    "run_training",
    "write_training_outputs",
    "make_partition",
    "run_eval",
    "write_eval_outputs",
    "training_log_csv",
]

VALIDATION_ERRORS = (ValueError, KeyError, TypeError, FileNotFoundError, DataFormatError, SamplingError)


class PipelineError(Exception):
    """An upstream failure tagged with the stage it came from."""

    def __init__(self, label: str, cause: BaseException):
        super().__init__(f"{label}: {cause}")
        self.label = label
        self.cause = cause

    @property
    def is_validation(self) -> bool:
        return isinstance(self.cause, VALIDATION_ERRORS)


class AuditFailure(Exception):
    def __init__(self, report: AuditReport):
        failed = [k for k, ok in report.flags.items() if not ok]
        super().__init__(f"partition audit failed: {', '.join(failed)}")
        self.report = report


@contextmanager
def stage(label: str):
    try:
        yield
    except (PipelineError, AuditFailure):
        raise
    except Exception as exc:
        raise PipelineError(label, exc) from exc


@dataclass
class ExperimentConfig:
    cube: str
    labels: str
    window: int = 8
    rates: Any = 0.3
    discard: list = field(default_factory=list)
    per_band_normalize: bool = True
    train_fraction: float = 1.0
    augment: dict = field(default_factory=dict)
    model: Any = "hefcn-toy"
    train: dict = field(default_factory=dict)
    seed: int = 0
    out: str | None = None

    def augment_policy(self) -> AugmentPolicy:
        opts = {"seed": self.seed, **self.augment}
        return AugmentPolicy(**opts)

    def train_config(self) -> TrainConfig:
        opts = {"seed": self.seed, **self.train}
        return TrainConfig(**opts)

    def model_config(self, bands: int, num_classes: int) -> ModelConfig:
        if isinstance(self.model, dict):
            d = {**self.model, "input_bands": bands, "num_classes": num_classes}
            return ModelConfig.from_dict(d)
        return load_model_config(self.model, input_bands=bands, num_classes=num_classes)

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | os.PathLike | None = None) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if not k.startswith("_")}
        unknown = set(d) - known - {"resolved"}
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        d = {k: v for k, v in d.items() if k in known}
        if "cube" not in d or "labels" not in d:
            raise ValueError("experiment config needs 'cube' and 'labels'")
        cfg = cls(**d)
        if base_dir is not None:
            base = Path(base_dir)
            for name in ("cube", "labels"):
                p = Path(getattr(cfg, name))
                if not p.is_absolute():
                    setattr(cfg, name, os.path.abspath(base / p))
            if isinstance(cfg.model, str) and not Path(cfg.model).is_absolute():
                candidate = base / cfg.model
                if candidate.is_file():
                    cfg.model = os.path.abspath(candidate)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if int(self.window) < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        rates = [self.rates] if np.isscalar(self.rates) else list(self.rates)
        if not all(0.0 < float(r) < 1.0 for r in rates):
            raise ValueError(f"rates must lie in (0, 1), got {self.rates}")
        if not 0.0 < float(self.train_fraction) <= 1.0:
            raise ValueError("train_fraction must lie in (0, 1]")
        self.augment_policy()
        self.train_config()


def load_experiment(path: str | os.PathLike) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"experiment config not found: {path}")
    with open(path) as fh:
        d = json.load(fh)
    return ExperimentConfig.from_dict(d, base_dir=path.parent)


def prepare_data(cfg: ExperimentConfig) -> tuple[HyperCube, LabelMap]:
    """Load, drop bands and normalise, with each stage labelled on failure."""
    with stage("datacube: load_cube"):
        cube = datacube.load_cube(cfg.cube)
    with stage("datacube: load_labels"):
        labels = datacube.load_labels(cfg.labels)
    with stage("datacube: dims"):
        if (cube.height, cube.width) != (labels.height, labels.width):
            raise ValueError(
                f"cube is {cube.height}x{cube.width}, labels are {labels.height}x{labels.width}"
            )
    with stage("datacube: drop_bands"):
        cube = datacube.drop_bands(cube, cfg.discard)
    with stage("datacube: normalize"):
        cube = datacube.normalize(cube, per_band=cfg.per_band_normalize)
    return cube, labels


@dataclass
class TrainResult:
    model: Model
    partition: WindowPartition
    audit: AuditReport
    history: list[EpochLog]
    resolved: dict
    cube: HyperCube
    labels: LabelMap


def make_partition(cfg: ExperimentConfig, cube: HyperCube, labels: LabelMap) -> tuple[WindowPartition, AuditReport]:
    with stage("sampling: leakage_free_sample"):
        part = leakage_free_sample(cube, labels, int(cfg.window), cfg.rates, cfg.seed)
    with stage("sampling: audit_partition"):
        report = audit_partition(part, labels)
    if not report.passed:
        raise AuditFailure(report)
    if cfg.train_fraction < 1.0:
        with stage("sampling: subsample_train"):
            part = subsample_train(part, float(cfg.train_fraction), cfg.seed)
    return part, report


def run_training(cfg: ExperimentConfig) -> TrainResult:
    cube, labels = prepare_data(cfg)
    with stage("network: config"):
        model_cfg = cfg.model_config(cube.bands, labels.num_classes)
        policy = cfg.augment_policy()
        train_cfg = cfg.train_config()
    part, report = make_partition(cfg, cube, labels)
    with stage("sampling: extract_windows"):
        windows = extract_windows(cube, labels, part, TRAIN)
    with stage("augment: augment_set"):
        windows = augment_set(windows, policy)
    with stage("network: build_model"):
        model = build_model(model_cfg, seed=cfg.seed)
    with stage("train_eval: train"):
        history = train(model, windows, train_cfg)

    resolved = {
        "cube": os.path.abspath(cfg.cube),
        "labels": os.path.abspath(cfg.labels),
        "window": int(cfg.window),
        "rates": list(part.rates),
        "discard": list(cfg.discard),
        "per_band_normalize": bool(cfg.per_band_normalize),
        "train_fraction": float(cfg.train_fraction),
        "augment": asdict(policy),
        "model": model_cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "seed": int(cfg.seed),
    }
    return TrainResult(model, part, report, history, resolved, cube, labels)


def training_log_csv(history: list[EpochLog]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "mean_loss", "train_oa", "wall_seconds"])
    for row in history:
        w.writerow([row.epoch, f"{row.mean_loss:.8f}", f"{row.train_oa:.6f}", f"{row.wall_seconds:.3f}"])
    return buf.getvalue()


def write_training_outputs(result: TrainResult, out_dir: str | os.PathLike) -> dict[str, Path]:
    from .network import save_checkpoint

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"checkpoint": save_checkpoint(result.model, out / "model")}
    paths["log"] = out / "train_log.csv"
    paths["log"].write_text(training_log_csv(result.history))
    paths["partition"] = out / "partition.json"
    result.partition.save(paths["partition"])
    paths["audit"] = out / "audit.json"
    paths["audit"].write_text(json.dumps(result.audit.to_json(), indent=2) + "\n")
    paths["config"] = out / "resolved_config.json"
    paths["config"].write_text(json.dumps({**result.resolved, "resolved": True}, indent=2) + "\n")
    return paths


@dataclass
class EvalResult:
    report: MetricsReport
    prediction: np.ndarray
    labels: LabelMap
    map_rgb: np.ndarray


def run_eval(
    cfg: ExperimentConfig,
    model: Model,
    partition: WindowPartition,
    full_map: bool = False,
    with_truth: bool = False,
) -> EvalResult:
    cube, labels = prepare_data(cfg)
    with stage("train_eval: checkpoint"):
        if model.config.input_bands != cube.bands:
            raise ValueError(f"checkpoint expects {model.config.input_bands} bands, data has {cube.bands}")
        if model.config.num_classes != labels.num_classes:
            raise ValueError(
                f"checkpoint predicts {model.config.num_classes} classes, labels have {labels.num_classes}"
            )
        if partition.dims != (labels.height, labels.width):
            raise ValueError("partition does not match the label map dims")
    with stage("train_eval: predict"):
        pred = predict(model, cube, partition, TEST)
    with stage("train_eval: metrics"):
        report = metrics(confusion(pred, labels, partition, TEST))
    shown = pred
    if full_map:
        with stage("train_eval: predict"):
            shown = np.zeros_like(pred)
            for which in (TRAIN, TEST, 0):
                part_pred = predict(model, cube, partition, which)
                shown = np.where(part_pred > 0, part_pred, shown)
    shown = shown[: labels.height, : labels.width]
    rgb = colorize(shown, labels.palette)
    if with_truth:
        rgb = side_by_side(rgb, colorize(labels.labels, labels.palette))
    return EvalResult(report, pred, labels, rgb)


def write_eval_outputs(result: EvalResult, out_dir: str | os.PathLike) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"metrics": out / "metrics.json", "map": out / "pred_map.ppm"}
    paths["metrics"].write_text(json.dumps(result.report.to_json(), indent=2) + "\n")
    paths["map"].write_bytes(ppm_bytes(result.map_rgb))
    return paths
