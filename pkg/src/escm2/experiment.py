"""One-file experiment configuration and the train/evaluate/diagnose pipeline.

An :class:`ExperimentConfig` is a single JSON document with sections
``world``, ``data``, ``model``, ``train``, ``risk``, ``psm`` and ``sweep``
plus ``output_dir`` and ``seeds``. Unknown keys are rejected with the full
dotted key name.

Seeding: ``data.world_seed`` fixes the synthetic world, the sampled pairs and
the train/validation/test split; each run seed drives parameter
initialization and batch shuffling.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from . import causal_diag, metrics
from .data import Dataset, split
from .model import ModelConfig, ModelParams, predict
from .risks import RiskConfig
from .synthgen import SyntheticWorld, WorldConfig, generate_world, oracle_cvr_expectation, sample_dataset
from .trainer import TrainConfig, TrainHistory, train


class ExperimentConfigError(ValueError):
    """Invalid experiment configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class DataConfig:
    n_pairs: int = 200000
    world_seed: int = 0
    validation_fraction: float = 0.1
    test_fraction: float = 0.2


@dataclass
class ModelSection:
    embed_dim: int = 5
    tower_widths: Tuple[int, ...] = (32, 16)
    activation: str = "relu"

    def __post_init__(self):
        self.tower_widths = tuple(self.tower_widths)


@dataclass
class TrainSection:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 1024
    max_iterations: int = 10000
    checkpoint_every: int = 1000
    lr_schedule: str = "constant"
    lr_final_fraction: float = 0.01


@dataclass
class PsmConfig:
    caliper_factor: float = 0.2
    ratio: int = 1


@dataclass
class SweepConfig:
    parameter: str = "lambda_c"
    grid: Tuple[float, ...] = (0.0, 0.1, 0.5, 1.0, 2.0, 3.0)

    def __post_init__(self):
        self.grid = tuple(self.grid)


@dataclass
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    risk: RiskConfig = field(default_factory=RiskConfig)
    psm: PsmConfig = field(default_factory=PsmConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    output_dir: str = "runs"
    seeds: Tuple[int, ...] = (0,)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def train_config(self, seed: int, **risk_overrides) -> TrainConfig:
        risk = dataclasses.replace(self.risk, **risk_overrides) if risk_overrides else self.risk
        return TrainConfig(seed=seed, risk=risk, **asdict(self.train))

    def model_config(self, num_feature_categories: int) -> ModelConfig:
        return ModelConfig(num_feature_categories=num_feature_categories, **asdict(self.model))


_SECTIONS = {
    "world": WorldConfig,
    "data": DataConfig,
    "model": ModelSection,
    "train": TrainSection,
    "risk": RiskConfig,
    "psm": PsmConfig,
    "sweep": SweepConfig,
}


def _build_section(name: str, cls, raw: Any):
    if not isinstance(raw, dict):
        raise ExperimentConfigError(name, "expected an object")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in known:
            raise ExperimentConfigError(f"{name}.{key}", "unknown key")
    try:
        obj = cls(**raw)
    except (TypeError, ValueError) as exc:
        msg = str(exc)
        bad = next((k for k in raw if k in msg), None)
        raise ExperimentConfigError(f"{name}.{bad}" if bad else name, msg) from exc
    return obj


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ExperimentConfigError("<root>", "expected a JSON object")
    kwargs = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            kwargs[key] = _build_section(key, _SECTIONS[key], value)
        elif key == "output_dir":
            if not isinstance(value, str) or not value:
                raise ExperimentConfigError(key, "expected a non-empty string")
            kwargs[key] = value
        elif key == "seeds":
            if (not isinstance(value, list) or not value
                    or not all(isinstance(s, int) and not isinstance(s, bool) for s in value)):
                raise ExperimentConfigError(key, "expected a non-empty list of integers")
            kwargs[key] = tuple(value)
        else:
            raise ExperimentConfigError(key, "unknown key")
    cfg = ExperimentConfig(**kwargs)
    _check(cfg)
    return cfg


def _check(cfg: ExperimentConfig) -> None:
    d = cfg.data
    if d.n_pairs < 10:
        raise ExperimentConfigError("data.n_pairs", "must be >= 10")
    for key in ("validation_fraction", "test_fraction"):
        if not 0 < getattr(d, key) < 1:
            raise ExperimentConfigError(f"data.{key}", "must lie in (0, 1)")
    if d.test_fraction + d.validation_fraction >= 1:
        raise ExperimentConfigError("data.test_fraction", "test plus validation fractions must be < 1")
    try:
        TrainConfig(**asdict(cfg.train))
    except ValueError as exc:
        key = next((k for k in asdict(cfg.train) if k in str(exc)), "")
        raise ExperimentConfigError(f"train.{key}" if key else "train", str(exc)) from exc
    try:
        ModelConfig(num_feature_categories=1, **asdict(cfg.model))
    except ValueError as exc:
        key = next((k for k in asdict(cfg.model) if k in str(exc)), "")
        raise ExperimentConfigError(f"model.{key}" if key else "model", str(exc)) from exc
    if not cfg.psm.caliper_factor > 0:
        raise ExperimentConfigError("psm.caliper_factor", "must be positive")
    if cfg.psm.ratio < 1:
        raise ExperimentConfigError("psm.ratio", "must be >= 1")
    if cfg.sweep.parameter not in ("lambda_c", "lambda_g"):
        raise ExperimentConfigError("sweep.parameter", "must be lambda_c or lambda_g")
    grid = list(cfg.sweep.grid)
    if not grid or grid != sorted(grid):
        raise ExperimentConfigError("sweep.grid", "must be a non-empty sorted list")


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ExperimentConfigError("<file>", f"invalid JSON: {exc}") from exc
    return config_from_dict(raw)


@dataclass
class Experiment:
    """The world, its sampled dataset and a fixed three-way split."""

    world: SyntheticWorld
    dataset: Dataset
    train: Dataset
    validation: Dataset
    test: Dataset


def split_three(dataset: Dataset, data: DataConfig, seed: int) -> Tuple[Dataset, Dataset, Dataset]:
    rest, test = split(dataset, data.test_fraction, seed)
    train_part, val = split(rest, data.validation_fraction, seed + 1)
    return train_part, val, test


def build_experiment(cfg: ExperimentConfig) -> Experiment:
    s = cfg.data.world_seed
    world = generate_world(cfg.world, s)
    dataset, _ = sample_dataset(world, cfg.data.n_pairs, s + 1)
    tr, va, te = split_three(dataset, cfg.data, s + 2)
    return Experiment(world, dataset, tr, va, te)


def train_variant(cfg: ExperimentConfig, exp: Experiment, seed: int,
                  **risk_overrides) -> Tuple[ModelParams, TrainHistory]:
    mc = cfg.model_config(exp.world.num_feature_categories)
    return train(exp.train, exp.validation, mc, cfg.train_config(seed, **risk_overrides))


def evaluate(params: ModelParams, dataset: Dataset, reference: Optional[float] = None) -> dict:
    """Evaluation report with fixed keys.

    ``cvr`` metrics use clicked rows, ``ctcvr`` metrics use every row with
    label ``o * r``. ``bias`` compares the mean CVR estimate over all rows
    with ``reference``; without one, the clicked-space conversion rate stands
    in as the reference.
    """
    if dataset.feature_ids.size and dataset.feature_ids.max() >= params.config.num_feature_categories:
        raise ValueError(
            f"dataset uses feature index {int(dataset.feature_ids.max())} but the checkpoint "
            f"only has {params.config.num_feature_categories} embedding rows"
        )
    p = predict(params, dataset.feature_ids)
    return report_from_predictions(p, dataset, reference)


def report_from_predictions(p: Dict[str, np.ndarray], dataset: Dataset,
                            reference: Optional[float] = None) -> dict:
    clicked = dataset.click == 1
    kind = "oracle"
    if reference is None:
        kind = "click_space_label"
        reference = dataset.clicked_conversion_rate()
    mean_est = float(np.mean(p["cvr"])) if len(dataset) else float("nan")
    return {
        "cvr": metrics.metric_suite(p["cvr"][clicked], dataset.conversion[clicked]),
        "ctcvr": metrics.metric_suite(p["ctcvr"], dataset.click * dataset.conversion),
        "bias": {
            "mean_cvr_estimate": mean_est,
            "reference": float(reference),
            "reference_kind": kind,
            "bias": mean_est - float(reference),
        },
    }


def diagnose(models: Dict[str, ModelParams], dataset: Dataset, psm: PsmConfig,
             reference: Optional[float] = None) -> dict:
    """IEB rows and PSM/CRR reports for each named model on ``dataset``."""
    if not models:
        raise ValueError("need at least one model")
    if reference is None:
        reference = dataset.clicked_conversion_rate()
    preds = {name: predict(m, dataset.feature_ids) for name, m in models.items()}
    ieb = causal_diag.ieb_report({n: [p["cvr"]] for n, p in preds.items()}, reference)
    crr = []
    for name, p in preds.items():
        caliper = causal_diag.default_caliper(p["ctr"], psm.caliper_factor)
        rep = causal_diag.causal_strength(p["ctr"], p["cvr"], dataset.click, caliper=caliper,
                                          ratio=psm.ratio, model=name)
        crr.append(rep.to_dict())
    return {"ieb": ieb, "crr": crr}


def reference_for(world: Optional[SyntheticWorld], dataset: Dataset) -> Optional[float]:
    if world is None or dataset.provenance != "synthetic":
        return None
    return oracle_cvr_expectation(world, dataset.pair_id)
