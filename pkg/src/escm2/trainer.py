"""Mini-batch Adam training with periodic validation checkpoints."""
from __future__ import annotations

import csv
import math
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import diffcore as dc
from . import metrics
from .data import Dataset
from .model import ModelConfig, ModelParams, forward, init_params, predict
from .risks import RiskConfig, objective_terms

log = logging.getLogger(__name__)

LR_SCHEDULES = ("constant", "cosine")

HISTORY_COLUMNS = ("iteration", "objective", "l_ctr", "l_cvr", "l_ctcvr",
                   "val_auc_cvr", "val_auc_ctcvr")


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, iteration, parameter):
        super().__init__(f"non-finite gradient for {parameter!r} at iteration {iteration}")
        self.iteration = iteration
        self.parameter = parameter


class TrainingDivergedError(FloatingPointError):
    """The objective became NaN/Inf. Carries the last good checkpoint."""

    def __init__(self, iteration, last_good: ModelParams, history: "TrainHistory"):
        super().__init__(f"objective is not finite at iteration {iteration}")
        self.iteration = iteration
        self.last_good = last_good
        self.history = history


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 1024
    max_iterations: int = 10000
    checkpoint_every: int = 1000
    seed: int = 0
    # "constant", or "cosine" decay from learning_rate to learning_rate * lr_final_fraction
    lr_schedule: str = "constant"
    lr_final_fraction: float = 0.01
    risk: RiskConfig = field(default_factory=RiskConfig)

    def __post_init__(self):
        if isinstance(self.risk, dict):
            self.risk = RiskConfig(**self.risk)
        for key in ("learning_rate", "adam_epsilon"):
            if not getattr(self, key) > 0:
                raise ValueError(f"{key} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if not 0 <= self.lr_final_fraction <= 1:
            raise ValueError("lr_final_fraction must lie in [0, 1]")

    def learning_rate_at(self, iteration: int) -> float:
        """Step size used at 1-based ``iteration``."""
        if self.lr_schedule == "constant" or self.max_iterations <= 1:
            return self.learning_rate
        frac = (iteration - 1) / (self.max_iterations - 1)
        floor = self.lr_final_fraction
        return self.learning_rate * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * frac)))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls(m=np.zeros_like(params.flat), v=np.zeros_like(params.flat))


@dataclass
class TrainHistory:
    records: List[dict] = field(default_factory=list)
    best_checkpoint: Optional[int] = None
    empty_click_batches: int = 0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(HISTORY_COLUMNS)
            for rec in self.records:
                w.writerow([rec[c] for c in HISTORY_COLUMNS])


def _spans_to_slices(spans: List[Tuple[int, int]]) -> List[slice]:
    spans = sorted(spans)
    merged = [list(spans[0])]
    for a, b in spans[1:]:
        if a == merged[-1][1]:
            merged[-1][1] = b
        else:
            merged.append([a, b])
    return [slice(a, b) for a, b in merged]


def adam_step(params: ModelParams, gradients: Dict[str, np.ndarray], state: AdamState,
              config: TrainConfig, iteration: Optional[int] = None, lr: Optional[float] = None):
    """One Adam update with decoupled weight decay, in place.

    Only parameters present in ``gradients`` are touched (moments included).
    """
    if not gradients:
        return params, state
    g = np.zeros_like(params.flat)
    spans = []
    for name, grad in gradients.items():
        a, b = params.spans[name]
        g[a:b] = np.asarray(grad).reshape(-1)
        spans.append((a, b))
    if not np.isfinite(g).all():
        bad = next(n for n, gr in gradients.items() if not np.isfinite(gr).all())
        raise NonFiniteGradientError(iteration if iteration is not None else state.t + 1, bad)

    state.t += 1
    lr = config.learning_rate if lr is None else lr
    b1, b2 = config.adam_beta1, config.adam_beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    decay = 1.0 - lr * config.weight_decay
    for sl in _spans_to_slices(spans):
        theta, gs = params.flat[sl], g[sl]
        m, v = state.m[sl], state.v[sl]
        m *= b1
        m += (1.0 - b1) * gs
        v *= b2
        v += (1.0 - b2) * gs * gs
        theta *= decay
        theta -= lr * (m / c1) / (np.sqrt(v / c2) + config.adam_epsilon)
    return params, state


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index batches, reshuffled every epoch."""
    batch_size = min(batch_size, n)
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield perm[start:start + batch_size]


def validation_metrics(params: ModelParams, val: Dataset) -> Tuple[float, float]:
    """CVR AUC over clicked validation rows and CTCVR AUC over all rows."""
    if len(val) == 0:
        return float("nan"), float("nan")
    p = predict(params, val.feature_ids)
    clicked = val.click == 1
    try:
        auc_cvr = metrics.auc(p["cvr"][clicked], val.conversion[clicked])
    except metrics.UndefinedMetricError:
        auc_cvr = float("nan")
    try:
        auc_ctcvr = metrics.auc(p["ctcvr"], val.click * val.conversion)
    except metrics.UndefinedMetricError:
        auc_ctcvr = float("nan")
    return auc_cvr, auc_ctcvr


def _rank_key(rec: dict) -> Tuple[float, float]:
    def clean(x):
        return -np.inf if np.isnan(x) else x
    return clean(rec["val_auc_cvr"]), clean(rec["val_auc_ctcvr"])


def train(dataset: Dataset, val: Dataset, model_config: ModelConfig,
          train_config: TrainConfig) -> Tuple[ModelParams, TrainHistory]:
    """Train one variant and return the best validation checkpoint.

    Checkpoints are taken every ``checkpoint_every`` iterations and after the
    last one. The best checkpoint maximizes validation CVR AUC, with CTCVR
    AUC breaking ties.
    """
    params = init_params(model_config, train_config.seed)
    history = TrainHistory()
    if train_config.max_iterations == 0 or len(dataset) == 0:
        return params, history
    if dataset.feature_ids.max() >= model_config.num_feature_categories:
        raise IndexError("dataset feature ids exceed the embedding table")

    risk = train_config.risk
    use_imp = risk.variant == "escm2_dr"
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng([train_config.seed, 0x5EED])
    feats, click, conv = dataset.feature_ids, dataset.click, dataset.conversion

    best_flat = params.flat.copy()
    best_key = None
    last_good = params.flat.copy()
    window = np.zeros(4)
    window_n = 0
    stream = _batches(len(dataset), train_config.batch_size, rng)

    for it in range(1, train_config.max_iterations + 1):
        idx = next(stream)
        o, r = click[idx], conv[idx]
        if not o.any():
            history.empty_click_batches += 1
        preds = forward(params, feats[idx], imputation=use_imp)
        terms = objective_terms(preds, o, r, risk)
        total = terms["total"].item()
        if not np.isfinite(total):
            raise TrainingDivergedError(it, ModelParams.from_flat(model_config, last_good), history)
        grads = dc.backward(terms["total"])
        adam_step(params, {t.name: g for t, g in grads.items()}, state, train_config, it,
                  lr=train_config.learning_rate_at(it))
        window += (total, terms["l_ctr"].item(), terms["l_cvr"].item(), terms["l_ctcvr"].item())
        window_n += 1

        if it % train_config.checkpoint_every == 0 or it == train_config.max_iterations:
            auc_cvr, auc_ctcvr = validation_metrics(params, val)
            means = window / window_n
            rec = {
                "iteration": it,
                "objective": float(means[0]),
                "l_ctr": float(means[1]),
                "l_cvr": float(means[2]),
                "l_ctcvr": float(means[3]),
                "val_auc_cvr": auc_cvr,
                "val_auc_ctcvr": auc_ctcvr,
            }
            history.records.append(rec)
            last_good = params.flat.copy()
            key = _rank_key(rec)
            if best_key is None or key > best_key:
                best_key = key
                best_flat = params.flat.copy()
                history.best_checkpoint = it
            log.debug("iter %d objective %.5f val auc cvr %.4f ctcvr %.4f",
                      it, rec["objective"], auc_cvr, auc_ctcvr)
            window[:] = 0.0
            window_n = 0

    return ModelParams.from_flat(model_config, best_flat), history
