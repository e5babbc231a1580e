"""Synthetic recommendation worlds with known click and conversion probabilities.

Each user and item carries a few categorical attributes. A pair's click
probability is a logistic function of the sum of per-category effects, an
optional product of a user latent and an item latent (``ctr_interaction``),
and a small per-pair perturbation; its post-click conversion probability has its own
category effects, a perturbation, and an additive ``confound_strength *
logit(ctr)`` term that ties conversion to click propensity. Positive
confounding makes clicked pairs convert more often than the exposure space as
a whole.

Per-pair randomness comes from a counter-based hash of ``(seed, pair_id,
stream)``, so any subset of pairs can be generated in any order (or in
parallel) with identical results.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit, logit, ndtri

from .data import Dataset

_STREAM_CTR_NOISE = 1
_STREAM_CVR_NOISE = 2
_STREAM_CLICK = 3
_STREAM_CONVERSION = 4


class WorldConfigError(ValueError):
    """Invalid world configuration."""


class NumericalDomainError(ValueError):
    """A probability sits on the boundary where the log-loss is infinite."""


@dataclass
class WorldConfig:
    num_users: int = 1000
    num_items: int = 500
    user_fields: Tuple[int, ...] = (10, 10, 10)
    item_fields: Tuple[int, ...] = (10, 10, 10)
    target_ctr: float = 0.04
    # conversion rate among clicks; 0.1 gives click:conversion of about 10:1
    target_cvr: float = 0.1
    ctr_scale: float = 1.0
    cvr_scale: float = 1.0
    # weight of a user-latent x item-latent product in the click logit
    ctr_interaction: float = 0.0
    ctr_noise: float = 0.1
    cvr_noise: float = 0.3
    confound_strength: float = 0.5
    # extra conversion-logit drop, curvature * min(z, 0)**2, for pairs whose
    # standardized click logit z is below average
    confound_curvature: float = 0.0

    def __post_init__(self):
        self.user_fields = tuple(int(c) for c in self.user_fields)
        self.item_fields = tuple(int(c) for c in self.item_fields)
        self.validate()

    def validate(self) -> None:
        if self.num_users < 1:
            raise WorldConfigError("num_users must be >= 1")
        if self.num_items < 1:
            raise WorldConfigError("num_items must be >= 1")
        if not self.user_fields and not self.item_fields:
            raise WorldConfigError("at least one feature field is required")
        if any(c < 1 for c in self.user_fields + self.item_fields):
            raise WorldConfigError("field cardinalities must be >= 1")
        if not 0 < self.target_ctr < 1:
            raise WorldConfigError("target_ctr must lie in (0, 1)")
        if not 0 < self.target_cvr < 1:
            raise WorldConfigError("target_cvr must lie in (0, 1)")
        if self.confound_strength < 0:
            raise WorldConfigError("confound_strength must be >= 0")
        if self.confound_curvature < 0:
            raise WorldConfigError("confound_curvature must be >= 0")
        for key in ("ctr_scale", "cvr_scale", "ctr_interaction", "ctr_noise", "cvr_noise"):
            if getattr(self, key) < 0:
                raise WorldConfigError(f"{key} must be >= 0")


@dataclass
class SyntheticWorld:
    """Ground truth over the exposure space ``users x items``.

    ``true_ctr`` and ``true_cvr_given_click`` are ``(num_users, num_items)``
    arrays; pair ``(u, i)`` has id ``u * num_items + i``.
    """

    user_feature_ids: np.ndarray
    item_feature_ids: np.ndarray
    true_ctr: np.ndarray
    true_cvr_given_click: np.ndarray
    num_feature_categories: int
    confound_strength: float = 0.0
    seed: int = 0
    config: Optional[WorldConfig] = field(default=None, repr=False)

    def __post_init__(self):
        self.true_ctr = np.asarray(self.true_ctr, dtype=np.float64)
        self.true_cvr_given_click = np.asarray(self.true_cvr_given_click, dtype=np.float64)
        self.user_feature_ids = np.asarray(self.user_feature_ids, dtype=np.int64)
        self.item_feature_ids = np.asarray(self.item_feature_ids, dtype=np.int64)
        u, i = self.true_ctr.shape
        if self.true_cvr_given_click.shape != (u, i):
            raise WorldConfigError("true_ctr and true_cvr_given_click shapes differ")
        if self.user_feature_ids.shape[0] != u or self.item_feature_ids.shape[0] != i:
            raise WorldConfigError("feature tables do not match the probability grid")
        if not np.all((self.true_ctr > 0) & (self.true_ctr <= 1)):
            raise WorldConfigError("true_ctr must lie in (0, 1]")
        if not np.all((self.true_cvr_given_click >= 0) & (self.true_cvr_given_click <= 1)):
            raise WorldConfigError("true_cvr_given_click must lie in [0, 1]")

    @property
    def num_users(self) -> int:
        return self.true_ctr.shape[0]

    @property
    def num_items(self) -> int:
        return self.true_ctr.shape[1]

    @property
    def num_pairs(self) -> int:
        return self.true_ctr.size

    def pair_features(self, pair_ids) -> np.ndarray:
        pair_ids = np.asarray(pair_ids, dtype=np.int64)
        u, i = np.divmod(pair_ids, self.num_items)
        return np.concatenate([self.user_feature_ids[u], self.item_feature_ids[i]], axis=1)

    def ctr_of(self, pair_ids) -> np.ndarray:
        return self.true_ctr.reshape(-1)[np.asarray(pair_ids, dtype=np.int64)]

    def cvr_of(self, pair_ids) -> np.ndarray:
        return self.true_cvr_given_click.reshape(-1)[np.asarray(pair_ids, dtype=np.int64)]

    def ctr_cvr_correlation(self) -> float:
        return float(np.corrcoef(self.true_ctr.reshape(-1), self.true_cvr_given_click.reshape(-1))[0, 1])

    def summary(self) -> dict:
        ctr = self.true_ctr.reshape(-1)
        cvr = self.true_cvr_given_click.reshape(-1)
        return {
            "num_users": self.num_users,
            "num_items": self.num_items,
            "num_feature_categories": int(self.num_feature_categories),
            "seed": int(self.seed),
            "confound_strength": float(self.confound_strength),
            "mean_true_ctr": float(ctr.mean()),
            "mean_true_cvr": float(cvr.mean()),
            "clicked_space_cvr": float((ctr * cvr).sum() / ctr.sum()),
            "ctr_cvr_correlation": self.ctr_cvr_correlation() if ctr.std() > 0 and cvr.std() > 0 else 0.0,
            "config": asdict(self.config) if self.config is not None else None,
        }


@dataclass
class OracleTable:
    """Counterfactual side-table for a sampled dataset, aligned row by row.

    ``r_counterfactual`` is the conversion each pair *would* have had if
    clicked; it equals the observed ``r`` on clicked rows.
    """

    pair_id: np.ndarray
    r_counterfactual: np.ndarray
    true_ctr: np.ndarray
    true_cvr: np.ndarray

    def __len__(self) -> int:
        return self.pair_id.size


def _mix64(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def pair_uniforms(seed: int, pair_ids, stream: int) -> np.ndarray:
    """Uniforms in (0, 1) that depend only on ``(seed, pair_id, stream)``."""
    ids = np.asarray(pair_ids, dtype=np.int64).astype(np.uint64)
    with np.errstate(over="ignore"):
        key = _mix64(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
                     ^ _mix64(np.array([stream], dtype=np.uint64)))
        x = _mix64(ids * np.uint64(0x9E3779B97F4A7C15) + key)
    return ((x >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53


def _calibrate_offset(logits: np.ndarray, target: float, weights: Optional[np.ndarray] = None) -> float:
    w = np.ones_like(logits) if weights is None else weights
    w = w / w.sum()

    def gap(b):
        return float((expit(logits + b) * w).sum()) - target

    return brentq(gap, -50.0, 50.0, xtol=1e-12)


def generate_world(config: WorldConfig, seed: int) -> SyntheticWorld:
    """Build a world whose mean click probability matches ``config.target_ctr``."""
    config.validate()
    rng = np.random.default_rng(seed)
    offsets = np.cumsum((0,) + config.user_fields + config.item_fields)
    n_cat = int(offsets[-1])
    n_user_fields = len(config.user_fields)

    def assign(n, fields, base):
        cols = [offsets[base + j] + rng.integers(0, c, size=n) for j, c in enumerate(fields)]
        return np.stack(cols, axis=1) if cols else np.zeros((n, 0), dtype=np.int64)

    users = assign(config.num_users, config.user_fields, 0)
    items = assign(config.num_items, config.item_fields, n_user_fields)
    ctr_effect = rng.standard_normal(n_cat)
    cvr_effect = rng.standard_normal(n_cat)

    k = users.shape[1] + items.shape[1]
    norm = 1.0 / np.sqrt(k)
    ctr_struct = (ctr_effect[users].sum(1)[:, None] + ctr_effect[items].sum(1)[None, :]) * norm
    cvr_struct = (cvr_effect[users].sum(1)[:, None] + cvr_effect[items].sum(1)[None, :]) * norm
    if config.ctr_interaction > 0:
        latent = rng.standard_normal(n_cat)
        a = latent[users].sum(1)
        b = latent[items].sum(1)
        a = (a - a.mean()) / (a.std() or 1.0)
        b = (b - b.mean()) / (b.std() or 1.0)
        ctr_struct = ctr_struct + config.ctr_interaction * a[:, None] * b[None, :]

    pair_ids = np.arange(config.num_users * config.num_items, dtype=np.int64)
    shape = (config.num_users, config.num_items)
    ctr_eps = ndtri(pair_uniforms(seed, pair_ids, _STREAM_CTR_NOISE)).reshape(shape)
    cvr_eps = ndtri(pair_uniforms(seed, pair_ids, _STREAM_CVR_NOISE)).reshape(shape)

    ctr_logit = config.ctr_scale * ctr_struct + config.ctr_noise * ctr_eps
    ctr_logit = ctr_logit + _calibrate_offset(ctr_logit, config.target_ctr)
    true_ctr = expit(ctr_logit)

    cvr_logit = (config.cvr_scale * cvr_struct + config.cvr_noise * cvr_eps
                 + config.confound_strength * ctr_logit)
    if config.confound_curvature > 0:
        z = (ctr_logit - ctr_logit.mean()) / (ctr_logit.std() or 1.0)
        cvr_logit = cvr_logit - config.confound_curvature * np.minimum(z, 0.0) ** 2
    cvr_logit = cvr_logit + _calibrate_offset(cvr_logit, config.target_cvr, weights=true_ctr)
    true_cvr = expit(cvr_logit)

    return SyntheticWorld(
        user_feature_ids=users,
        item_feature_ids=items,
        true_ctr=true_ctr,
        true_cvr_given_click=true_cvr,
        num_feature_categories=n_cat,
        confound_strength=config.confound_strength,
        seed=seed,
        config=config,
    )


def _draw_labels(world: SyntheticWorld, pair_ids: np.ndarray, seed: int):
    click = pair_uniforms(seed, pair_ids, _STREAM_CLICK) < world.ctr_of(pair_ids)
    r_full = pair_uniforms(seed, pair_ids, _STREAM_CONVERSION) < world.cvr_of(pair_ids)
    return click.astype(np.int8), r_full.astype(np.int8)


def sample_dataset(world: SyntheticWorld, n_pairs: int, seed: int) -> Tuple[Dataset, OracleTable]:
    """Draw ``n_pairs`` distinct exposure pairs and their click/conversion labels.

    Returns the observable dataset and the oracle side-table holding the
    counterfactual conversion label of every row.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    if n_pairs > world.num_pairs:
        raise ValueError(f"n_pairs={n_pairs} exceeds the {world.num_pairs} pairs in the world")
    rng = np.random.default_rng(seed)
    pair_ids = np.sort(rng.choice(world.num_pairs, size=n_pairs, replace=False)).astype(np.int64)
    click, r_full = _draw_labels(world, pair_ids, seed)
    dataset = Dataset(
        pair_id=pair_ids,
        feature_ids=world.pair_features(pair_ids),
        click=click,
        conversion=click * r_full,
        provenance="synthetic",
    )
    oracle = OracleTable(
        pair_id=pair_ids,
        r_counterfactual=r_full,
        true_ctr=world.ctr_of(pair_ids),
        true_cvr=world.cvr_of(pair_ids),
    )
    return dataset, oracle


def resample_clicks(dataset: Dataset, oracle: OracleTable, seed: int) -> Dataset:
    """A fresh click realization over the same rows, keeping the frozen counterfactuals."""
    u = pair_uniforms(seed, oracle.pair_id, _STREAM_CLICK)
    click = (u < oracle.true_ctr).astype(np.int8)
    return Dataset(
        pair_id=dataset.pair_id,
        feature_ids=dataset.feature_ids,
        click=click,
        conversion=click * oracle.r_counterfactual,
        provenance=dataset.provenance,
    )


def oracle_ideal_risk(cvr_predictions, world: SyntheticWorld, oracle: OracleTable) -> float:
    """Mean log-loss of CVR predictions against full counterfactual labels."""
    p = np.asarray(cvr_predictions, dtype=np.float64).reshape(-1)
    if p.size != len(oracle):
        raise ValueError(f"{p.size} predictions for {len(oracle)} pairs")
    if oracle.pair_id.size and oracle.pair_id.max() >= world.num_pairs:
        raise ValueError("oracle rows do not belong to this world")
    if np.any((p <= 0) | (p >= 1)):
        raise NumericalDomainError("CVR predictions must lie strictly inside (0, 1)")
    r = oracle.r_counterfactual.astype(np.float64)
    return float(np.mean(-(r * np.log(p) + (1 - r) * np.log1p(-p))))


def oracle_cvr_expectation(world: SyntheticWorld, pair_ids=None) -> float:
    """Mean true post-click conversion probability over the exposure space
    (or over ``pair_ids`` when given)."""
    if pair_ids is None:
        return float(world.true_cvr_given_click.mean())
    return float(world.cvr_of(pair_ids).mean())


def write_oracle_csv(oracle: OracleTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pair_id", "r_counterfactual"])
        for pid, r in zip(oracle.pair_id, oracle.r_counterfactual):
            w.writerow([int(pid), int(r)])


def read_oracle_csv(path, world: SyntheticWorld) -> OracleTable:
    pid, r = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["pair_id", "r_counterfactual"]:
            raise ValueError(f"{path}: unexpected header {header}")
        for line in reader:
            if line:
                pid.append(int(line[0]))
                r.append(int(line[1]))
    pid = np.asarray(pid, dtype=np.int64)
    return OracleTable(pair_id=pid, r_counterfactual=np.asarray(r, dtype=np.int8),
                       true_ctr=world.ctr_of(pid), true_cvr=world.cvr_of(pid))
