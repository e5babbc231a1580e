"""Loss functions and counterfactual risk estimators for CVR training.

Every function takes a :class:`~escm2.model.Predictions` batch plus the click
(``o``) and conversion (``r``) label arrays and returns a shape ``(1,)``
:class:`~escm2.diffcore.Tensor`, so the result can be differentiated.
Plain numpy arrays are accepted wherever a tensor is expected.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Dict

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .model import Predictions

VARIANTS = ("naive", "mtl_imp", "esmm", "escm2_ips", "escm2_dr")


class ConfigError(ValueError):
    """Invalid or unknown configuration value."""


class EmptyClickWarning(RuntimeWarning):
    """A batch without clicks contributed zero to a click-conditioned term."""


@dataclass
class RiskConfig:
    variant: str = "escm2_ips"
    lambda_c: float = 0.1
    lambda_g: float = 1.0
    propensity_clip: float = 0.1
    truncate_propensity_gradient: bool = True
    # keep the imputation loss from pulling the CVR tower toward the imputed error
    imputation_stops_cvr_gradient: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for key in ("lambda_c", "lambda_g"):
            v = getattr(self, key)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{key} must be finite and >= 0, got {v}")
        if not 0 < self.propensity_clip <= 1:
            raise ConfigError(f"propensity_clip must lie in (0, 1], got {self.propensity_clip}")


def _labels(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def bce(label, prediction) -> Tensor:
    """Elementwise binary cross-entropy, prediction clamped to ``[1e-7, 1 - 1e-7]``."""
    return dc.binary_cross_entropy(label, prediction)


def _propensity(preds: Predictions, config: RiskConfig) -> Tensor:
    q = preds.ctr
    if config.truncate_propensity_gradient:
        q = dc.stop_gradient(q)
    return dc.maximum(q, config.propensity_clip)


def ips_weights(propensity, clip: float) -> np.ndarray:
    """Per-row inverse propensity weights ``1 / max(q, clip)``."""
    return 1.0 / np.maximum(np.asarray(propensity, dtype=np.float64), clip)


def loss_naive(preds: Predictions, click, conversion) -> Tensor:
    """Cross-entropy of the CVR tower averaged over clicked rows only.

    A click-free batch yields 0 and emits :class:`EmptyClickWarning`.
    """
    o, r = _labels(click), _labels(conversion)
    n_click = o.sum()
    if n_click == 0:
        warnings.warn("batch has no clicked rows; naive CVR loss set to 0", EmptyClickWarning)
        return dc.mul(dc.total(preds.cvr), 0.0)
    return dc.total(o * bce(r, preds.cvr)) / n_click


def loss_ctr(preds: Predictions, click) -> Tensor:
    return dc.mean(bce(_labels(click), preds.ctr))


def loss_ctcvr(preds: Predictions, click, conversion) -> Tensor:
    return dc.mean(bce(_labels(click) * _labels(conversion), preds.ctcvr))


def loss_mtl_imp(preds: Predictions, conversion) -> Tensor:
    """CVR cross-entropy over all rows with unclicked rows taken as negatives."""
    return dc.mean(bce(_labels(conversion), preds.cvr))


def risk_ips(preds: Predictions, click, conversion, config: RiskConfig) -> Tensor:
    """Inverse-propensity-weighted CVR loss normalized by the batch size.

    The CTR prediction serves as the propensity, floored at
    ``config.propensity_clip`` and detached when
    ``config.truncate_propensity_gradient`` is set.
    """
    o, r = _labels(click), _labels(conversion)
    q = _propensity(preds, config)
    return dc.mean(o * bce(r, preds.cvr) / q)


def risk_dr_err(preds: Predictions, click, conversion, config: RiskConfig) -> Tensor:
    """Doubly robust error term: imputed error plus propensity-weighted deviation."""
    if preds.imputed_error is None:
        raise dc.ContractError("risk_dr_err needs imputed_error predictions")
    o, r = _labels(click), _labels(conversion)
    q = _propensity(preds, config)
    delta = bce(r, preds.cvr)
    dev = delta - preds.imputed_error
    return dc.mean(preds.imputed_error + o * dev / q)


def risk_dr_imp(preds: Predictions, click, conversion, config: RiskConfig) -> Tensor:
    """Propensity-weighted squared deviation that trains the imputation tower."""
    if preds.imputed_error is None:
        raise dc.ContractError("risk_dr_imp needs imputed_error predictions")
    o, r = _labels(click), _labels(conversion)
    q = _propensity(preds, config)
    delta = bce(r, preds.cvr)
    if config.imputation_stops_cvr_gradient:
        delta = dc.stop_gradient(delta)
    dev = delta - preds.imputed_error
    return dc.mean(o * dc.square(dev) / q)


def objective_terms(preds: Predictions, click, conversion, config: RiskConfig) -> Dict[str, Tensor]:
    """The training objective and its pieces.

    Keys: ``total``, ``l_ctr``, ``l_cvr``, ``l_ctcvr``. Terms a variant does not
    use are reported as zero constants.
    """
    v = config.variant
    zero = Tensor(np.zeros(1))
    l_ctr = loss_ctr(preds, click)
    l_cvr, l_ctcvr = zero, zero
    if v == "naive":
        l_cvr = loss_naive(preds, click, conversion)
        total = l_ctr + config.lambda_c * l_cvr
    elif v == "mtl_imp":
        l_cvr = loss_mtl_imp(preds, conversion)
        total = l_ctr + config.lambda_c * l_cvr
    elif v == "esmm":
        l_ctcvr = loss_ctcvr(preds, click, conversion)
        total = l_ctr + config.lambda_g * l_ctcvr
    elif v == "escm2_ips":
        l_cvr = risk_ips(preds, click, conversion, config)
        l_ctcvr = loss_ctcvr(preds, click, conversion)
        total = l_ctr + config.lambda_c * l_cvr + config.lambda_g * l_ctcvr
    elif v == "escm2_dr":
        l_cvr = (risk_dr_err(preds, click, conversion, config)
                 + risk_dr_imp(preds, click, conversion, config))
        l_ctcvr = loss_ctcvr(preds, click, conversion)
        total = l_ctr + config.lambda_c * l_cvr + config.lambda_g * l_ctcvr
    else:
        raise ConfigError(f"unknown variant {v!r}")
    return {"total": total, "l_ctr": l_ctr, "l_cvr": l_cvr, "l_ctcvr": l_ctcvr}


def objective(preds: Predictions, click, conversion, config: RiskConfig) -> Tensor:
    return objective_terms(preds, click, conversion, config)["total"]
