"""Propensity score matching, causal risk ratio, bias reports and lambda sweeps.

The click -> conversion diagnostic treats a model's CTR estimates as
propensity scores and its CVR estimates as outcomes. Clicked rows are matched
to unclicked rows with nearly the same propensity, and the ratio of mean
outcomes between the matched groups (the causal risk ratio) measures how much
the model lets a click change its conversion estimate.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from functools import partial
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy.special import logit

from . import metrics

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ("param", "value", "seed", "auc_cvr", "ks_cvr", "auc_ctcvr", "ks_ctcvr")


class MatchingError(ValueError):
    """Matching produced no pairs (or could not start)."""


class UndefinedRatioError(ZeroDivisionError):
    """The matched unclicked group has zero mean outcome."""


@dataclass
class MatchedSample:
    """Matched ``(clicked_row, unclicked_row)`` index pairs.

    ``gaps`` holds the absolute propensity distance of each pair on the scale
    used for matching (``logit`` by default); every gap is within ``caliper``.
    """

    pairs: np.ndarray
    gaps: np.ndarray
    caliper: float
    unmatched_count: int
    scale: str = "logit"

    @property
    def matched_count(self) -> int:
        return int(self.pairs.shape[0])


@dataclass
class CausalStrengthReport:
    crr: float
    strength: float
    matched_count: int
    clicked_mean: float
    unclicked_mean: float
    model: str = ""

    def to_dict(self) -> dict:
        return {"model": self.model, "crr": self.crr, "strength": self.strength,
                "matched_count": self.matched_count}


def _to_scale(p: np.ndarray, scale: str) -> np.ndarray:
    if scale == "logit":
        return logit(np.clip(p, 1e-12, 1 - 1e-12))
    if scale == "probability":
        return p
    raise ValueError(f"unknown matching scale {scale!r}")


def default_caliper(propensities, factor: float = 0.2) -> float:
    """``factor`` times the standard deviation of the logit propensity."""
    return float(factor * np.std(_to_scale(np.asarray(propensities, dtype=np.float64), "logit")))


def psm_match(propensities, click_flags, caliper: Optional[float] = None,
              ratio: int = 1, scale: str = "logit") -> MatchedSample:
    """Greedy nearest-neighbour matching without replacement.

    Clicked rows are visited in descending propensity order; each takes the
    closest still-unused unclicked row, provided the gap is within
    ``caliper``. Equal gaps go to the lower propensity, then the lower row
    index. With ``ratio > 1`` the visit order repeats ``ratio`` times,
    so every clicked row can collect up to ``ratio`` controls.
    """
    p = np.asarray(propensities, dtype=np.float64).reshape(-1)
    t = np.asarray(click_flags).reshape(-1)
    if p.size != t.size:
        raise ValueError("propensities and click flags differ in length")
    treated = np.flatnonzero(t == 1)
    controls = np.flatnonzero(t == 0)
    if treated.size == 0 or controls.size == 0:
        raise MatchingError("need both clicked and unclicked rows")
    if caliper is None:
        caliper = default_caliper(p)
    if not caliper > 0:
        raise ValueError(f"caliper must be positive, got {caliper}")
    if ratio < 1:
        raise ValueError("ratio must be >= 1")

    x = _to_scale(p, scale)
    c_order = controls[np.argsort(x[controls], kind="mergesort")]
    cx = x[c_order]
    n_c = cx.size
    # skip-list pointers over used controls (path-compressed)
    nxt = np.arange(n_c + 1)
    prv = np.arange(-1, n_c)

    def find_next(i):
        root = i
        while nxt[root] != root:
            root = nxt[root]
        while nxt[i] != root:
            nxt[i], i = root, nxt[i]
        return root

    def find_prev(i):
        if i < 0:
            return -1
        root = i
        while root >= 0 and prv[root + 1] != root:
            root = prv[root + 1]
        while i >= 0 and prv[i + 1] != root:
            prv[i + 1], i = root, prv[i + 1]
        return root

    t_order = treated[np.argsort(-x[treated], kind="mergesort")]
    pairs, gaps = [], []
    matched_any = np.zeros(p.size, dtype=bool)
    for _ in range(ratio):
        for row in t_order:
            v = x[row]
            pos = int(np.searchsorted(cx, v))
            right = find_next(pos) if pos < n_c else n_c
            left = find_prev(pos - 1)
            if left >= 0:
                # among equal propensities take the earliest unused row
                left = find_next(int(np.searchsorted(cx, cx[left])))
            best, best_gap = -1, np.inf
            if right < n_c:
                best, best_gap = right, cx[right] - v
            if left >= 0 and v - cx[left] <= best_gap:
                best, best_gap = left, v - cx[left]
            if best < 0 or best_gap > caliper:
                continue
            pairs.append((row, c_order[best]))
            gaps.append(abs(best_gap))
            matched_any[row] = True
            nxt[best] = best + 1
            prv[best + 1] = best - 1
    if not pairs:
        suggestion = default_caliper(p) if scale == "logit" else float(np.std(x) * 0.2)
        raise MatchingError(
            f"no clicked row found a control within caliper {caliper:.4g}; "
            f"try a wider caliper (e.g. {max(suggestion, 2 * caliper):.4g})"
        )
    return MatchedSample(
        pairs=np.asarray(pairs, dtype=np.int64),
        gaps=np.asarray(gaps, dtype=np.float64),
        caliper=float(caliper),
        unmatched_count=int(treated.size - matched_any[treated].sum()),
        scale=scale,
    )


def causal_risk_ratio(matched: MatchedSample, outcomes, model: str = "") -> CausalStrengthReport:
    """Ratio of mean outcome over matched clicked rows to matched unclicked rows."""
    y = np.asarray(outcomes, dtype=np.float64).reshape(-1)
    if matched.matched_count == 0:
        raise MatchingError("empty matched sample")
    clicked = np.unique(matched.pairs[:, 0])
    unclicked = matched.pairs[:, 1]
    num = float(y[clicked].mean())
    den = float(y[unclicked].mean())
    if den == 0:
        raise UndefinedRatioError("matched unclicked outcomes average to zero")
    crr = num / den
    return CausalStrengthReport(crr=crr, strength=abs(crr - 1.0), matched_count=matched.matched_count,
                                clicked_mean=num, unclicked_mean=den, model=model)


def causal_strength(ctr_hat, cvr_hat, click, caliper: Optional[float] = None,
                    ratio: int = 1, model: str = "") -> CausalStrengthReport:
    """Match on ``ctr_hat`` within ``click`` groups and compute the CRR of ``cvr_hat``."""
    matched = psm_match(ctr_hat, click, caliper=caliper, ratio=ratio)
    return causal_risk_ratio(matched, cvr_hat, model=model)


def ieb_report(estimates: Dict[str, Sequence[np.ndarray]], reference: float) -> List[dict]:
    """Mean CVR estimate over the exposure space per model, against ``reference``.

    ``estimates`` maps a model name to per-seed arrays of CVR predictions.
    """
    if not estimates:
        raise ValueError("need at least one model")
    rows = []
    for name, per_seed in estimates.items():
        means = np.array([float(np.mean(p)) for p in per_seed])
        biases = means - reference
        rows.append({
            "model": name,
            "mean_estimate": float(means.mean()),
            "estimate_std": float(means.std(ddof=1)) if means.size > 1 else 0.0,
            "reference": float(reference),
            "bias": float(biases.mean()),
            "abs_bias": float(np.abs(biases).mean()),
            "positive_bias_seeds": int((biases > 0).sum()),
            "n_seeds": int(means.size),
            "per_seed_bias": biases.tolist(),
        })
    return rows


@dataclass
class SweepCell:
    param: str
    value: float
    seed: int
    auc_cvr: float = float("nan")
    ks_cvr: float = float("nan")
    auc_ctcvr: float = float("nan")
    ks_ctcvr: float = float("nan")
    error: Optional[str] = None

    def row(self) -> dict:
        return {c: getattr(self, c) for c in SWEEP_COLUMNS}


def summarize_sweep(cells: List[SweepCell]) -> List[dict]:
    """Mean and standard deviation of every metric per grid value."""
    out = []
    for value in sorted({c.value for c in cells}):
        group = [c for c in cells if c.value == value and c.error is None]
        entry = {"param": cells[0].param, "value": value, "n": len(group),
                 "failed": sum(1 for c in cells if c.value == value and c.error is not None)}
        for m in ("auc_cvr", "ks_cvr", "auc_ctcvr", "ks_ctcvr"):
            vals = np.array([getattr(c, m) for c in group], dtype=np.float64)
            entry[f"{m}_mean"] = float(np.nanmean(vals)) if vals.size else float("nan")
            entry[f"{m}_std"] = float(np.nanstd(vals)) if vals.size else float("nan")
        out.append(entry)
    return out


def sweep(parameter: str, grid: Sequence[float], seeds: Sequence[int],
          run_cell: Callable[[str, float, int], Dict[str, float]], jobs: int = 1) -> List[SweepCell]:
    """Evaluate ``run_cell(parameter, value, seed)`` over the grid.

    ``run_cell`` trains one model and returns its ranking metrics. A failing
    cell is recorded with its error message and the sweep moves on.
    """
    if parameter not in ("lambda_c", "lambda_g"):
        raise ValueError(f"can only sweep lambda_c or lambda_g, not {parameter!r}")
    grid = [float(g) for g in grid]
    if not grid:
        raise ValueError("empty grid")
    if grid != sorted(grid):
        raise ValueError("grid must be sorted")
    tasks = [(parameter, v, int(s)) for v in grid for s in seeds]
    run = partial(_run_cell, run_cell)
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(run, tasks))
    return [run(t) for t in tasks]


def _run_cell(run_cell, task) -> SweepCell:
    param, value, seed = task
    cell = SweepCell(param, value, seed)
    try:
        res = run_cell(param, value, seed)
        for m in ("auc_cvr", "ks_cvr", "auc_ctcvr", "ks_ctcvr"):
            setattr(cell, m, float(res[m]))
    except Exception as exc:  # recorded per cell; the sweep continues
        log.warning("sweep cell %s=%s seed=%s failed: %s", param, value, seed, exc)
        cell.error = f"{type(exc).__name__}: {exc}"
    return cell


def write_sweep_csv(cells: List[SweepCell], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        for c in cells:
            w.writerow(c.row())


def ranking_metrics(pred: Dict[str, np.ndarray], click, conversion) -> Dict[str, float]:
    """CVR metrics on clicked rows and CTCVR metrics on all rows."""
    click = np.asarray(click)
    conversion = np.asarray(conversion)
    clicked = click == 1
    cvr = metrics.metric_suite(pred["cvr"][clicked], conversion[clicked])
    ctcvr = metrics.metric_suite(pred["ctcvr"], click * conversion)
    return {"auc_cvr": cvr["auc"], "ks_cvr": cvr["ks"],
            "auc_ctcvr": ctcvr["auc"], "ks_ctcvr": ctcvr["ks"]}
