"""
Out-of-sample evaluation: log predictive scores, predictive traces and the
model-comparison report.
"""

import logging
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from .btf_gibbs import PosteriorDraw, atom_weights_batch, forecast_contexts
from .core import CountSeries, DataSplit, Predictor
from .distributions import highest_density_set, poisson_log_pmf, poisson_support_bound
from .par_baseline import ParChain, par_rates
from .poisson_mixture import LabelRule

logger = logging.getLogger(__name__)

PROBABILITY_FLOOR = 1e-300
LOG_FLOOR = float(np.log(PROBABILITY_FLOOR))


def log_predictive_score(pmf_values) -> float:
    """
    -sum_t sum_i log p_i(y_t) / (T_test * N) over a test-points x draws matrix.

    Probabilities that are numerically zero are floored at 1e-300 and counted
    in a warning.
    """
    p = np.atleast_2d(np.asarray(pmf_values, dtype=float))
    if p.size == 0:
        raise ValueError("Need at least one test point and one draw")
    if np.any(p < 0) or np.any(p > 1 + 1e-12) or np.any(~np.isfinite(p)):
        raise ValueError("Predictive probabilities must lie in [0, 1]")
    floored = int(np.count_nonzero(p < PROBABILITY_FLOOR))
    if floored:
        logger.warning(f"{floored} predictive probabilities floored at {PROBABILITY_FLOOR:g}")
    return float(-np.mean(np.log(np.maximum(p, PROBABILITY_FLOOR))))


def log_predictive_score_from_logs(log_values) -> float:
    """Same estimator on log probabilities, flooring at log(1e-300)."""
    lp = np.atleast_2d(np.asarray(log_values, dtype=float))
    if lp.size == 0:
        raise ValueError("Need at least one test point and one draw")
    floored = int(np.count_nonzero(lp < LOG_FLOOR))
    if floored:
        logger.warning(f"{floored} predictive log probabilities floored at {LOG_FLOOR:.1f}")
    return float(-np.mean(np.maximum(lp, LOG_FLOOR)))


def btf_pmf_matrix(draws: Sequence[PosteriorDraw], contexts: np.ndarray, y: np.ndarray) -> np.ndarray:
    """p_i(y_t | D_t) as a test-points x draws matrix."""
    y = np.asarray(y, dtype=float)
    out = np.empty((y.size, len(draws)))
    for i, draw in enumerate(draws):
        weights = atom_weights_batch(draw, contexts)
        used = np.flatnonzero(weights.sum(axis=0) > 0)
        kernel = np.exp(poisson_log_pmf(y[:, None], draw.lambdastar[None, used]))
        out[:, i] = (weights[:, used] * kernel).sum(axis=1)
    return out


def score_btf(draws: Sequence[PosteriorDraw], rules: Sequence[LabelRule], series: CountSeries,
              split: DataSplit, predictors: Sequence[Predictor], target: int = 0) -> float:
    """
    Log predictive score of BTF draws on the test block. Test contexts are
    labelled with the pre-training rule from the observed history.
    """
    _require_test_block(split)
    contexts = forecast_contexts(series, split, rules, predictors)
    y = series.series(target)[split.test_indices()]
    return log_predictive_score(btf_pmf_matrix(draws, contexts, y))


def par_log_pmf_matrix(chain: ParChain, series: CountSeries, split: DataSplit) -> np.ndarray:
    """log p_i(y_t | history) as a test-points x draws matrix."""
    times = split.test_indices()
    X = chain.design.rows(series.values, times)
    y = chain.design.response(series.values, times)
    rates = np.maximum(par_rates(chain.draws, X), np.finfo(float).tiny)
    return poisson_log_pmf(y[None, :], rates).T


def score_par(chain: ParChain, series: CountSeries, split: DataSplit) -> float:
    """Log predictive score of PAR draws on the test block."""
    _require_test_block(split)
    return log_predictive_score_from_logs(par_log_pmf_matrix(chain, series, split))


def _require_test_block(split: DataSplit) -> None:
    if split.test_len < 1:
        raise ValueError("Split has no test points to score")


def _interval_rows(pmfs: np.ndarray, level: float) -> List[tuple]:
    return [highest_density_set(pmf, level) for pmf in pmfs]


def predictive_trace_btf(draws: Sequence[PosteriorDraw], rules: Sequence[LabelRule], series: CountSeries,
                         split: DataSplit, predictors: Sequence[Predictor], target: int = 0,
                         level: float = 0.95) -> pd.DataFrame:
    """Per test point: t, y_t, predictive mean and highest-density interval."""
    _require_test_block(split)
    contexts = forecast_contexts(series, split, rules, predictors)
    times = split.test_indices()
    support = poisson_support_bound([d.lambdastar[np.unique(d.zstar)].max() for d in draws])
    grid = np.arange(support + 1, dtype=float)
    mean = np.zeros(times.size)
    pmfs = np.zeros((times.size, grid.size))
    for draw in draws:
        weights = atom_weights_batch(draw, contexts)
        used = np.flatnonzero(weights.sum(axis=0) > 0)
        mean += weights[:, used] @ draw.lambdastar[used]
        kernel = np.exp(poisson_log_pmf(grid[None, :], draw.lambdastar[used, None]))
        pmfs += weights[:, used] @ kernel
    mean /= len(draws)
    pmfs /= len(draws)
    bounds = _interval_rows(pmfs, level)
    return pd.DataFrame({
        "t": times + 1,
        "y": series.series(target)[times],
        "mean": mean,
        "lo": [lo for lo, _ in bounds],
        "hi": [hi for _, hi in bounds],
    })


def predictive_trace_par(chain: ParChain, series: CountSeries, split: DataSplit,
                         level: float = 0.95) -> pd.DataFrame:
    """PAR counterpart of `predictive_trace_btf`."""
    _require_test_block(split)
    times = split.test_indices()
    X = chain.design.rows(series.values, times)
    rates = par_rates(chain.draws, X)
    support = poisson_support_bound(np.quantile(rates, 0.999))
    grid = np.arange(support + 1, dtype=float)
    pmfs = np.stack([
        np.exp(poisson_log_pmf(grid[None, :], np.maximum(rates[:, t, None], np.finfo(float).tiny))).mean(axis=0)
        for t in range(times.size)
    ])
    bounds = _interval_rows(pmfs, level)
    return pd.DataFrame({
        "t": times + 1,
        "y": series.series(chain.design.target)[times],
        "mean": rates.mean(axis=0),
        "lo": [lo for lo, _ in bounds],
        "hi": [hi for _, hi in bounds],
    })


def comparison_report(scores: pd.DataFrame, group_by: Sequence[str] = ("scenario", "split")) -> pd.DataFrame:
    """
    Mean and sample sd of replicate scores per model, one row per group.

    Args:
        scores: long table with columns `model`, `score`, `replicate` and the group columns

    Returns:
        Wide table with `<model>_mean`, `<model>_sd` per model and the `winner` (lowest mean)
    """
    group_by = list(group_by)
    missing = {"model", "score"}.difference(scores.columns).union(set(group_by).difference(scores.columns))
    if missing:
        raise ValueError(f"Score table is missing columns: {sorted(missing)}")
    stats = (scores.groupby(group_by + ["model"], sort=False)["score"]
             .agg(mean="mean", sd=lambda s: s.std(ddof=1) if len(s) > 1 else 0.0, n="count")
             .reset_index())
    models = list(dict.fromkeys(scores["model"]))
    wide = stats.pivot(index=group_by, columns="model", values=["mean", "sd"])
    out = pd.DataFrame(index=wide.index)
    for model in models:
        out[f"{model}_mean"] = wide[("mean", model)]
        out[f"{model}_sd"] = wide[("sd", model)]
    means = out[[f"{m}_mean" for m in models]]
    out["winner"] = [models[i] for i in np.nanargmin(means.to_numpy(), axis=1)]
    return out.reset_index()


def format_report(report: pd.DataFrame) -> str:
    """Aligned text with 'mean(sd)' cells, the winner marked with '*'."""
    models = [c[:-5] for c in report.columns if c.endswith("_mean")]
    keys = [c for c in report.columns if not c.endswith(("_mean", "_sd")) and c != "winner"]
    rows: List[Dict] = []
    for _, row in report.iterrows():
        cells = {k: row[k] for k in keys}
        for model in models:
            mark = "*" if row["winner"] == model else ""
            cells[model] = f"{row[f'{model}_mean']:.3f}({row[f'{model}_sd']:.3f}){mark}"
        rows.append(cells)
    return pd.DataFrame(rows).to_string(index=False)
