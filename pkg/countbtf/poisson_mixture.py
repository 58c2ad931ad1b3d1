"""
Pre-training step: finite Poisson mixture fitted by Gibbs sampling, and the
deterministic count -> label rule derived from it.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .core import CountSeries, DataSplit, SchemaError
from .distributions import (
    Rng,
    poisson_log_pmf,
    sample_categorical_rows,
    sample_dirichlet,
    sample_gamma,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MixtureFit:
    """
    Fitted c-component Poisson mixture, components sorted by increasing rate.

    Attributes:
        weights: posterior-mean weights (sum to 1)
        rates: posterior-mean Poisson rates
        weight_trace: retained sweeps x c weights (canonical order), or None
        rate_trace: retained sweeps x c rates (canonical order), or None
    """
    weights: np.ndarray
    rates: np.ndarray
    weight_trace: Optional[np.ndarray] = None
    rate_trace: Optional[np.ndarray] = None

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=float)
        rates = np.asarray(self.rates, dtype=float)
        if weights.shape != rates.shape or weights.ndim != 1 or weights.size == 0:
            raise ValueError("weights and rates must be nonempty vectors of equal length")
        if abs(weights.sum() - 1.0) > 1e-10:
            raise ValueError(f"Mixture weights sum to {weights.sum()}, expected 1")
        if np.any(rates <= 0):
            raise ValueError("Mixture rates must be positive")
        order = np.argsort(rates, kind="stable")
        object.__setattr__(self, "weights", weights[order])
        object.__setattr__(self, "rates", rates[order])

    @property
    def c(self) -> int:
        return self.rates.size

    def to_dict(self) -> Dict:
        return {"c": self.c, "weights": self.weights.tolist(), "rates": self.rates.tolist()}

    @classmethod
    def from_dict(cls, data: Dict) -> "MixtureFit":
        try:
            weights = np.asarray(data["weights"], dtype=float)
            return cls(weights / weights.sum(), np.asarray(data["rates"], dtype=float))
        except (KeyError, TypeError) as e:
            raise SchemaError(f"Mixture entry is malformed: {e}")

    def trace_frame(self) -> pd.DataFrame:
        """Long-format trace with columns iter, i, w_i, mu_i."""
        if self.weight_trace is None:
            return pd.DataFrame(columns=["iter", "i", "w_i", "mu_i"])
        n_iter, c = self.weight_trace.shape
        return pd.DataFrame({
            "iter": np.repeat(np.arange(1, n_iter + 1), c),
            "i": np.tile(np.arange(1, c + 1), n_iter),
            "w_i": self.weight_trace.ravel(),
            "mu_i": self.rate_trace.ravel(),
        })


@dataclass
class MixtureState:
    """Raw Gibbs state: 0-based labels, weights and rates (not canonicalised)."""
    labels: np.ndarray
    weights: np.ndarray
    rates: np.ndarray


class LabelRule:
    """Maps any count to argmax_i PD(y; mu_i), lowest index on ties."""

    def __init__(self, fit: MixtureFit):
        self.fit = fit

    def apply(self, values) -> np.ndarray:
        """0-based labels for an array of counts."""
        y = np.asarray(values, dtype=float)
        scores = poisson_log_pmf(y[..., None], self.fit.rates)
        return np.argmax(scores, axis=-1).astype(np.int64)

    def __call__(self, y: int) -> int:
        return label_count(y, self.fit)


def gibbs_sweep(y: np.ndarray, state: MixtureState, rng: Rng) -> MixtureState:
    """
    One sweep under mu_i ~ Gamma(1, 1), w ~ Dirichlet(1, ..., 1):
    labels, then weights, then rates.
    """
    y = np.asarray(y)
    c = state.rates.size
    log_w = np.log(state.weights)[None, :] + y[:, None] * np.log(state.rates)[None, :] - state.rates[None, :]
    labels = sample_categorical_rows(log_w, rng)
    counts = np.bincount(labels, minlength=c)
    totals = np.bincount(labels, weights=y, minlength=c)
    weights = sample_dirichlet(1.0 + counts, rng)
    rates = sample_gamma(1.0 + totals, 1.0 + counts, rng)
    rates = np.maximum(rates, np.finfo(float).tiny)
    return MixtureState(labels, weights, rates)


def fit_mixture(pre_training, c: int, burnin: int, iters: int, rng: Rng) -> MixtureFit:
    """
    Fit a c-component Poisson mixture to the pre-training counts.

    Components are re-sorted by rate after every retained sweep so that
    posterior means are not corrupted by label switching.

    Args:
        pre_training: nonempty count sequence
        c: number of components
        burnin: discarded sweeps
        iters: retained sweeps
        rng: random stream

    Returns:
        MixtureFit with posterior-mean weights and rates plus traces
    """
    y = np.asarray(pre_training, dtype=np.int64)
    if y.size == 0:
        raise ValueError("Pre-training sequence is empty")
    if c < 1:
        raise ValueError(f"Component count must be >= 1, got {c}")
    if iters < 1:
        raise ValueError("Need at least one retained sweep")
    distinct = np.unique(y).size
    if c > distinct:
        logger.warning(f"c={c} exceeds {distinct} distinct observed counts; "
                       "empty components will be drawn from the prior")

    # spread initial rates across the empirical quantiles
    quantiles = np.quantile(y, (np.arange(c) + 0.5) / c)
    state = MixtureState(
        labels=np.zeros(y.size, dtype=np.int64),
        weights=np.full(c, 1.0 / c),
        rates=np.maximum(quantiles.astype(float), 0.5) + 1e-3 * np.arange(c),
    )

    weight_trace = np.empty((iters, c))
    rate_trace = np.empty((iters, c))
    for sweep in range(burnin + iters):
        state = gibbs_sweep(y, state, rng)
        if sweep >= burnin:
            order = np.argsort(state.rates, kind="stable")
            weight_trace[sweep - burnin] = state.weights[order]
            rate_trace[sweep - burnin] = state.rates[order]

    weights = weight_trace.mean(axis=0)
    fit = MixtureFit(weights / weights.sum(), rate_trace.mean(axis=0), weight_trace, rate_trace)
    logger.info(f"Mixture fitted: rates={np.round(fit.rates, 2).tolist()}")
    return fit


def select_components(fit: MixtureFit, min_weight: float = 0.01, rate_merge_tol: float = 0.10) -> MixtureFit:
    """
    Drop negligible components and merge components with near-equal rates.

    Components with weight below `min_weight` are removed (the heaviest is
    always kept). Adjacent survivors whose rate lies within `rate_merge_tol`
    (relative) of the running group's weighted mean rate are merged into a
    weight-weighted average.
    """
    keep = fit.weights >= min_weight
    keep[np.argmax(fit.weights)] = True
    weights = fit.weights[keep]
    rates = fit.rates[keep]

    merged_w: List[float] = []
    merged_mu: List[float] = []
    for w, mu in zip(weights, rates):
        if merged_mu and (mu - merged_mu[-1]) / merged_mu[-1] < rate_merge_tol:
            total = merged_w[-1] + w
            merged_mu[-1] = (merged_w[-1] * merged_mu[-1] + w * mu) / total
            merged_w[-1] = total
        else:
            merged_w.append(float(w))
            merged_mu.append(float(mu))

    if len(merged_w) == fit.c:
        return fit
    merged_w = np.asarray(merged_w)
    logger.info(f"Reduced mixture from {fit.c} to {merged_w.size} components")
    return MixtureFit(merged_w / merged_w.sum(), np.asarray(merged_mu))


def label_count(y: int, fit: MixtureFit) -> int:
    """1-based label of a single count."""
    if y < 0:
        raise ValueError(f"Count must be nonnegative, got {y}")
    return int(LabelRule(fit).apply(np.asarray([y]))[0]) + 1


def label_series(series, fit: MixtureFit, split: DataSplit) -> np.ndarray:
    """1-based labels for every time point after the pre-training block."""
    values = np.asarray(series)
    return LabelRule(fit).apply(values[split.pre_training_len:split.total]) + 1


def label_matrix(series: CountSeries, rules: Sequence[LabelRule]) -> np.ndarray:
    """0-based labels for every point of every series (M x T)."""
    if len(rules) != series.n_series:
        raise ValueError(f"Need one label rule per series, got {len(rules)} for {series.n_series}")
    return np.stack([rule.apply(series.series(m)) for m, rule in enumerate(rules)])


def fit_series_mixtures(series: CountSeries, split: DataSplit, c: int, burnin: int, iters: int,
                        rng: Rng, min_weight: Optional[float] = 0.01,
                        rate_merge_tol: float = 0.10) -> Tuple[List[MixtureFit], List[MixtureFit]]:
    """
    One independent mixture per series on its own pre-training block.

    Returns:
        (raw fits with traces, reduced fits used for labelling)
    """
    raw_fits, fits = [], []
    for m in range(series.n_series):
        fit = fit_mixture(series.series(m)[split.pre_training_slice()], c, burnin, iters, rng.split(m))
        raw_fits.append(fit)
        fits.append(select_components(fit, min_weight, rate_merge_tol) if min_weight is not None else fit)
    return raw_fits, fits


def save_mixtures(path, fits: Sequence[MixtureFit], names: Sequence[str], extra: Dict,
                  raw_fits: Optional[Sequence[MixtureFit]] = None) -> None:
    """Write the mixture manifest plus one trace CSV per series next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = dict(extra)
    manifest["mixtures"] = []
    for m, (name, fit) in enumerate(zip(names, fits)):
        entry = {"series": name, **fit.to_dict()}
        manifest["mixtures"].append(entry)
        raw = raw_fits[m] if raw_fits is not None else fit
        if raw.weight_trace is not None:
            trace_path = path.with_name(f"{path.stem}_trace_{name}.csv")
            raw.trace_frame().to_csv(trace_path, index=False)
            entry["trace"] = trace_path.name
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def load_mixtures(path) -> Dict:
    """Read a mixture manifest; returns the manifest with `fits` attached."""
    try:
        with open(path) as f:
            manifest = json.load(f)
        manifest["fits"] = [MixtureFit.from_dict(entry) for entry in manifest["mixtures"]]
    except (OSError, KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"Could not read mixture manifest {path}: {e}")
    return manifest
