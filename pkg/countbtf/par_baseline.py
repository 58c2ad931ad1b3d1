"""
Poisson autoregressive baseline.

log lambda_t = beta_0 + sum_i beta_i ln(y_{t-i} + 1) (+ sum_m zeta_m y_{m,t-1} for
the multivariate form). Maximum likelihood by IRLS for AIC/BIC order
selection, then adaptive random-walk Metropolis under normal priors.
"""

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import statsmodels.api as sm
from scipy.special import gammaln
from statsmodels.tools.sm_exceptions import PerfectSeparationWarning

from .core import NumericalError, SchemaError
from .distributions import Rng, poisson_log_pmf

logger = logging.getLogger(__name__)

MAX_ABS_COEFFICIENT = 50.0


@dataclass(frozen=True)
class ParDesign:
    """
    Design-row builder for one target series.

    Attributes:
        q: autoregressive order on the target's own log-shifted lags
        target: 0-based target series
        cross_series: 0-based series entering through raw lag-1 counts
    """
    q: int
    target: int = 0
    cross_series: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.q < 0:
            raise ValueError(f"Order must be >= 0, got {self.q}")
        if self.target in self.cross_series:
            raise ValueError("Target series cannot be its own cross term")

    @classmethod
    def multivariate(cls, q: int, target: int, n_series: int) -> "ParDesign":
        return cls(q, target, tuple(m for m in range(n_series) if m != target))

    @property
    def max_lag(self) -> int:
        return max(self.q, 1 if self.cross_series else 0)

    @property
    def n_params(self) -> int:
        return 1 + self.q + len(self.cross_series)

    @property
    def names(self) -> List[str]:
        names = ["beta_0"] + [f"beta_{i}" for i in range(1, self.q + 1)]
        return names + [f"zeta_{m + 1}" for m in self.cross_series]

    def rows(self, values: np.ndarray, times: np.ndarray) -> np.ndarray:
        """Design matrix for the given 0-based times (each >= max_lag)."""
        values = np.atleast_2d(np.asarray(values, dtype=float))
        times = np.asarray(times, dtype=np.int64)
        if times.size and times.min() < self.max_lag:
            raise ValueError(f"Times must be >= {self.max_lag} for this design")
        own = values[self.target]
        columns = [np.ones(times.size)]
        columns += [np.log(own[times - i] + 1.0) for i in range(1, self.q + 1)]
        columns += [values[m, times - 1] for m in self.cross_series]
        return np.stack(columns, axis=1)

    def response(self, values: np.ndarray, times: np.ndarray) -> np.ndarray:
        return np.atleast_2d(values)[self.target, np.asarray(times, dtype=np.int64)].astype(float)

    def to_dict(self) -> Dict:
        return {"q": self.q, "target": self.target, "cross_series": list(self.cross_series)}

    @classmethod
    def from_dict(cls, data: Dict) -> "ParDesign":
        return cls(int(data["q"]), int(data.get("target", 0)), tuple(data.get("cross_series", ())))


def poisson_loglik(beta: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
    eta = X @ beta
    return float(np.sum(y * eta - np.exp(eta) - gammaln(y + 1.0)))


@dataclass
class MleFit:
    """IRLS result."""
    coefficients: np.ndarray
    loglik: float
    iterations: int
    converged: bool
    diverged: bool
    n_obs: int

    def check(self) -> "MleFit":
        """Raise if the fit diverged."""
        if self.diverged:
            raise NumericalError(
                f"PAR fit diverged: |coefficient| > {MAX_ABS_COEFFICIENT} "
                f"({np.round(self.coefficients, 2).tolist()})")
        return self


def fit_irls(X: np.ndarray, y: np.ndarray, maxiter: int = 100, tol: float = 1e-10) -> MleFit:
    """
    Poisson log-link GLM fitted by statsmodels' IRLS.

    A fit is flagged as diverged when any |coefficient| exceeds 50 or the
    fitted means collapse onto the data (no finite MLE).
    """
    y = np.asarray(y, dtype=float)
    if X.shape[0] <= X.shape[1]:
        raise ValueError(f"Need more observations ({X.shape[0]}) than parameters ({X.shape[1]})")
    start = np.zeros(X.shape[1])
    start[0] = np.log(y.mean() + 0.1)
    model = sm.GLM(y, X, family=sm.families.Poisson())
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            result = model.fit(method="IRLS", start_params=start, maxiter=maxiter, tol=tol)
        except (ValueError, np.linalg.LinAlgError) as e:
            raise NumericalError(f"IRLS failed: {e}")
    separated = any(issubclass(w.category, PerfectSeparationWarning) for w in caught)

    beta = np.asarray(result.params, dtype=float)
    iterations = int(result.fit_history["iteration"])
    converged = bool(result.converged) and not separated
    diverged = separated or bool(np.max(np.abs(beta)) > MAX_ABS_COEFFICIENT)
    if not converged:
        logger.warning(f"IRLS did not converge after {iterations} iterations; returning last iterate")
    if diverged:
        logger.warning(f"IRLS diverging: coefficients {np.round(beta, 2).tolist()}")
    return MleFit(beta, poisson_loglik(beta, X, y), iterations, converged, diverged, y.size)


def fit_mle(values, q: int, design: Optional[ParDesign] = None, start: Optional[int] = None,
            end: Optional[int] = None) -> MleFit:
    """
    Maximum likelihood PAR(q) fit over times [start, end).

    Args:
        values: 1-D series or M x T matrix
        q: order (ignored when `design` is given)
        design: explicit design, e.g. a multivariate one
        start: first conditioned time point (default: the design's max lag)
        end: one past the last time point (default: series length)
    """
    values = np.atleast_2d(values)
    design = design or ParDesign(q)
    start = design.max_lag if start is None else start
    end = values.shape[1] if end is None else end
    times = np.arange(start, end)
    if times.size <= design.n_params:
        raise ValueError(f"Training length {times.size} too short for {design.n_params} parameters")
    return fit_irls(design.rows(values, times), design.response(values, times))


def order_table(values, q_max: int, end: Optional[int] = None, target: int = 0,
                n_series: int = 1) -> pd.DataFrame:
    """
    AIC and BIC of every order 1..q_max, all conditioned on the same first
    q_max points so the criteria are comparable.
    """
    if q_max < 1:
        raise ValueError(f"q_max must be >= 1, got {q_max}")
    values = np.atleast_2d(values)
    rows = []
    for q in range(1, q_max + 1):
        design = ParDesign.multivariate(q, target, n_series) if n_series > 1 else ParDesign(q, target)
        fit = fit_mle(values, q, design, start=q_max, end=end)
        p = design.n_params
        rows.append({
            "q": q,
            "n_params": p,
            "n_obs": fit.n_obs,
            "loglik": fit.loglik,
            "aic": 2 * p - 2 * fit.loglik,
            "bic": p * np.log(fit.n_obs) - 2 * fit.loglik,
        })
    return pd.DataFrame(rows)


def select_order(values, q_max: int, criterion: str = "BIC", **kwargs) -> int:
    """Order minimising AIC or BIC over 1..q_max."""
    column = criterion.lower()
    if column not in ("aic", "bic"):
        raise ValueError(f"criterion must be AIC or BIC, got {criterion}")
    table = order_table(values, q_max, **kwargs)
    q = int(table.loc[table[column].idxmin(), "q"])
    logger.info(f"{criterion.upper()} selects order q={q}")
    return q


@dataclass(frozen=True)
class ParPrior:
    """Independent N(0, 1/precision) priors on intercept and slopes."""
    intercept_precision: float = 1e-6
    coefficient_precision: float = 1e-4

    def precisions(self, n_params: int) -> np.ndarray:
        out = np.full(n_params, self.coefficient_precision)
        out[0] = self.intercept_precision
        return out

    def log_density(self, beta: np.ndarray) -> float:
        return float(-0.5 * np.sum(self.precisions(beta.size) * beta ** 2))


@dataclass
class ParChain:
    """Retained MH draws for one target series."""
    draws: np.ndarray
    design: ParDesign
    acceptance: float
    mle: Optional[np.ndarray] = None
    extra: Dict = field(default_factory=dict)

    @property
    def names(self) -> List[str]:
        return self.design.names


def mh_chain(values, design: ParDesign, prior: ParPrior = ParPrior(), burnin: int = 5000,
             iters: int = 10000, rng: Optional[Rng] = None, start: Optional[int] = None,
             end: Optional[int] = None, mle: Optional[MleFit] = None) -> ParChain:
    """
    Adaptive random-walk Metropolis on the joint coefficient vector.

    The proposal covariance is (2.38^2/d) times the inverse posterior
    curvature at the MLE; its scale adapts toward 0.234 acceptance during
    burn-in and is frozen afterwards.
    """
    rng = rng or Rng(0)
    values = np.atleast_2d(values)
    start = design.max_lag if start is None else start
    end = values.shape[1] if end is None else end
    times = np.arange(start, end)
    X = design.rows(values, times)
    y = design.response(values, times)
    mle = mle or fit_irls(X, y)

    d = design.n_params
    mu = np.exp(X @ mle.coefficients)
    curvature = X.T @ (X * mu[:, None]) + np.diag(prior.precisions(d))
    chol = np.linalg.cholesky(np.linalg.inv(curvature) * 2.38 ** 2 / d)

    def log_target(beta):
        return poisson_loglik(beta, X, y) + prior.log_density(beta)

    beta = mle.coefficients.copy()
    current = log_target(beta)
    log_scale = 0.0
    draws = np.empty((iters, d))
    accepted = 0
    for it in range(burnin + iters):
        proposal = beta + np.exp(log_scale) * chol @ rng.normal(d)
        with np.errstate(over="ignore"):
            candidate = log_target(proposal)
        accept = np.isfinite(candidate) and np.log(rng.uniform()) < candidate - current
        if accept:
            beta, current = proposal, candidate
        if it < burnin:
            log_scale += (float(accept) - 0.234) / np.sqrt(it + 1.0)
        else:
            accepted += accept
            draws[it - burnin] = beta

    acceptance = accepted / iters if iters else 0.0
    if not 0.05 <= acceptance <= 0.6:
        logger.warning(f"MH acceptance rate {acceptance:.3f} outside [0.05, 0.6]")
    logger.info(f"PAR chain done: {iters} draws, acceptance {acceptance:.3f}")
    return ParChain(draws, design, acceptance, mle.coefficients)


def par_rates(coefficients: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Poisson rates exp(X beta); a draws x params coefficient matrix gives draws x rows."""
    with np.errstate(over="ignore"):
        return np.exp(np.asarray(coefficients) @ X.T)


def par_transition_pmf(coefficients: np.ndarray, history, y: int, design: Optional[ParDesign] = None) -> float:
    """
    PD(y; lambda_t) for the next point after `history`.

    Args:
        coefficients: one coefficient vector
        history: 1-D series or M x t matrix ending just before the predicted point
        y: count
        design: model design (default univariate with order len(coefficients) - 1)
    """
    history = np.atleast_2d(history)
    design = design or ParDesign(len(coefficients) - 1)
    # append a placeholder column so the design can address time t
    padded = np.concatenate([history, np.zeros((history.shape[0], 1))], axis=1)
    x = design.rows(padded, np.asarray([history.shape[1]]))
    return float(np.exp(poisson_log_pmf(y, par_rates(coefficients, x)[0])))


def coefficient_summary(chain: ParChain) -> pd.DataFrame:
    """Posterior mean and sd per coefficient."""
    return pd.DataFrame({
        "coefficient": chain.names,
        "mean": chain.draws.mean(axis=0),
        "sd": chain.draws.std(axis=0, ddof=1) if chain.draws.shape[0] > 1 else np.zeros(chain.design.n_params),
    })


def save_chains(path, chains: List[ParChain], manifest: Dict) -> Path:
    """Directory with one draws_<target>.npy per chain plus manifest.json."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for chain in chains:
        name = f"draws_{chain.design.target}.npy"
        np.save(path / name, chain.draws)
        entries.append({"file": name, "design": chain.design.to_dict(), "acceptance": chain.acceptance,
                        "mle": None if chain.mle is None else chain.mle.tolist()})
        coefficient_summary(chain).to_csv(path / f"summary_{chain.design.target}.csv", index=False)
    body = dict(manifest)
    body.update({"model": "par", "chains": entries})
    with open(path / "manifest.json", "w") as f:
        json.dump(body, f, indent=2, sort_keys=True)
    return path


def load_chains(path) -> Tuple[List[ParChain], Dict]:
    path = Path(path)
    try:
        with open(path / "manifest.json") as f:
            manifest = json.load(f)
        if manifest.get("model") != "par":
            raise SchemaError(f"{path} does not hold PAR draws")
        chains = []
        for entry in manifest["chains"]:
            design = ParDesign.from_dict(entry["design"])
            draws = np.load(path / entry["file"])
            if draws.ndim != 2 or draws.shape[1] != design.n_params:
                raise SchemaError(f"{entry['file']} has shape {draws.shape}, expected (n, {design.n_params})")
            mle = None if entry.get("mle") is None else np.asarray(entry["mle"])
            chains.append(ParChain(draws, design, float(entry["acceptance"]), mle))
    except (OSError, KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"Could not read PAR draws from {path}: {e}")
    return chains, manifest
