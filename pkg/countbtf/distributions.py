"""
Seeded random-variate generation and log-density kernels shared by the samplers.
"""

from typing import List, Sequence, Tuple

import numpy as np
from scipy.special import gammaln, logsumexp


class Rng:
    """
    Reproducible random stream keyed by (seed, stream path).

    Streams are split, never shared: `split(i)` derives an independent child
    stream so chains and test points can be fanned out deterministically.
    """

    def __init__(self, seed: int, stream: Tuple[int, ...] = ()):
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        sequence = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        self.generator = np.random.Generator(np.random.PCG64(sequence))

    def split(self, stream_id: int) -> "Rng":
        return Rng(self.seed, self.stream + (int(stream_id),))

    def spawn(self, n: int) -> List["Rng"]:
        return [self.split(i) for i in range(n)]

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream})"

    # thin wrappers so callers never reach for the global numpy state
    def uniform(self, size=None):
        return self.generator.random(size)

    def normal(self, size=None):
        return self.generator.standard_normal(size)

    def poisson(self, lam, size=None):
        return self.generator.poisson(lam, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def gamma(self, shape, rate, size=None):
        return sample_gamma(shape, rate, self, size)

    def beta(self, a, b, size=None):
        return sample_beta(a, b, self, size)


def poisson_log_pmf(y, lam):
    """
    Log Poisson probability y*ln(lam) - lam - ln(y!).

    Raises:
        ValueError: any rate <= 0 or count < 0
    """
    y = np.asarray(y, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0):
        raise ValueError("Poisson rate must be positive")
    if np.any(y < 0):
        raise ValueError("Poisson count must be nonnegative")
    out = y * np.log(lam) - lam - gammaln(y + 1.0)
    return out.item() if out.ndim == 0 else out


def log_sum_exp(values) -> float:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("log_sum_exp of an empty sequence")
    if values.size == 1:
        return float(values.ravel()[0])
    return float(logsumexp(values))


def sample_gamma(shape, rate, rng: Rng, size=None):
    """Gamma variate with mean shape/rate."""
    shape = np.asarray(shape, dtype=float)
    rate = np.asarray(rate, dtype=float)
    if np.any(shape <= 0) or np.any(rate <= 0):
        raise ValueError("Gamma shape and rate must be positive")
    return rng.generator.gamma(shape, 1.0 / rate, size)


def sample_beta(a, b, rng: Rng, size=None):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("Beta parameters must be positive")
    return rng.generator.beta(a, b, size)


def sample_dirichlet(concentrations, rng: Rng) -> np.ndarray:
    """
    Dirichlet draw; a 2-D input draws one simplex vector per row.

    Uses log-gamma variates (Gamma(a) = Gamma(a+1) * U^(1/a)) so that small
    concentrations such as 0.1 do not underflow to all-zero rows.
    """
    alpha = np.asarray(concentrations, dtype=float)
    if alpha.size == 0 or np.any(~np.isfinite(alpha)) or np.any(alpha <= 0):
        raise ValueError("Dirichlet concentrations must be finite and positive")
    g = rng.generator.gamma(alpha + 1.0)
    u = rng.generator.random(alpha.shape)
    log_x = np.log(g) + np.log(u) / alpha
    log_x -= logsumexp(log_x, axis=-1, keepdims=True)
    x = np.exp(log_x)
    return x / x.sum(axis=-1, keepdims=True)


def normalise_log_weights(log_weights) -> np.ndarray:
    """Turn (rows of) log weights into probabilities via log-sum-exp."""
    lw = np.asarray(log_weights, dtype=float)
    top = np.max(lw, axis=-1, keepdims=True)
    if np.any(~np.isfinite(top)):
        raise ValueError("At least one log-weight must be finite")
    with np.errstate(under="ignore"):
        p = np.exp(lw - top)
    return p / p.sum(axis=-1, keepdims=True)


def sample_categorical(log_weights, rng: Rng) -> int:
    """Sample a 0-based index with probability proportional to exp(log_weights)."""
    p = normalise_log_weights(np.asarray(log_weights, dtype=float).ravel())
    index = int(np.searchsorted(np.cumsum(p), rng.uniform() * p.sum(), side="right"))
    return min(index, p.size - 1)


def sample_categorical_rows(log_weights: np.ndarray, rng: Rng) -> np.ndarray:
    """One categorical draw per row of an n x k log-weight matrix."""
    p = normalise_log_weights(log_weights)
    cdf = np.cumsum(p, axis=1)
    u = rng.uniform(p.shape[0])[:, None] * cdf[:, -1:]
    index = (cdf <= u).sum(axis=1)
    return np.minimum(index, p.shape[1] - 1)


def sample_from_probabilities(p: np.ndarray, n: int, rng: Rng) -> np.ndarray:
    """n iid 0-based draws from a single probability vector."""
    cdf = np.cumsum(p)
    index = np.searchsorted(cdf, rng.uniform(n) * cdf[-1], side="right")
    return np.minimum(index, p.size - 1)


def gamma_poisson_log_marginal(S, n, a: float, b: float):
    """
    Log of the Poisson likelihood integrated against Gamma(a, b), per cell,
    without the -sum(ln y!) term: a ln b - lnG(a) + lnG(a+S) - (a+S) ln(n+b).
    Empty cells (n = 0, S = 0) contribute exactly 0.
    """
    S = np.asarray(S, dtype=float)
    n = np.asarray(n, dtype=float)
    return a * np.log(b) - gammaln(a) + gammaln(a + S) - (a + S) * np.log(n + b)


def highest_density_set(pmf: np.ndarray, level: float = 0.95) -> Tuple[int, int]:
    """
    Smallest set of support points holding `level` mass; returns its (min, max).

    Args:
        pmf: probabilities over y = 0..len(pmf)-1
        level: target coverage in (0, 1)
    """
    if not 0 < level < 1:
        raise ValueError(f"level must be in (0, 1), got {level}")
    pmf = np.asarray(pmf, dtype=float)
    order = np.argsort(-pmf, kind="stable")
    cumulative = np.cumsum(pmf[order])
    n_keep = int(np.searchsorted(cumulative, level * cumulative[-1])) + 1
    chosen = order[:n_keep]
    return int(chosen.min()), int(chosen.max())


def poisson_support_bound(rates) -> int:
    """Upper count that leaves negligible Poisson mass above it for all rates."""
    top = float(np.max(rates))
    return int(np.ceil(top + 12.0 * np.sqrt(top) + 25.0))
