"""
Seeded simulation scenarios.

Three designs: Poisson autoregression, a univariate threshold ("nonlinear")
process driven by a few important lags, and its multivariate version. The
named presets reproduce the simulation tables row by row.
"""

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .core import ConfigError, CountSeries, NumericalError
from .distributions import Rng

logger = logging.getLogger(__name__)

PAR_BURNIN = 200
MULTI_WARMUP = 10
MAX_RATE = 1e8


class Design(str, Enum):
    PAR = "PAR"
    NONLINEAR = "NONLINEAR"
    MULTI_NONLINEAR = "MULTI_NONLINEAR"


@dataclass(frozen=True)
class ScenarioSpec:
    """
    Parameters of one simulation scenario.

    Attributes:
        design: which generator to use
        T: series length
        beta0: PAR intercept
        coefficients: PAR slopes keyed by lag
        lags: important lags of the univariate threshold design
        nu_plus / nu_minus: threshold-design rates
        n_series: number of series (multivariate design)
        dependencies: target series -> important (series, lag) pairs, all 0-based series
    """
    design: Design
    T: int = 5000
    beta0: float = 1.0
    coefficients: Dict[int, float] = field(default_factory=dict)
    lags: Tuple[int, ...] = ()
    nu_plus: float = 1.0
    nu_minus: float = 1.0
    n_series: int = 1
    dependencies: Dict[int, Tuple[Tuple[int, int], ...]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "design", Design(self.design))
        if self.T < 1:
            raise ValueError(f"T must be positive, got {self.T}")
        if any(lag < 1 for lag in list(self.coefficients) + list(self.lags)):
            raise ValueError("Lags must be >= 1")
        if self.nu_plus <= 0 or self.nu_minus <= 0:
            raise ValueError("Threshold rates must be positive")
        if self.design is Design.NONLINEAR and not self.lags:
            raise ValueError("Threshold design needs at least one important lag")
        for target, pairs in self.dependencies.items():
            if not 0 <= target < self.n_series:
                raise ValueError(f"Target series {target} outside [0, {self.n_series})")
            for m, lag in pairs:
                if not 0 <= m < self.n_series or lag < 1:
                    raise ValueError(f"Bad dependency ({m}, {lag}) for target {target}")

    @property
    def max_lag(self) -> int:
        lags = list(self.coefficients) + list(self.lags)
        lags += [lag for pairs in self.dependencies.values() for _, lag in pairs]
        return max(lags, default=1)

    def series_names(self) -> List[str]:
        if self.n_series == 1:
            return ["y"]
        return [f"y{m + 1}" for m in range(self.n_series)]

    def to_dict(self) -> Dict:
        """JSON form; series indices in dependencies are 1-based."""
        return {
            "design": self.design.value,
            "T": self.T,
            "beta0": self.beta0,
            "coefficients": {str(k): v for k, v in sorted(self.coefficients.items())},
            "lags": list(self.lags),
            "nu_plus": self.nu_plus,
            "nu_minus": self.nu_minus,
            "n_series": self.n_series,
            "dependencies": {str(t + 1): [[m + 1, lag] for m, lag in pairs]
                             for t, pairs in sorted(self.dependencies.items())},
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "ScenarioSpec":
        try:
            return cls(
                design=Design(data["design"]),
                T=int(data.get("T", 5000)),
                beta0=float(data.get("beta0", 1.0)),
                coefficients={int(k): float(v) for k, v in data.get("coefficients", {}).items()},
                lags=tuple(int(v) for v in data.get("lags", ())),
                nu_plus=float(data.get("nu_plus", 1.0)),
                nu_minus=float(data.get("nu_minus", 1.0)),
                n_series=int(data.get("n_series", 1)),
                dependencies={int(t) - 1: tuple((int(m) - 1, int(lag)) for m, lag in pairs)
                              for t, pairs in data.get("dependencies", {}).items()},
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"Invalid scenario spec: {e}")

    def with_length(self, T: int) -> "ScenarioSpec":
        data = self.to_dict()
        data["T"] = T
        return ScenarioSpec.from_dict(data)


def gen_par(spec: ScenarioSpec, rng: Rng) -> CountSeries:
    """y_t ~ PD(exp(beta0 + sum beta_i ln(y_{t-i} + 1))) after a burn-in from zero history."""
    q = spec.max_lag
    lags = np.array(sorted(spec.coefficients), dtype=np.int64)
    betas = np.array([spec.coefficients[lag] for lag in lags])
    y = np.zeros(q + PAR_BURNIN + spec.T, dtype=np.int64)
    log_history = np.zeros(y.size)
    for t in range(q, y.size):
        rate = np.exp(spec.beta0 + betas @ log_history[t - lags]) if lags.size else np.exp(spec.beta0)
        if not rate < MAX_RATE:
            raise NumericalError(f"PAR generator exploded at t={t} (rate {rate:.3g})")
        y[t] = rng.poisson(rate)
        log_history[t] = np.log(y[t] + 1.0)
    return CountSeries.univariate(y[q + PAR_BURNIN:], spec.series_names()[0])


def gen_nonlinear(spec: ScenarioSpec, rng: Rng) -> CountSeries:
    """
    Threshold process: y_t ~ PD(nu_plus) when the important lags sum to at
    least K*nu_plus, else PD(nu_minus). The first max-lag points are PD(nu_minus).
    """
    lags = np.asarray(spec.lags, dtype=np.int64)
    start = int(lags.max())
    threshold = lags.size * spec.nu_plus
    y = np.zeros(spec.T, dtype=np.int64)
    y[:start] = rng.poisson(spec.nu_minus, size=min(start, spec.T))
    for t in range(start, spec.T):
        rate = spec.nu_plus if y[t - lags].sum() >= threshold else spec.nu_minus
        y[t] = rng.poisson(rate)
    return CountSeries.univariate(y, spec.series_names()[0])


def gen_multi_nonlinear(spec: ScenarioSpec, rng: Rng) -> CountSeries:
    """
    Multivariate threshold process. All series are PD(nu_minus) for the first
    ten points; afterwards a series with declared important lags draws
    PD(nu_plus) when those lagged values sum to at least nu_minus, and every
    other series stays PD(nu_minus).
    """
    M = spec.n_series
    start = max(MULTI_WARMUP, spec.max_lag)
    y = np.zeros((M, spec.T), dtype=np.int64)
    y[:, :start] = rng.poisson(spec.nu_minus, size=(M, min(start, spec.T)))
    deps = {target: (np.array([m for m, _ in pairs]), np.array([lag for _, lag in pairs]))
            for target, pairs in spec.dependencies.items() if pairs}
    for t in range(start, spec.T):
        rates = np.full(M, spec.nu_minus)
        for target, (series, lags) in deps.items():
            if y[series, t - lags].sum() >= spec.nu_minus:
                rates[target] = spec.nu_plus
        y[:, t] = rng.poisson(rates)
    return CountSeries(y, tuple(spec.series_names()))


GENERATORS = {
    Design.PAR: gen_par,
    Design.NONLINEAR: gen_nonlinear,
    Design.MULTI_NONLINEAR: gen_multi_nonlinear,
}


def generate(spec: ScenarioSpec, rng: Rng) -> CountSeries:
    return GENERATORS[spec.design](spec, rng)


def _par(**coefficients) -> ScenarioSpec:
    return ScenarioSpec(Design.PAR, beta0=1.0, coefficients={int(k[1:]): v for k, v in coefficients.items()})


def _threshold(lags, nu_plus, nu_minus) -> ScenarioSpec:
    return ScenarioSpec(Design.NONLINEAR, lags=tuple(lags), nu_plus=nu_plus, nu_minus=nu_minus)


def _multi(n_series, deps, nu_plus=10.0, nu_minus=20.0) -> ScenarioSpec:
    """deps use 1-based (series, lag) pairs keyed by 1-based target."""
    return ScenarioSpec(
        Design.MULTI_NONLINEAR, n_series=n_series, nu_plus=nu_plus, nu_minus=nu_minus,
        dependencies={t - 1: tuple((m - 1, lag) for m, lag in pairs) for t, pairs in deps.items()},
    )


SCENARIOS: Dict[str, ScenarioSpec] = {
    "table1-A": _par(b1=0.5),
    "table1-B": _par(b7=0.5),
    "table1-C": _par(b29=0.7),
    "table1-D": _par(b1=-0.5, b7=0.5),
    "table1-E": _par(b19=-0.5, b29=0.5),
    "table1-F": _par(b1=-0.5, b7=-0.5, b19=0.5),
    "table2-A": _threshold([1], 30.0, 50.0),
    "table2-B": _threshold([7], 30.0, 50.0),
    "table2-C": _threshold([3, 7], 20.0, 100.0),
    "table2-D": _threshold([7, 9], 20.0, 100.0),
    "table2-E": _threshold([3, 7, 9], 20.0, 100.0),
    "table2-F": _threshold([7, 8, 9], 20.0, 100.0),
    "table3-A": _multi(2, {1: [(1, 1), (2, 1)]}),
    "table3-B": _multi(2, {1: [(1, 3), (2, 5)]}),
    "table3-C": _multi(2, {1: [(2, 1)], 2: [(1, 2)]}),
    "table3-D": _multi(2, {1: [(1, 3), (2, 4)], 2: [(1, 1), (2, 3), (2, 5)]}),
    "table3-E": _multi(3, {1: [(2, 1)], 2: [(3, 2)], 3: [(1, 3)]}),
    "table3-F": _multi(3, {1: [(1, 3), (2, 4), (3, 1)], 2: [(1, 1), (2, 2), (3, 5)],
                           3: [(1, 3), (2, 2), (3, 5)]}, nu_plus=20.0, nu_minus=60.0),
}


def resolve_scenario(name_or_path: Union[str, Path], T: Optional[int] = None) -> ScenarioSpec:
    """
    Look up a named preset or load a JSON scenario file.

    Raises:
        ConfigError: unknown name or unreadable file
    """
    if str(name_or_path) in SCENARIOS:
        spec = SCENARIOS[str(name_or_path)]
    else:
        path = Path(name_or_path)
        if not path.exists():
            raise ConfigError(f"Unknown scenario '{name_or_path}'; presets: {', '.join(SCENARIOS)}")
        try:
            with open(path) as f:
                spec = ScenarioSpec.from_dict(json.load(f))
        except json.JSONDecodeError as e:
            raise ConfigError(f"Could not parse scenario file {path}: {e}")
    return spec.with_length(T) if T else spec


def simulate(name_or_spec: Union[str, Path, ScenarioSpec], seed: int, T: Optional[int] = None,
             stream: Tuple[int, ...] = ()) -> CountSeries:
    """Generate one scenario realisation from (spec, seed, stream)."""
    if isinstance(name_or_spec, ScenarioSpec):
        spec = name_or_spec.with_length(T) if T else name_or_spec
    else:
        spec = resolve_scenario(name_or_spec, T)
    logger.info(f"Simulating {spec.design.value} scenario, T={spec.T}, seed={seed}")
    return generate(spec, Rng(seed, stream))
