"""
Shared data model for count time series.
Series storage, the pre-training/training/test split, hyperparameters and
mixed-radix indexing of the latent cell space.
"""

import logging
from dataclasses import dataclass, field, replace, asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)


class CountBTFError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(CountBTFError, ValueError):
    """Input data or manifest does not match the expected schema."""


class NumericalError(CountBTFError, RuntimeError):
    """A sampler or optimiser hit a numerical limit."""


class CellCapExceeded(NumericalError):
    """The product of cluster counts exceeds the configured cell cap."""


class ConfigError(CountBTFError, ValueError):
    """Experiment configuration is invalid."""


@dataclass(frozen=True)
class CountSeries:
    """
    One or more aligned sequences of nonnegative integer counts.

    Attributes:
        values: M x T integer matrix (M series, T time points)
        names: M series labels
    """
    values: np.ndarray
    names: Tuple[str, ...]

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim == 1:
            values = values[None, :]
        if values.ndim != 2 or values.shape[1] == 0:
            raise SchemaError(f"Count matrix must be M x T with T >= 1, got shape {values.shape}")
        if not np.issubdtype(values.dtype, np.integer):
            if not np.all(np.isfinite(values)) or np.any(values != np.round(values)):
                raise SchemaError("Counts must be integers")
        if np.any(values < 0):
            raise SchemaError("Counts must be nonnegative")
        names = tuple(self.names)
        if len(names) != values.shape[0]:
            raise SchemaError(f"Got {len(names)} names for {values.shape[0]} series")
        values = values.astype(np.int64)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "names", names)

    @property
    def n_series(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    def series(self, m: int) -> np.ndarray:
        """Return series m (0-based) as a 1-D array."""
        return self.values[m]

    def index_of(self, name: str) -> int:
        """Resolve a series name to its row index."""
        try:
            return self.names.index(name)
        except ValueError:
            raise SchemaError(f"Unknown series '{name}'; available: {', '.join(self.names)}")

    @classmethod
    def univariate(cls, values: Sequence[int], name: str = "y") -> "CountSeries":
        return cls(np.asarray(values)[None, :], (name,))

    @classmethod
    def from_csv(cls, path) -> "CountSeries":
        """
        Load series from CSV: header row of series names, one row per time point.

        Raises:
            SchemaError: missing values, non-integer or negative cells
        """
        try:
            frame = pd.read_csv(path)
        except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
            raise SchemaError(f"Could not parse {path}: {e}")
        if frame.empty or frame.shape[1] == 0:
            raise SchemaError(f"{path} has no data rows")
        if frame.isna().any().any():
            raise SchemaError(f"{path} contains missing values")
        for column in frame.columns:
            if not pd.api.types.is_numeric_dtype(frame[column]):
                raise SchemaError(f"Column '{column}' in {path} is not numeric")
        return cls(frame.to_numpy().T, tuple(str(c) for c in frame.columns))

    def to_csv(self, path) -> None:
        frame = pd.DataFrame(self.values.T, columns=list(self.names))
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False)


@dataclass(frozen=True)
class DataSplit:
    """
    Three-way split of a series of length T into pre-training, training and test.

    Time indices used by methods are 0-based: the pre-training block is
    [0, T1), training is [T1, T1+T2) and test is [T1+T2, T).
    """
    pre_training_len: int
    training_len: int
    test_len: int
    max_lag: int

    @property
    def total(self) -> int:
        return self.pre_training_len + self.training_len + self.test_len

    @property
    def training_end(self) -> int:
        return self.pre_training_len + self.training_len

    def likelihood_indices(self) -> np.ndarray:
        """Training points with a full lag window inside the training block."""
        return np.arange(self.pre_training_len + self.max_lag, self.training_end)

    def test_indices(self) -> np.ndarray:
        return np.arange(self.training_end, self.total)

    def pre_training_slice(self) -> slice:
        return slice(0, self.pre_training_len)

    def to_dict(self) -> Dict[str, int]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "DataSplit":
        try:
            return make_split(
                int(data["pre_training_len"]) + int(data["training_len"]) + int(data["test_len"]),
                int(data["pre_training_len"]),
                int(data["training_len"]),
                int(data["max_lag"]),
            )
        except KeyError as e:
            raise SchemaError(f"Split is missing field {e}")


def make_split(T: int, T1: int, T2: int, q: int) -> DataSplit:
    """
    Build a validated split; the test set is the remaining suffix.

    T1 + T2 == T gives an empty test block, which lag selection and fitting
    accept but scoring rejects.

    Raises:
        ValueError: training shorter than the lag window, or T1 + T2 > T
    """
    if q < 1:
        raise ValueError(f"max_lag must be >= 1, got {q}")
    if T1 < 1 or T2 < 1:
        raise ValueError(f"pre-training and training lengths must be positive, got {T1}, {T2}")
    if T2 <= q:
        raise ValueError(f"training shorter than lag window: T2={T2} <= q={q}")
    if T1 + T2 > T:
        raise ValueError(f"T1 + T2 = {T1 + T2} exceeds series length {T}")
    return DataSplit(T1, T2, T - T1 - T2, q)


@dataclass(frozen=True)
class Hyperparams:
    """Prior hyperparameters for lag selection and the tensor-factorisation sampler."""
    gamma_j: float = 0.1
    phi: float = 0.5
    a: Optional[float] = None
    b: float = 1.0
    alpha0: float = 1.0
    L: int = 100
    cell_cap: int = 10 ** 6

    def __post_init__(self):
        for name in ("gamma_j", "phi", "b", "alpha0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"Hyperparameter '{name}' must be positive, got {getattr(self, name)}")
        if self.a is not None and not self.a > 0:
            raise ValueError(f"Hyperparameter 'a' must be positive, got {self.a}")
        if int(self.L) < 1:
            raise ValueError(f"Truncation L must be >= 1, got {self.L}")
        if int(self.cell_cap) < 1:
            raise ValueError(f"cell_cap must be >= 1, got {self.cell_cap}")

    def resolve(self, y_train: np.ndarray) -> "Hyperparams":
        """Fill in the Gamma shape as half the range of the training counts."""
        if self.a is not None:
            return self
        y_train = np.asarray(y_train)
        a = 0.5 * float(y_train.max() - y_train.min()) if y_train.size else 0.0
        if a <= 0:
            logger.warning("Training counts are constant; using Gamma shape a=1.0")
            a = 1.0
        return replace(self, a=a)

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "Hyperparams":
        known = {k: data[k] for k in cls.__dataclass_fields__ if k in data}
        return cls(**known)


class CellIndex:
    """
    Mixed-radix map between cell tuples H = (h_1, ..., h_P) and linear indices.

    Predictor 1 varies fastest. Public tuples are 1-based (h_j in [1, k_j]);
    `encode_rows` works on 0-based allocation matrices used by the samplers.
    """

    def __init__(self, radices: Sequence[int], cell_cap: int = 10 ** 6):
        radices = tuple(int(k) for k in radices)
        if not radices or any(k < 1 for k in radices):
            raise ValueError(f"Radices must be positive, got {radices}")
        size = 1
        for k in radices:
            size *= k
            if size > cell_cap:
                raise CellCapExceeded(
                    f"Cell space {'x'.join(map(str, radices))} exceeds cell_cap={cell_cap}")
        self.radices = radices
        self.size = size
        self.strides = np.cumprod((1,) + radices[:-1]).astype(np.int64)

    def __eq__(self, other):
        return isinstance(other, CellIndex) and self.radices == other.radices

    def __repr__(self):
        return f"CellIndex(radices={self.radices})"

    def encode(self, H: Sequence[int]) -> int:
        if len(H) != len(self.radices):
            raise ValueError(f"Tuple has {len(H)} components, expected {len(self.radices)}")
        linear = 0
        for h, k, stride in zip(H, self.radices, self.strides):
            if not 1 <= h <= k:
                raise ValueError(f"Component {h} outside [1, {k}]")
            linear += (int(h) - 1) * int(stride)
        return linear

    def decode(self, linear: int) -> Tuple[int, ...]:
        if not 0 <= linear < self.size:
            raise ValueError(f"Linear index {linear} outside [0, {self.size})")
        H = []
        for k in self.radices:
            H.append(linear % k + 1)
            linear //= k
        return tuple(H)

    def encode_rows(self, Z: np.ndarray) -> np.ndarray:
        """Encode an n x P matrix of 0-based allocations to linear indices."""
        return np.asarray(Z, dtype=np.int64) @ self.strides


def cell_encode(H: Sequence[int], radices: Sequence[int]) -> int:
    return CellIndex(radices, cell_cap=np.iinfo(np.int64).max).encode(H)


def cell_decode(linear: int, radices: Sequence[int]) -> Tuple[int, ...]:
    return CellIndex(radices, cell_cap=np.iinfo(np.int64).max).decode(linear)


@dataclass(frozen=True)
class Predictor:
    """One lagged label: series `series` (0-based) at lag `lag` (1-based)."""
    series: int
    lag: int


def predictor_layout(n_series: int, q: int) -> List[Predictor]:
    """Series 1 lags 1..q, then series 2 lags 1..q, and so on."""
    return [Predictor(m, j) for m in range(n_series) for j in range(1, q + 1)]


def lag_contexts(labels: np.ndarray, times: np.ndarray, predictors: Sequence[Predictor]) -> np.ndarray:
    """
    Gather the lagged labels D_t for each time in `times`.

    Args:
        labels: M x T matrix of 0-based mixture labels
        times: 0-based time indices (each must be >= max lag)
        predictors: predictor layout

    Returns:
        len(times) x P integer matrix
    """
    labels = np.atleast_2d(labels)
    times = np.asarray(times, dtype=np.int64)
    if times.size and times.min() - max(p.lag for p in predictors) < 0:
        raise ValueError("Lag window reaches before the start of the series")
    columns = [labels[p.series, times - p.lag] for p in predictors]
    return np.stack(columns, axis=1).astype(np.int64) if columns else np.zeros((times.size, 0), np.int64)
