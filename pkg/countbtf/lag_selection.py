"""
Important-lag selection.

Split/merge Metropolis-Hastings over the per-predictor cluster counts K and
the partitions C of label levels, scored with the Gamma-marginalised Poisson
likelihood. Produces inclusion proportions per lag and the fixed (K, C) used
by the main sampler.
"""

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import gammaln

from .core import CellCapExceeded, CellIndex, Hyperparams, Predictor, SchemaError
from .distributions import Rng, gamma_poisson_log_marginal

logger = logging.getLogger(__name__)


def _canonical(assign: Sequence[int]) -> Tuple[int, ...]:
    """Relabel clusters in order of first appearance."""
    mapping: Dict[int, int] = {}
    out = []
    for r in assign:
        if r not in mapping:
            mapping[r] = len(mapping)
        out.append(mapping[r])
    return tuple(out)


@dataclass(frozen=True)
class Partition:
    """
    Hard grouping of each predictor's label levels into k_j nonempty clusters.

    assignments[j][omega] is the 0-based cluster of 0-based level omega.
    """
    assignments: Tuple[Tuple[int, ...], ...]

    def __post_init__(self):
        canonical = tuple(_canonical(a) for a in self.assignments)
        if any(len(a) == 0 for a in canonical):
            raise ValueError("Every predictor needs at least one label level")
        object.__setattr__(self, "assignments", canonical)

    @classmethod
    def trivial(cls, levels: Sequence[int]) -> "Partition":
        """All levels of every predictor in one cluster (no important lags)."""
        return cls(tuple((0,) * c for c in levels))

    @property
    def k(self) -> Tuple[int, ...]:
        return tuple(max(a) + 1 for a in self.assignments)

    @property
    def levels(self) -> Tuple[int, ...]:
        return tuple(len(a) for a in self.assignments)

    def cluster_map(self, j: int) -> np.ndarray:
        return np.asarray(self.assignments[j], dtype=np.int64)

    def clusters(self, j: int) -> List[Tuple[int, ...]]:
        """Levels grouped by cluster for predictor j."""
        groups: List[List[int]] = [[] for _ in range(self.k[j])]
        for level, r in enumerate(self.assignments[j]):
            groups[r].append(level)
        return [tuple(g) for g in groups]

    def replace(self, j: int, assign: Sequence[int]) -> "Partition":
        assignments = list(self.assignments)
        assignments[j] = tuple(assign)
        return Partition(tuple(assignments))

    def allocate(self, D: np.ndarray) -> np.ndarray:
        """Hard cluster allocations (n x P, 0-based) induced by contexts D."""
        D = np.asarray(D, dtype=np.int64)
        if D.shape[1] != len(self.assignments):
            raise ValueError(f"Contexts have {D.shape[1]} predictors, partition has {len(self.assignments)}")
        return np.stack([self.cluster_map(j)[D[:, j]] for j in range(D.shape[1])], axis=1)

    def to_dict(self) -> Dict:
        return {"k": list(self.k), "assignments": [list(a) for a in self.assignments]}

    @classmethod
    def from_dict(cls, data: Dict) -> "Partition":
        try:
            return cls(tuple(tuple(int(r) for r in a) for a in data["assignments"]))
        except (KeyError, TypeError) as e:
            raise SchemaError(f"Partition entry is malformed: {e}")


@dataclass
class CellStatistics:
    """Per-cell counts n_H and sums S_H plus the cell of every training point."""
    index: CellIndex
    cells: np.ndarray
    n: np.ndarray
    S: np.ndarray


def cell_statistics(y: np.ndarray, D: np.ndarray, partition: Partition,
                    cell_cap: int = 10 ** 6) -> CellStatistics:
    """
    Tabulate training points by the cell their contexts fall in.

    Raises:
        CellCapExceeded: the partition's cell space is larger than cell_cap
    """
    y = np.asarray(y)
    index = CellIndex(partition.k, cell_cap)
    cells = index.encode_rows(partition.allocate(D))
    n = np.bincount(cells, minlength=index.size)
    S = np.bincount(cells, weights=y, minlength=index.size)
    return CellStatistics(index, cells, n, S)


def log_marginal(y: np.ndarray, D: np.ndarray, partition: Partition, a: float, b: float,
                 cell_cap: int = 10 ** 6) -> float:
    """
    Log marginal likelihood of the training counts given the partition, with
    one Gamma(a, b) Poisson rate per cell integrated out.
    """
    y = np.asarray(y)
    index = CellIndex(partition.k, cell_cap)
    cells = index.encode_rows(partition.allocate(D))
    occupied, inverse = np.unique(cells, return_inverse=True)
    n = np.bincount(inverse, minlength=occupied.size)
    S = np.bincount(inverse, weights=y, minlength=occupied.size)
    return float(gamma_poisson_log_marginal(S, n, a, b).sum() - gammaln(y + 1.0).sum())


@lru_cache(maxsize=None)
def log_stirling2(n: int, k: int) -> float:
    """Log of the Stirling number of the second kind S(n, k)."""
    row = [1] + [0] * k
    for i in range(1, n + 1):
        new = [0] * (k + 1)
        for j in range(1, min(i, k) + 1):
            new[j] = j * row[j] + row[j - 1]
        row = new
    if row[k] == 0:
        return -math.inf
    return math.log(row[k])


def log_prior_k(k: int, levels: int, lag: int, phi: float) -> float:
    """p(k_j = k) proportional to exp(-phi*lag*k), uniform over partitions given k."""
    return -phi * lag * k - log_stirling2(levels, k)


def _up_prob(k: int, levels: int) -> float:
    if k >= levels:
        return 0.0
    return 1.0 if k == 1 else 0.5


def _down_prob(k: int, levels: int) -> float:
    if k <= 1:
        return 0.0
    return 1.0 if k == levels else 0.5


def _split_log_prob(partition: Partition, j: int, size: int) -> float:
    """Log probability of proposing one specific split of a cluster with `size` levels."""
    k = partition.k[j]
    n_splittable = sum(1 for g in partition.clusters(j) if len(g) >= 2)
    return (math.log(_up_prob(k, partition.levels[j])) - math.log(n_splittable)
            - math.log(2 ** (size - 1) - 1))


def _merge_log_prob(partition: Partition, j: int) -> float:
    """Log probability of proposing one specific merge of a cluster pair."""
    k = partition.k[j]
    return math.log(_down_prob(k, partition.levels[j])) - math.log(k * (k - 1) / 2)


def proposal_log_ratio(current: Partition, proposed: Partition, j: int) -> float:
    """log q(proposed -> current) - log q(current -> proposed) for a split or merge of predictor j."""
    before = set(current.clusters(j))
    after = set(proposed.clusters(j))
    if proposed.k[j] == current.k[j] + 1:
        (split_cluster,) = before - after
        forward = _split_log_prob(current, j, len(split_cluster))
        reverse = _merge_log_prob(proposed, j)
    elif proposed.k[j] == current.k[j] - 1:
        (merged_cluster,) = after - before
        forward = _merge_log_prob(current, j)
        reverse = _split_log_prob(proposed, j, len(merged_cluster))
    else:
        raise ValueError("Proposals must change k_j by exactly one")
    return reverse - forward


def propose_split(partition: Partition, j: int, rng: Rng) -> Tuple[Partition, float]:
    """
    Split a uniformly chosen splittable cluster into a uniform nonempty
    unordered bipartition of its levels.

    Raises:
        ValueError: no cluster of predictor j has two or more levels
    """
    groups = [g for g in partition.clusters(j) if len(g) >= 2]
    if not groups:
        raise ValueError(f"Predictor {j} has no splittable cluster")
    members = groups[int(rng.integers(len(groups)))]
    s = len(members)
    # first member stays put; a nonzero bit mask picks the movers
    mask = int(rng.integers(1, 2 ** (s - 1)))
    assign = list(partition.assignments[j])
    new_cluster = partition.k[j]
    for i, level in enumerate(members[1:]):
        if mask >> i & 1:
            assign[level] = new_cluster
    proposed = partition.replace(j, assign)
    return proposed, proposal_log_ratio(partition, proposed, j)


def propose_merge(partition: Partition, j: int, rng: Rng) -> Tuple[Partition, float]:
    """
    Merge a uniformly chosen unordered pair of clusters.

    Raises:
        ValueError: predictor j has a single cluster
    """
    k = partition.k[j]
    if k < 2:
        raise ValueError(f"Predictor {j} has a single cluster; nothing to merge")
    r1 = int(rng.integers(k))
    r2 = int(rng.integers(k - 1))
    if r2 >= r1:
        r2 += 1
    keep, drop = min(r1, r2), max(r1, r2)
    assign = [keep if r == drop else r for r in partition.assignments[j]]
    proposed = partition.replace(j, assign)
    return proposed, proposal_log_ratio(partition, proposed, j)


@dataclass
class KTrace:
    """
    Retained lag-selection iterations.

    Attributes:
        k_samples: iterations x P matrix of cluster counts
        predictors: predictor layout
        levels: label levels per predictor
        proposed / accepted: move counts keyed by 'split' and 'merge'
    """
    k_samples: np.ndarray
    predictors: List[Predictor]
    levels: Tuple[int, ...]
    proposed: Dict[str, int] = field(default_factory=lambda: {"split": 0, "merge": 0})
    accepted: Dict[str, int] = field(default_factory=lambda: {"split": 0, "merge": 0})

    def inclusion_proportions(self) -> np.ndarray:
        """Fraction of iterations with k_j > 1, per predictor."""
        if self.k_samples.shape[0] == 0:
            return np.zeros(self.k_samples.shape[1])
        return (self.k_samples > 1).mean(axis=0)

    def acceptance_rates(self) -> Dict[str, float]:
        return {move: self.accepted[move] / self.proposed[move] if self.proposed[move] else 0.0
                for move in self.proposed}

    def n_important_distribution(self) -> pd.Series:
        """Relative frequency of the number of important predictors."""
        counts = (self.k_samples > 1).sum(axis=1)
        return pd.Series(counts).value_counts(normalize=True).sort_index()

    def cell_count_distribution(self) -> pd.Series:
        """Relative frequency of prod_j k_j."""
        sizes = np.prod(self.k_samples, axis=1)
        return pd.Series(sizes).value_counts(normalize=True).sort_index()

    def to_frame(self) -> pd.DataFrame:
        """Long format: iter, j, k_j (1-based iteration and predictor)."""
        n_iter, P = self.k_samples.shape
        return pd.DataFrame({
            "iter": np.repeat(np.arange(1, n_iter + 1), P),
            "j": np.tile(np.arange(1, P + 1), n_iter),
            "k_j": self.k_samples.ravel(),
        })

    def inclusion_frame(self, series_names: Optional[Sequence[str]] = None) -> pd.DataFrame:
        proportions = self.inclusion_proportions()
        names = [series_names[p.series] if series_names else str(p.series + 1) for p in self.predictors]
        return pd.DataFrame({
            "series": names,
            "lag": [p.lag for p in self.predictors],
            "proportion": proportions,
        })


def important_lags(trace: KTrace, threshold: float = 0.5) -> List[Predictor]:
    """Predictors whose inclusion proportion exceeds the threshold."""
    proportions = trace.inclusion_proportions()
    return [p for p, share in zip(trace.predictors, proportions) if share > threshold]


def modal_partition(k_samples: np.ndarray, partitions: Sequence[Partition]) -> Partition:
    """
    Most-visited K, then for each predictor the most-visited partition among
    iterations whose k_j matches the modal value.
    """
    modal_k, _ = Counter(map(tuple, k_samples)).most_common(1)[0]
    assignments = []
    for j, k_j in enumerate(modal_k):
        candidates = Counter(p.assignments[j] for p in partitions if p.k[j] == k_j)
        assignments.append(candidates.most_common(1)[0][0])
    return Partition(tuple(assignments))


def sample_K(y: np.ndarray, D: np.ndarray, predictors: Sequence[Predictor], levels: Sequence[int],
             hyperparams: Hyperparams, iters: int, burnin: int, rng: Rng,
             initial: Optional[Partition] = None,
             use_likelihood: bool = True) -> Tuple[KTrace, Partition]:
    """
    Run the split/merge chain over (K, C).

    Args:
        y: training counts
        D: n x P 0-based label contexts
        predictors: layout of the P predictors (gives each its lag for the prior)
        levels: number of label levels c_j per predictor
        hyperparams: priors; `a` is resolved from y when unset
        iters: retained iterations
        burnin: discarded iterations
        rng: random stream
        initial: starting partition (default: every predictor unimportant)
        use_likelihood: False runs the chain on the prior alone

    Returns:
        (trace of retained iterations, modal partition)
    """
    y = np.asarray(y)
    D = np.asarray(D, dtype=np.int64)
    levels = tuple(int(c) for c in levels)
    if len(predictors) != len(levels) or D.shape[1] != len(levels):
        raise ValueError("predictors, levels and context columns must agree")
    hp = hyperparams.resolve(y)
    current = initial or Partition.trivial(levels)

    def score(partition: Partition) -> float:
        if not use_likelihood:
            return 0.0
        return log_marginal(y, D, partition, hp.a, hp.b, hp.cell_cap)

    current_lm = score(current)
    trace = KTrace(np.zeros((iters, len(levels)), dtype=np.int64), list(predictors), levels)
    kept: List[Partition] = []

    for it in range(burnin + iters):
        for j, predictor in enumerate(predictors):
            c_j = levels[j]
            if c_j == 1:
                continue
            k = current.k[j]
            move = "split" if rng.uniform() < _up_prob(k, c_j) else "merge"
            if move == "split":
                proposed, log_q = propose_split(current, j, rng)
            else:
                proposed, log_q = propose_merge(current, j, rng)
            try:
                proposed_lm = score(proposed)
            except CellCapExceeded as e:
                logger.debug(f"Rejecting proposal for predictor {j}: {e}")
                trace.proposed[move] += 1
                continue
            log_prior = (log_prior_k(proposed.k[j], c_j, predictor.lag, hp.phi)
                         - log_prior_k(k, c_j, predictor.lag, hp.phi))
            log_alpha = proposed_lm - current_lm + log_prior + log_q
            trace.proposed[move] += 1
            if np.log(rng.uniform()) < log_alpha:
                current, current_lm = proposed, proposed_lm
                trace.accepted[move] += 1
        if it >= burnin:
            trace.k_samples[it - burnin] = current.k
            kept.append(current)

    logger.info(f"Lag selection done: inclusion={np.round(trace.inclusion_proportions(), 3).tolist()}, "
                f"acceptance={trace.acceptance_rates()}")
    if not kept:
        return trace, current
    return trace, modal_partition(trace.k_samples, kept)
