"""
Tensor-factorisation Gibbs sampler for count transitions.

Given the fixed cluster counts K (and the label contexts D of the training
block) this module samples the soft allocations z, the per-cell atom labels,
the stick-breaking weights, the atom rates and the per-predictor mixture
probabilities, and turns retained draws into one-step-ahead predictive
distributions.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .core import (
    CellIndex,
    CountSeries,
    DataSplit,
    Hyperparams,
    NumericalError,
    Predictor,
    SchemaError,
    lag_contexts,
    predictor_layout,
)
from .distributions import (
    Rng,
    highest_density_set,
    poisson_log_pmf,
    poisson_support_bound,
    sample_beta,
    sample_categorical_rows,
    sample_dirichlet,
    sample_from_probabilities,
    sample_gamma,
)
from .lag_selection import Partition
from .poisson_mixture import LabelRule, label_matrix

logger = logging.getLogger(__name__)

RECOMPUTE_EVERY = 100
SIMPLEX_TOL = 1e-10


@dataclass
class TrainingDesign:
    """
    Labelled training block for one target series.

    Attributes:
        y: target counts at the likelihood time points
        D: n x P matrix of 0-based lag labels
        levels: label levels c_j per predictor
        predictors: predictor layout (series, lag) per column of D
        times: 0-based time index of every row
        target: 0-based index of the target series
    """
    y: np.ndarray
    D: np.ndarray
    levels: Tuple[int, ...]
    predictors: List[Predictor]
    times: np.ndarray
    target: int = 0

    @property
    def n(self) -> int:
        return self.y.size


def prepare_training(series: CountSeries, split: DataSplit, rules: Sequence[LabelRule],
                     target: int = 0, q: Optional[int] = None,
                     multivariate: Optional[bool] = None) -> TrainingDesign:
    """
    Build the training design for `target`.

    Univariate fits use the target's own lags 1..q; multivariate fits use all
    M*q lag labels (series 1 lags 1..q, then series 2, ...).
    """
    q = q or split.max_lag
    if multivariate is None:
        multivariate = series.n_series > 1
    predictors = predictor_layout(series.n_series, q) if multivariate else [Predictor(target, j) for j in range(1, q + 1)]
    labels = label_matrix(series, rules)
    times = split.likelihood_indices()
    levels = tuple(rules[p.series].fit.c for p in predictors)
    return TrainingDesign(
        y=series.series(target)[times].astype(np.int64),
        D=lag_contexts(labels, times, predictors),
        levels=levels,
        predictors=predictors,
        times=times,
        target=target,
    )


def forecast_contexts(series: CountSeries, split: DataSplit, rules: Sequence[LabelRule],
                      predictors: Sequence[Predictor]) -> np.ndarray:
    """Lag labels for every test point, conditioning on the observed history."""
    return lag_contexts(label_matrix(series, rules), split.test_indices(), predictors)


def stick_weights(V: np.ndarray) -> np.ndarray:
    """pi*_l = V_l * prod_{s<l} (1 - V_s)."""
    remaining = np.concatenate(([1.0], np.cumprod(1.0 - V[:-1])))
    return V * remaining


@dataclass
class SamplerState:
    """
    Full Gibbs state. Allocations and cell labels are 0-based.

    `cells` caches the linear cell address of every training point and
    `n_H` / `S_H` the per-cell counts and sums, kept in step with `z`.
    """
    z: np.ndarray
    zstar: np.ndarray
    V: np.ndarray
    pistar: np.ndarray
    lambdastar: np.ndarray
    pi: List[np.ndarray]
    index: CellIndex
    cells: np.ndarray
    n_H: np.ndarray
    S_H: np.ndarray

    @property
    def k(self) -> Tuple[int, ...]:
        return self.index.radices

    @property
    def L(self) -> int:
        return self.lambdastar.size

    def cell_rates(self) -> np.ndarray:
        """lambda_H = lambda*_{Z*_H} for every cell."""
        return self.lambdastar[self.zstar]

    def snapshot(self) -> "PosteriorDraw":
        return PosteriorDraw(
            pistar=self.pistar.copy(),
            lambdastar=self.lambdastar.copy(),
            zstar=self.zstar.copy(),
            pi=[p.copy() for p in self.pi],
            n_occupied=occupied_atoms(self),
        )


@dataclass
class PosteriorDraw:
    """Snapshot of the parameters needed for prediction."""
    pistar: np.ndarray
    lambdastar: np.ndarray
    zstar: np.ndarray
    pi: List[np.ndarray]
    n_occupied: int = 0

    @property
    def k(self) -> Tuple[int, ...]:
        return tuple(p.shape[1] for p in self.pi)

    def cell_rates(self) -> np.ndarray:
        return self.lambdastar[self.zstar]


def recompute_statistics(state: SamplerState, y: np.ndarray) -> None:
    """Rebuild cell addresses and per-cell statistics from z."""
    state.cells = state.index.encode_rows(state.z)
    state.n_H = np.bincount(state.cells, minlength=state.index.size)
    state.S_H = np.bincount(state.cells, weights=y, minlength=state.index.size)


def validate_state(state, tol: float = SIMPLEX_TOL) -> None:
    """
    Check the stick, simplex and positivity invariants of a state or draw.

    Raises:
        NumericalError: an invariant is violated
    """
    if abs(state.pistar.sum() - 1.0) > tol or np.any(state.pistar < 0):
        raise NumericalError(f"Stick weights sum to {state.pistar.sum()}")
    if isinstance(state, SamplerState) and not np.allclose(stick_weights(state.V), state.pistar, atol=tol):
        raise NumericalError("Stick weights disagree with stick fractions")
    if not np.all(np.isfinite(state.lambdastar)) or np.any(state.lambdastar <= 0):
        raise NumericalError("Atom rates must be finite and positive")
    for j, p in enumerate(state.pi):
        if np.any(np.abs(p.sum(axis=1) - 1.0) > tol) or np.any(p < 0):
            raise NumericalError(f"Mixture probabilities of predictor {j} are off the simplex")
    if state.zstar.min(initial=0) < 0 or state.zstar.max(initial=0) >= state.lambdastar.size:
        raise NumericalError("Cell labels out of atom range")


def init_state(partition: Partition, D: np.ndarray, y: np.ndarray, hyperparams: Hyperparams,
               rng: Rng) -> SamplerState:
    """
    Initial state: z from the partition's hard assignment, atom rates from
    Gamma(a, b), sticks from Beta(1, alpha0), cell labels from pi* and
    mixture probabilities from their Dirichlet prior.

    Raises:
        CellCapExceeded: prod(K) is larger than hyperparams.cell_cap
    """
    hp = hyperparams.resolve(y)
    D = np.asarray(D, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    index = CellIndex(partition.k, hp.cell_cap)
    L = int(hp.L)

    lambdastar = sample_gamma(hp.a, hp.b, rng, size=L)
    V = sample_beta(1.0, hp.alpha0, rng, size=L)
    V[-1] = 1.0
    pistar = stick_weights(V)
    zstar = sample_from_probabilities(pistar, index.size, rng)
    pi = [sample_dirichlet(np.full((c_j, k_j), hp.gamma_j), rng)
          for c_j, k_j in zip(partition.levels, partition.k)]

    state = SamplerState(
        z=partition.allocate(D),
        zstar=zstar.astype(np.int64),
        V=V,
        pistar=pistar,
        lambdastar=np.maximum(lambdastar, np.finfo(float).tiny),
        pi=pi,
        index=index,
        cells=np.zeros(y.size, dtype=np.int64),
        n_H=np.zeros(index.size, dtype=np.int64),
        S_H=np.zeros(index.size),
    )
    recompute_statistics(state, y)
    return state


def step_z(state: SamplerState, D: np.ndarray, y: np.ndarray, rng: Rng) -> None:
    """
    Resample z_{j,t} for every predictor with k_j > 1.

    Given everything else the allocations of one predictor are independent
    across t, so each predictor is drawn in one vectorised pass.
    """
    log_lambda = np.log(state.lambdastar)
    for j, k_j in enumerate(state.k):
        if k_j == 1:
            continue
        stride = int(state.index.strides[j])
        old = state.z[:, j]
        base = state.cells - old * stride
        candidates = base[:, None] + np.arange(k_j)[None, :] * stride
        atoms = state.zstar[candidates]
        with np.errstate(divide="ignore"):
            log_w = (np.log(state.pi[j][D[:, j]])
                     + y[:, None] * log_lambda[atoms]
                     - state.lambdastar[atoms])
        new = sample_categorical_rows(log_w, rng)

        moved = np.flatnonzero(new != old)
        if moved.size:
            new_cells = base[moved] + new[moved] * stride
            np.subtract.at(state.n_H, state.cells[moved], 1)
            np.subtract.at(state.S_H, state.cells[moved], y[moved])
            np.add.at(state.n_H, new_cells, 1)
            np.add.at(state.S_H, new_cells, y[moved])
            state.cells[moved] = new_cells
            state.z[moved, j] = new[moved]


def step_zstar(state: SamplerState, rng: Rng) -> None:
    """
    Resample the atom label of every cell. Occupied cells are weighted by
    pi*_l lambda*_l^{S_H} exp(-n_H lambda*_l); empty cells draw from pi*.
    """
    occupied = np.flatnonzero(state.n_H > 0)
    empty = np.flatnonzero(state.n_H == 0)
    if occupied.size:
        with np.errstate(divide="ignore"):
            log_w = (np.log(state.pistar)[None, :]
                     + state.S_H[occupied, None] * np.log(state.lambdastar)[None, :]
                     - state.n_H[occupied, None] * state.lambdastar[None, :])
        state.zstar[occupied] = sample_categorical_rows(log_w, rng)
    if empty.size:
        state.zstar[empty] = sample_from_probabilities(state.pistar, empty.size, rng)


def step_sticks(state: SamplerState, alpha0: float, rng: Rng) -> None:
    """V_l ~ Beta(1 + N*_l, alpha0 + sum_{l'>l} N*_{l'}); V_L is pinned to 1."""
    counts = np.bincount(state.zstar, minlength=state.L)
    beyond = np.concatenate((np.cumsum(counts[::-1])[::-1][1:], [0]))
    V = sample_beta(1.0 + counts, alpha0 + beyond, rng)
    V[-1] = 1.0
    state.V = V
    state.pistar = stick_weights(V)


def step_rates(state: SamplerState, a: float, b: float, rng: Rng) -> None:
    """lambda*_l ~ Gamma(a + sum of S_H, b + sum of n_H) over cells labelled l."""
    S = np.bincount(state.zstar, weights=state.S_H, minlength=state.L)
    n = np.bincount(state.zstar, weights=state.n_H, minlength=state.L)
    rates = sample_gamma(a + S, b + n, rng)
    state.lambdastar = np.maximum(rates, np.finfo(float).tiny)


def step_pi(state: SamplerState, D: np.ndarray, levels: Sequence[int], gamma_j: float, rng: Rng) -> None:
    """pi^(j)(omega) ~ Dirichlet(gamma_j + n_{j,omega}(1..k_j)) for every level."""
    for j, (c_j, k_j) in enumerate(zip(levels, state.k)):
        if k_j == 1:
            state.pi[j] = np.ones((c_j, 1))
            continue
        counts = np.bincount(D[:, j] * k_j + state.z[:, j], minlength=c_j * k_j).reshape(c_j, k_j)
        state.pi[j] = sample_dirichlet(gamma_j + counts, rng)


def gibbs_step(state: SamplerState, D: np.ndarray, y: np.ndarray, levels: Sequence[int],
               hyperparams: Hyperparams, rng: Rng) -> None:
    """One full scan: z, cell labels, sticks, rates, mixture probabilities."""
    step_z(state, D, y, rng)
    step_zstar(state, rng)
    step_sticks(state, hyperparams.alpha0, rng)
    step_rates(state, hyperparams.a, hyperparams.b, rng)
    step_pi(state, D, levels, hyperparams.gamma_j, rng)


def run_chain(partition: Partition, D: np.ndarray, y: np.ndarray, hyperparams: Hyperparams,
              burnin: int = 2000, iters: int = 5000, thin: int = 1,
              rng: Optional[Rng] = None, levels: Optional[Sequence[int]] = None) -> List[PosteriorDraw]:
    """
    Run the sampler with K and the label contexts held fixed.

    Args:
        partition: fixed K (and the C used to seed z)
        D: n x P 0-based label contexts of the training block
        y: training counts
        hyperparams: priors; `a` is resolved from y when unset
        burnin: discarded sweeps
        iters: sweeps after burn-in
        thin: keep every thin-th post-burn-in sweep
        rng: random stream
        levels: label levels per predictor (defaults to the partition's)

    Returns:
        Retained posterior draws
    """
    if thin < 1:
        raise ValueError(f"thin must be >= 1, got {thin}")
    rng = rng or Rng(0)
    y = np.asarray(y, dtype=np.int64)
    D = np.asarray(D, dtype=np.int64)
    levels = tuple(levels or partition.levels)
    hp = hyperparams.resolve(y)
    state = init_state(partition, D, y, hp, rng)
    logger.info(f"BTF chain: K={list(state.k)}, {state.index.size} cells, L={state.L}, n={y.size}")

    draws: List[PosteriorDraw] = []
    for sweep in range(burnin + iters):
        gibbs_step(state, D, y, levels, hp, rng)
        if (sweep + 1) % RECOMPUTE_EVERY == 0:
            recompute_statistics(state, y)
        if sweep >= burnin and (sweep - burnin) % thin == 0:
            validate_state(state)
            draws.append(state.snapshot())
        if (sweep + 1) % 1000 == 0:
            logger.debug(f"  sweep {sweep + 1}: occupied atoms={occupied_atoms(state)}")

    logger.info(f"BTF chain done: {len(draws)} draws retained")
    return draws


def occupied_atoms(state) -> int:
    """Number of distinct atoms used by cells holding training data."""
    if isinstance(state, PosteriorDraw):
        return state.n_occupied
    return int(np.unique(state.zstar[state.n_H > 0]).size)


def atom_usage_distribution(draws: Sequence[PosteriorDraw]) -> pd.Series:
    """Relative frequency of the number of occupied atoms across draws."""
    return pd.Series([d.n_occupied for d in draws]).value_counts(normalize=True).sort_index()


def _cell_weights(pi: Sequence[np.ndarray], contexts: np.ndarray) -> np.ndarray:
    """n x |H| weights prod_j pi^(j)_{h_j}(d_j), predictor 1 varying fastest."""
    W = pi[0][contexts[:, 0]]
    for j in range(1, len(pi)):
        Wj = pi[j][contexts[:, j]]
        W = (Wj[:, :, None] * W[:, None, :]).reshape(W.shape[0], -1)
    return W


def atom_weights_batch(draw: PosteriorDraw, contexts: np.ndarray, chunk_cells: int = 2_000_000) -> np.ndarray:
    """
    Mixture weight of every atom at each context (n x L).

    Args:
        draw: posterior draw
        contexts: n x P 0-based labels
        chunk_cells: bound on rows x cells held in memory at once
    """
    contexts = np.atleast_2d(np.asarray(contexts, dtype=np.int64))
    n_cells = draw.zstar.size
    out = np.zeros((contexts.shape[0], draw.lambdastar.size))
    used = np.unique(draw.zstar)
    masks = [draw.zstar == l for l in used]
    step = max(1, chunk_cells // n_cells)
    for start in range(0, contexts.shape[0], step):
        W = _cell_weights(draw.pi, contexts[start:start + step])
        for l, mask in zip(used, masks):
            out[start:start + step, l] = W[:, mask].sum(axis=1)
    return out


def transition_pmf_batch(draw: PosteriorDraw, contexts: np.ndarray, ys) -> np.ndarray:
    """p(y_i | D_i) for paired contexts and counts."""
    ys = np.asarray(ys, dtype=float)
    weights = atom_weights_batch(draw, contexts)
    kernel = np.exp(poisson_log_pmf(ys[:, None], draw.lambdastar[None, :]))
    return (weights * kernel).sum(axis=1)


def transition_pmf(draw: PosteriorDraw, context: Sequence[int], y: int) -> float:
    """
    One-step transition probability p(y | D) = sum_H PD(y; lambda_H) prod_j pi^(j)_{h_j}(d_j).

    Args:
        draw: posterior draw
        context: 0-based lag labels, one per predictor
        y: count
    """
    return float(transition_pmf_batch(draw, np.asarray([context]), [y])[0])


def predictive_mean(draw: PosteriorDraw, context: Sequence[int]) -> float:
    weights = atom_weights_batch(draw, np.asarray([context]))[0]
    return float(weights @ draw.lambdastar)


def predictive_pmf(draws: Sequence[PosteriorDraw], context: Sequence[int],
                   support: Optional[int] = None) -> np.ndarray:
    """Draw-averaged predictive pmf on 0..support."""
    if support is None:
        support = poisson_support_bound([d.lambdastar[np.unique(d.zstar)].max() for d in draws])
    grid = np.arange(support + 1, dtype=float)
    pmf = np.zeros(grid.size)
    for draw in draws:
        weights = atom_weights_batch(draw, np.asarray([context]))[0]
        used = weights > 0
        pmf += np.exp(poisson_log_pmf(grid[:, None], draw.lambdastar[None, used])) @ weights[used]
    return pmf / len(draws)


def predictive_interval(draws: Sequence[PosteriorDraw], context: Sequence[int],
                        level: float = 0.95) -> Tuple[int, int]:
    """Highest-density region of the draw-averaged predictive pmf."""
    if not draws:
        raise ValueError("Need at least one posterior draw")
    return highest_density_set(predictive_pmf(draws, context), level)


def save_draws(path, draws: Sequence[PosteriorDraw], manifest: Dict) -> Path:
    """
    Write draws as a directory of .npy arrays plus manifest.json.

    The manifest carries no timestamps so reruns are byte-identical.
    """
    if not draws:
        raise ValueError("No draws to save")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    np.save(path / "pistar.npy", np.stack([d.pistar for d in draws]))
    np.save(path / "lambdastar.npy", np.stack([d.lambdastar for d in draws]))
    np.save(path / "zstar.npy", np.stack([d.zstar for d in draws]))
    np.save(path / "occupied.npy", np.asarray([d.n_occupied for d in draws], dtype=np.int64))
    for j in range(len(draws[0].pi)):
        np.save(path / f"pi_{j}.npy", np.stack([d.pi[j] for d in draws]))
    body = dict(manifest)
    body.update({"model": "btf", "n_draws": len(draws), "k": list(draws[0].k)})
    with open(path / "manifest.json", "w") as f:
        json.dump(body, f, indent=2, sort_keys=True)
    return path


def load_draws(path) -> Tuple[List[PosteriorDraw], Dict]:
    """
    Read a draw directory written by `save_draws`.

    Raises:
        SchemaError: missing files or inconsistent shapes
    """
    path = Path(path)
    try:
        with open(path / "manifest.json") as f:
            manifest = json.load(f)
        if manifest.get("model") != "btf":
            raise SchemaError(f"{path} does not hold BTF draws")
        pistar = np.load(path / "pistar.npy")
        lambdastar = np.load(path / "lambdastar.npy")
        zstar = np.load(path / "zstar.npy")
        occupied = np.load(path / "occupied.npy")
        pis = [np.load(path / f"pi_{j}.npy") for j in range(len(manifest["k"]))]
        n = int(manifest["n_draws"])
    except (OSError, KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"Could not read draws from {path}: {e}")
    if any(a.shape[0] != n for a in [pistar, lambdastar, zstar, occupied, *pis]):
        raise SchemaError(f"Draw arrays in {path} disagree with n_draws={n}")
    draws = [PosteriorDraw(pistar[i], lambdastar[i], zstar[i], [p[i] for p in pis], int(occupied[i]))
             for i in range(n)]
    return draws, manifest
