"""
Experiment runner - fits both models on every replicate of a scenario (or on
an observed data set) and collects log predictive scores.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd

from .btf_gibbs import PosteriorDraw, TrainingDesign, prepare_training, run_chain
from .core import ConfigError, CountSeries, DataSplit, Hyperparams, make_split
from .datagen import simulate
from .distributions import Rng
from .evaluation import comparison_report, score_btf, score_par
from .experiment_config import ExperimentConfig
from .lag_selection import KTrace, Partition, important_lags, sample_K
from .par_baseline import ParChain, ParDesign, ParPrior, fit_mle, mh_chain, select_order
from .poisson_mixture import LabelRule, fit_series_mixtures

logger = logging.getLogger(__name__)

# stream ids for the independent stages of one replicate
DATA_STREAM, MIXTURE_STREAM, LAG_STREAM, BTF_STREAM, PAR_STREAM = range(5)


@dataclass
class BtfFit:
    """Everything fitted for one target series."""
    design: TrainingDesign
    trace: KTrace
    partition: Partition
    draws: List[PosteriorDraw]


def fit_btf(series: CountSeries, split: DataSplit, rules: Sequence[LabelRule], target: int,
            hyperparams: Hyperparams, lag_burnin: int, lag_iters: int, burnin: int, iters: int,
            thin: int, rng: Rng, multivariate: bool = False, threshold: float = 0.5) -> BtfFit:
    """Lag selection followed by the Gibbs chain at the modal K."""
    design = prepare_training(series, split, rules, target, split.max_lag, multivariate)
    hp = hyperparams.resolve(design.y)
    trace, partition = sample_K(design.y, design.D, design.predictors, design.levels, hp,
                                lag_iters, lag_burnin, rng.split(0))
    chosen = [f"{series.names[p.series]}[t-{p.lag}]" for p in important_lags(trace, threshold)]
    logger.info(f"  {series.names[target]}: important lags {chosen or 'none'}, K={list(partition.k)}")
    draws = run_chain(partition, design.D, design.y, hp, burnin, iters, thin, rng.split(1), design.levels)
    return BtfFit(design, trace, partition, draws)


def fit_par(series: CountSeries, split: DataSplit, target: int, q_max: int, criterion: str,
            prior: ParPrior, burnin: int, iters: int, rng: Rng, multivariate: bool = False,
            cache: Optional[Dict] = None) -> ParChain:
    """Order selection then MH for one target; chains are reused when criteria agree."""
    n_series = series.n_series if multivariate else 1
    values = series.values if multivariate else series.values[target:target + 1]
    local_target = target if multivariate else 0
    q = select_order(values, q_max, criterion, end=split.training_end, target=local_target, n_series=n_series)
    key = (target, q)
    if cache is not None and key in cache:
        return cache[key]
    design = ParDesign.multivariate(q, target, n_series) if multivariate else ParDesign(q, target)
    mle = fit_mle(series.values, q, design, end=split.training_end).check()
    chain = mh_chain(series.values, design, prior, burnin, iters, rng.split(q), end=split.training_end, mle=mle)
    chain.extra["criterion"] = criterion
    if cache is not None:
        cache[key] = chain
    return chain


def load_series(config: ExperimentConfig, replicate: int) -> CountSeries:
    if config.data is not None:
        return CountSeries.from_csv(config.data)
    return simulate(config.scenario, config.seed, config.series_length, stream=(replicate, DATA_STREAM))


def resolve_targets(config: ExperimentConfig, series: CountSeries) -> List[int]:
    """0-based target series; every series of a multivariate run unless `targets` narrows it."""
    multivariate = config.multivariate or series.n_series > 1
    if config.targets is None:
        return list(range(series.n_series)) if multivariate else [0]
    bad = [t for t in config.targets if not 1 <= t <= series.n_series]
    if bad:
        raise ConfigError(f"targets {bad} outside 1..{series.n_series}")
    return [t - 1 for t in config.targets]


def run_replicate(config: ExperimentConfig, replicate: int) -> List[Dict]:
    """Score rows (scenario, split, target, replicate, model, score) for one data set."""
    series = load_series(config, replicate)
    rng = Rng(config.seed, (replicate,))
    label = config.scenario or config.name
    targets = resolve_targets(config, series)
    multivariate = config.multivariate or series.n_series > 1
    sizes = config.split.sizes()
    rows = []
    logger.info(f"🎯 {config.name}: replicate {replicate + 1}/{config.replicates}")

    def row(split_label: str, target: int, model: str, score: float) -> Dict:
        return {"scenario": label, "split": split_label, "target": series.names[target],
                "replicate": replicate + 1, "model": model, "score": score}

    for s, train_len in enumerate(config.split.train_lens):
        split_label = f"{train_len}:{series.length - train_len}"

        for p, pre in enumerate(sizes):
            split = make_split(series.length, pre, train_len - pre, config.split.max_lag)
            mix_rng = rng.split(MIXTURE_STREAM).split(s).split(p)
            _, fits = fit_series_mixtures(series, split, config.mixture.c, config.mixture.burnin,
                                          config.mixture.iters, mix_rng, config.mixture.min_weight,
                                          config.mixture.rate_merge_tol)
            rules = [LabelRule(fit) for fit in fits]
            model = "BTF" if len(sizes) == 1 else f"BTF-{pre}"
            for target in targets:
                btf_rng = rng.split(BTF_STREAM).split(s).split(p).split(target)
                fit = fit_btf(series, split, rules, target, config.hyperparams,
                              config.lag_selection.burnin, config.lag_selection.iters,
                              config.btf.burnin, config.btf.iters, config.btf.thin, btf_rng, multivariate,
                              config.lag_selection.threshold)
                score = score_btf(fit.draws, rules, series, split, fit.design.predictors, target)
                rows.append(row(split_label, target, model, score))

        # PAR is fit on the whole pre-training + training block
        split = make_split(series.length, sizes[0], train_len - sizes[0], config.split.max_lag)
        prior = ParPrior(config.par.intercept_precision, config.par.coefficient_precision)
        cache: Dict[Tuple[int, int], ParChain] = {}
        for criterion in config.par.criteria:
            for target in targets:
                par_rng = rng.split(PAR_STREAM).split(s).split(target)
                chain = fit_par(series, split, target, config.par.q_max, criterion, prior,
                                config.par.burnin, config.par.iters, par_rng, multivariate, cache)
                rows.append(row(split_label, target, f"PAR-{criterion.upper()}", score_par(chain, series, split)))
    return rows


def _run_replicate_args(args):
    return run_replicate(*args)


def run_experiment(config: ExperimentConfig, jobs: int = 1) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    Run every replicate and build the comparison report.

    Returns:
        (long score table, report with mean/sd per model and the winner for
        each scenario, split and target)
    """
    tasks = [(config, r) for r in range(config.replicates)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_replicate_args, tasks))
    else:
        results = [run_replicate(*task) for task in tasks]
    scores = pd.DataFrame([row for rows in results for row in rows])
    return scores, comparison_report(scores, group_by=("scenario", "split", "target"))
