"""
Command-line front end.

Every stage reads CSV data plus the previous stage's manifest and writes its
own manifest, so any stage can be re-run in isolation:

    simulate -> fit-mixture -> select-lags -> fit-btf -> score
                fit-par ---------------------------------> score
    experiment runs a whole configured study end to end.
"""

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .btf_gibbs import load_draws, prepare_training, run_chain, save_draws
from .config_guard import ConfigGuard
from .core import (
    ConfigError,
    CountSeries,
    DataSplit,
    Hyperparams,
    NumericalError,
    Predictor,
    SchemaError,
    make_split,
)
from .datagen import simulate
from .distributions import Rng
from .evaluation import (
    format_report,
    predictive_trace_btf,
    predictive_trace_par,
    score_btf,
    score_par,
)
from .experiment import DATA_STREAM, fit_par, run_experiment
from .lag_selection import Partition, important_lags, sample_K
from .output_helper import ensure_output_dir, get_output_path
from .par_baseline import ParPrior, load_chains, save_chains
from .poisson_mixture import LabelRule, MixtureFit, fit_series_mixtures, load_mixtures, save_mixtures

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_SCHEMA = 2
EXIT_NUMERIC = 3
EXIT_CONFIG = 4


def file_digest(path) -> str:
    """sha256 of a file's bytes."""
    sha = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            sha.update(block)
    return sha.hexdigest()


def load_data(path) -> CountSeries:
    if not Path(path).exists():
        raise SchemaError(f"Data file not found: {path}")
    return CountSeries.from_csv(path)


def read_manifest(path) -> Dict:
    try:
        with open(path) as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise SchemaError(f"Could not read manifest {path}: {e}")


def check_digest(manifest: Dict, data_path, what: str) -> str:
    """Refuse manifests built from a different data file."""
    digest = file_digest(data_path)
    if manifest.get("input_sha256") != digest:
        raise SchemaError(f"{what} was built from different data than {data_path}")
    return digest


def build_split(length: int, pre_training_len: int, training_len: int, max_lag: int) -> DataSplit:
    try:
        return make_split(length, pre_training_len, training_len, max_lag)
    except ValueError as e:
        raise ConfigError(f"Inconsistent split: {e}")


def split_from(manifest: Dict) -> DataSplit:
    try:
        return DataSplit.from_dict(manifest["split"])
    except (KeyError, ValueError) as e:
        raise SchemaError(f"Manifest split is invalid: {e}")


def write_json(path, body: Dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(body, f, indent=2, sort_keys=True)


def hyperparams_from(args) -> Hyperparams:
    values = {k: getattr(args, k) for k in ("gamma_j", "phi", "a", "b", "alpha0", "L", "cell_cap")
              if getattr(args, k, None) is not None}
    try:
        return Hyperparams(**values)
    except ValueError as e:
        raise ConfigError(str(e))


def cmd_simulate(args) -> int:
    print(f"🎲 Simulating {args.scenario} (seed={args.seed})...")
    series = simulate(args.scenario, args.seed, args.length, stream=(args.replicate, DATA_STREAM))
    out = Path(args.out or get_output_path("data.csv"))
    series.to_csv(out)
    print(f"✅ Wrote {series.n_series} series x {series.length} points to {out}")
    return EXIT_OK


def cmd_fit_mixture(args) -> int:
    series = load_data(args.data)
    split = build_split(series.length, args.pre_training_len, args.training_len, args.max_lag)
    print(f"🧮 Fitting {args.c}-component Poisson mixtures on {split.pre_training_len} pre-training points...")
    raw_fits, fits = fit_series_mixtures(series, split, args.c, args.burnin, args.iters, Rng(args.seed),
                                         args.min_weight, args.rate_merge_tol)
    out = Path(args.out or get_output_path("mixtures.json"))
    save_mixtures(out, fits, series.names, {
        "input_sha256": file_digest(args.data),
        "split": split.to_dict(),
        "seed": args.seed,
        "c": args.c,
        "burnin": args.burnin,
        "iters": args.iters,
        "min_weight": args.min_weight,
        "rate_merge_tol": args.rate_merge_tol,
        "raw_mixtures": [fit.to_dict() for fit in raw_fits],
    }, raw_fits)
    for name, fit in zip(series.names, fits):
        print(f"  {name}: c={fit.c}, rates={np.round(fit.rates, 2).tolist()}")
    print(f"✅ Mixture manifest: {out}")
    return EXIT_OK


def _predictors_to_json(predictors: List[Predictor], names) -> List[Dict]:
    return [{"series": names[p.series], "lag": p.lag} for p in predictors]


def _predictors_from_json(entries: List[Dict], series: CountSeries) -> List[Predictor]:
    try:
        return [Predictor(series.index_of(e["series"]), int(e["lag"])) for e in entries]
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"Predictor entry is malformed: {e}")


def cmd_select_lags(args) -> int:
    series = load_data(args.data)
    manifest = load_mixtures(args.mixtures)
    digest = check_digest(manifest, args.data, "Mixture manifest")
    split = split_from(manifest)
    if args.max_lag:
        split = build_split(series.length, split.pre_training_len, split.training_len, args.max_lag)
    rules = [LabelRule(fit) for fit in manifest["fits"]]
    target = series.index_of(args.target) if args.target else 0
    multivariate = args.multivariate or series.n_series > 1

    try:
        design = prepare_training(series, split, rules, target, split.max_lag, multivariate)
    except ValueError as e:
        raise SchemaError(f"Mixture manifest does not match {args.data}: {e}")
    hp = hyperparams_from(args).resolve(design.y)
    print(f"🔎 Selecting lags for {series.names[target]}: {len(design.predictors)} predictors, "
          f"{design.n} training points...")
    trace, partition = sample_K(design.y, design.D, design.predictors, design.levels, hp,
                                args.iters, args.burnin, Rng(args.seed))
    important = important_lags(trace, args.threshold)

    out = Path(args.out or get_output_path("lags.json"))
    out.parent.mkdir(parents=True, exist_ok=True)
    trace.to_frame().to_csv(out.with_name(f"{out.stem}_trace.csv"), index=False)
    trace.inclusion_frame(series.names).to_csv(out.with_name(f"{out.stem}_inclusion.csv"), index=False)
    write_json(out, {
        "input_sha256": digest,
        "split": split.to_dict(),
        "target": series.names[target],
        "multivariate": multivariate,
        "predictors": _predictors_to_json(design.predictors, series.names),
        "levels": list(design.levels),
        "partition": partition.to_dict(),
        "hyperparams": hp.to_dict(),
        "mixtures": [fit.to_dict() for fit in manifest["fits"]],
        "seed": args.seed,
        "burnin": args.burnin,
        "iters": args.iters,
        "threshold": args.threshold,
        "inclusion": trace.inclusion_proportions().tolist(),
        "important": _predictors_to_json(important, series.names),
        "acceptance": trace.acceptance_rates(),
        "n_important_distribution": {str(k): v for k, v in trace.n_important_distribution().items()},
        "cell_count_distribution": {str(k): v for k, v in trace.cell_count_distribution().items()},
    })
    for p, share in zip(design.predictors, trace.inclusion_proportions()):
        marker = "✓" if p in important else " "
        print(f"  {marker} {series.names[p.series]}[t-{p.lag}]: {share:.3f}")
    print(f"✅ Lag manifest: {out} (K={list(partition.k)})")
    return EXIT_OK


def cmd_fit_btf(args) -> int:
    series = load_data(args.data)
    lags = read_manifest(args.lags)
    digest = check_digest(lags, args.data, "Lag manifest")
    split = split_from(lags)
    try:
        fits = [MixtureFit.from_dict(entry) for entry in lags["mixtures"]]
        partition = Partition.from_dict(lags["partition"])
        hp = Hyperparams.from_dict(lags["hyperparams"])
        target = series.index_of(lags["target"])
        multivariate = bool(lags["multivariate"])
    except KeyError as e:
        raise SchemaError(f"Lag manifest is missing field {e}")
    except (TypeError, ValueError) as e:
        raise SchemaError(f"Lag manifest is invalid: {e}")
    overrides = {k: getattr(args, k) for k in ("alpha0", "L") if getattr(args, k) is not None}
    if overrides:
        try:
            hp = Hyperparams.from_dict({**hp.to_dict(), **overrides})
        except ValueError as e:
            raise ConfigError(str(e))
    rules = [LabelRule(fit) for fit in fits]
    try:
        design = prepare_training(series, split, rules, target, split.max_lag, multivariate)
    except ValueError as e:
        raise SchemaError(f"Lag manifest does not match {args.data}: {e}")
    if tuple(partition.levels) != tuple(design.levels):
        raise SchemaError(f"Lag manifest partition has levels {list(partition.levels)}, "
                          f"data gives {list(design.levels)}")

    print(f"⛓️  Running BTF chain for {series.names[target]}: K={list(partition.k)}, "
          f"{args.burnin} burn-in + {args.iters} sweeps...")
    draws = run_chain(partition, design.D, design.y, hp, args.burnin, args.iters, args.thin,
                      Rng(args.seed), design.levels)
    out = Path(args.out or get_output_path("btf_draws"))
    save_draws(out, draws, {
        "input_sha256": digest,
        "split": split.to_dict(),
        "target": lags["target"],
        "multivariate": multivariate,
        "predictors": lags["predictors"],
        "levels": list(design.levels),
        "partition": partition.to_dict(),
        "hyperparams": hp.to_dict(),
        "mixtures": lags["mixtures"],
        "seed": args.seed,
        "burnin": args.burnin,
        "iters": args.iters,
        "thin": args.thin,
    })
    print(f"✅ {len(draws)} draws written to {out}")
    return EXIT_OK


def cmd_fit_par(args) -> int:
    series = load_data(args.data)
    split = build_split(series.length, args.pre_training_len, args.training_len, 1)
    multivariate = args.multivariate or series.n_series > 1
    targets = range(series.n_series) if multivariate else [series.index_of(args.target) if args.target else 0]
    prior = ParPrior(args.intercept_precision, args.coefficient_precision)
    rng = Rng(args.seed)

    print(f"📈 Fitting PAR models ({args.criterion}, q_max={args.q_max}) on {split.training_end} points...")
    chains = []
    for target in targets:
        chain = fit_par(series, split, target, args.q_max, args.criterion, prior, args.burnin, args.iters,
                        rng.split(target), multivariate)
        chains.append(chain)
        print(f"  {series.names[target]}: q={chain.design.q}, acceptance={chain.acceptance:.3f}")
    out = Path(args.out or get_output_path("par_draws"))
    save_chains(out, chains, {
        "input_sha256": file_digest(args.data),
        "split": split.to_dict(),
        "criterion": args.criterion.upper(),
        "q_max": args.q_max,
        "multivariate": multivariate,
        "prior": {"intercept_precision": prior.intercept_precision,
                  "coefficient_precision": prior.coefficient_precision},
        "seed": args.seed,
        "burnin": args.burnin,
        "iters": args.iters,
    })
    print(f"✅ PAR draws written to {out}")
    return EXIT_OK


def cmd_score(args) -> int:
    series = load_data(args.data)
    manifest = read_manifest(Path(args.draws) / "manifest.json")
    check_digest(manifest, args.data, "Draw manifest")
    split = split_from(manifest)
    if split.test_len < 1:
        raise ConfigError("Split has no test points to score")
    out = Path(args.out or get_output_path("score.json"))
    out.parent.mkdir(parents=True, exist_ok=True)

    if manifest.get("model") == "btf":
        draws, manifest = load_draws(args.draws)
        try:
            rules = [LabelRule(MixtureFit.from_dict(entry)) for entry in manifest["mixtures"]]
            predictors = _predictors_from_json(manifest["predictors"], series)
            target = series.index_of(manifest["target"])
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaError(f"Draw manifest is invalid: {e}")
        score = score_btf(draws, rules, series, split, predictors, target)
        trace = predictive_trace_btf(draws, rules, series, split, predictors, target, args.level)
        trace.to_csv(out.with_name(f"{out.stem}_trace.csv"), index=False)
        per_series = {series.names[target]: score}
    elif manifest.get("model") == "par":
        chains, manifest = load_chains(args.draws)
        per_series = {}
        for chain in chains:
            name = series.names[chain.design.target]
            per_series[name] = score_par(chain, series, split)
            predictive_trace_par(chain, series, split, args.level).to_csv(
                out.with_name(f"{out.stem}_trace_{name}.csv"), index=False)
        # one score per series; no pooled figure across targets
        score = next(iter(per_series.values())) if len(per_series) == 1 else None
    else:
        raise SchemaError(f"Unknown model type in {args.draws}")

    write_json(out, {"model": manifest["model"], "score": score, "per_series": per_series,
                     "test_len": split.test_len, "level": args.level})
    for name, value in per_series.items():
        print(f"✅ Log predictive score ({manifest['model'].upper()}, {name}): {value:.4f}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    guard = ConfigGuard(args.guardrails)
    config = guard.load(args.config)
    if args.replicates:
        config.replicates = args.replicates
        guard.check(config)
    out_dir = Path(args.out_dir) if args.out_dir else ensure_output_dir(f"experiments/{config.name}")
    out_dir.mkdir(parents=True, exist_ok=True)

    print(f"🎯 Experiment {config.name}: {config.replicates} replicate(s), jobs={args.jobs}")
    scores, report = run_experiment(config, args.jobs)
    config.save(out_dir / "config.json")
    scores.to_csv(out_dir / "scores.csv", index=False)
    report.to_csv(out_dir / "report.csv", index=False)
    text = format_report(report)
    with open(out_dir / "report.txt", "w") as f:
        f.write(text + "\n")
    print(text)
    print(f"✅ Results in {out_dir}")
    return EXIT_OK


def _add_mcmc(parser, burnin: int, iters: int):
    parser.add_argument('--burnin', type=int, default=burnin, help=f'Burn-in sweeps (default: {burnin})')
    parser.add_argument('--iters', type=int, default=iters, help=f'Retained sweeps (default: {iters})')
    parser.add_argument('--seed', type=int, default=1, help='Random seed (default: 1)')


def _add_split(parser):
    parser.add_argument('--pre-training-len', type=int, required=True, help='Pre-training points T1')
    parser.add_argument('--training-len', type=int, required=True, help='Training points T2')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="countbtf", description="Tensor-factorisation models for count time series")
    parser.add_argument('--verbose', action='store_true', help='Log per-sweep detail')
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Generate a scenario realisation")
    p.add_argument('--scenario', required=True, help='Preset name (e.g. table2-B) or scenario JSON file')
    p.add_argument('--seed', type=int, default=1)
    p.add_argument('--replicate', type=int, default=0, help='Replicate stream (default: 0)')
    p.add_argument('--length', type=int, default=None, help='Series length (default: preset length)')
    p.add_argument('--out', default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit-mixture", help="Fit pre-training Poisson mixtures")
    p.add_argument('--data', required=True)
    _add_split(p)
    p.add_argument('--max-lag', type=int, default=3, help='Maximum lag q (default: 3)')
    p.add_argument('--c', type=int, default=10, help='Mixture components before reduction (default: 10)')
    p.add_argument('--min-weight', type=float, default=0.01)
    p.add_argument('--rate-merge-tol', type=float, default=0.10)
    _add_mcmc(p, 2000, 5000)
    p.add_argument('--out', default=None)
    p.set_defaults(func=cmd_fit_mixture)

    p = sub.add_parser("select-lags", help="Sample important lags")
    p.add_argument('--data', required=True)
    p.add_argument('--mixtures', required=True, help='Mixture manifest from fit-mixture')
    p.add_argument('--target', default=None, help='Target series name (default: first)')
    p.add_argument('--multivariate', action='store_true', help='Use lags of every series')
    p.add_argument('--max-lag', type=int, default=None, help='Override the manifest max lag')
    p.add_argument('--threshold', type=float, default=0.5)
    p.add_argument('--phi', type=float, default=None)
    p.add_argument('--gamma-j', dest="gamma_j", type=float, default=None)
    p.add_argument('--a', type=float, default=None)
    p.add_argument('--b', type=float, default=None)
    p.add_argument('--cell-cap', dest="cell_cap", type=int, default=None)
    _add_mcmc(p, 1000, 2000)
    p.add_argument('--out', default=None)
    p.set_defaults(func=cmd_select_lags)

    p = sub.add_parser("fit-btf", help="Run the tensor-factorisation Gibbs sampler")
    p.add_argument('--data', required=True)
    p.add_argument('--lags', required=True, help='Lag manifest from select-lags')
    p.add_argument('--thin', type=int, default=1)
    p.add_argument('--alpha0', type=float, default=None)
    p.add_argument('--L', type=int, default=None, help='Stick-breaking truncation')
    _add_mcmc(p, 2000, 5000)
    p.add_argument('--out', default=None)
    p.set_defaults(func=cmd_fit_btf)

    p = sub.add_parser("fit-par", help="Fit the Poisson autoregressive baseline")
    p.add_argument('--data', required=True)
    _add_split(p)
    p.add_argument('--q-max', type=int, default=5)
    p.add_argument('--criterion', choices=["AIC", "BIC", "aic", "bic"], default="BIC")
    p.add_argument('--target', default=None)
    p.add_argument('--multivariate', action='store_true')
    p.add_argument('--intercept-precision', type=float, default=1e-6)
    p.add_argument('--coefficient-precision', type=float, default=1e-4)
    _add_mcmc(p, 5000, 10000)
    p.add_argument('--out', default=None)
    p.set_defaults(func=cmd_fit_par)

    p = sub.add_parser("score", help="Log predictive score on the test block")
    p.add_argument('--data', required=True)
    p.add_argument('--draws', required=True, help='Draw directory from fit-btf or fit-par')
    p.add_argument('--level', type=float, default=0.95, help='Credible level for the trace (default: 0.95)')
    p.add_argument('--out', default=None)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("experiment", help="Run a configured study end to end")
    p.add_argument('--config', required=True)
    p.add_argument('--jobs', type=int, default=1, help='Parallel replicates (default: 1)')
    p.add_argument('--replicates', type=int, default=None, help='Override the configured replicate count')
    p.add_argument('--guardrails', default=None)
    p.add_argument('--out-dir', default=None)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main execution."""
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format='%(message)s')

    try:
        return args.func(args)
    except SchemaError as e:
        print(f"❌ Error: {e}", file=sys.stderr)
        return EXIT_SCHEMA
    except NumericalError as e:
        print(f"❌ Error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as e:
        print(f"❌ Error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
