#!/usr/bin/env python3
"""End-to-end tests for the command-line stages and the experiment runner."""

import json
import sys
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from countbtf import experiment
from countbtf.cli import EXIT_CONFIG, EXIT_OK, EXIT_SCHEMA, main
from countbtf.core import ConfigError
from countbtf.experiment import run_experiment
from countbtf.experiment_config import ExperimentConfig


@pytest.fixture
def workdir():
    with tempfile.TemporaryDirectory() as tmp:
        yield Path(tmp)


def _simulate(workdir, name="data.csv", scenario="table2-A", seed=3, length=400):
    path = workdir / name
    assert main(["simulate", "--scenario", scenario, "--seed", str(seed), "--length", str(length),
                 "--out", str(path)]) == EXIT_OK
    return path


def _fit_mixture(workdir, data, out="mixtures.json"):
    path = workdir / out
    assert main(["fit-mixture", "--data", str(data), "--pre-training-len", "150", "--training-len", "200",
                 "--max-lag", "3", "--c", "4", "--burnin", "50", "--iters", "100", "--out", str(path)]) == EXIT_OK
    return path


class TestSimulateCommand:
    """Tests for the simulate stage."""

    def test_byte_identical_reruns(self, workdir):
        """Same scenario and seed should write identical files."""
        first = _simulate(workdir, "a.csv")
        second = _simulate(workdir, "b.csv")
        assert first.read_bytes() == second.read_bytes()
        assert len(pd.read_csv(first)) == 400

    def test_unknown_scenario(self, workdir):
        """An unknown preset exits with the config code."""
        assert main(["simulate", "--scenario", "nope", "--out", str(workdir / "x.csv")]) == EXIT_CONFIG


class TestInputErrors:
    """Bad inputs map to distinct exit codes."""

    def test_negative_counts(self, workdir):
        """Negative counts are a schema error."""
        path = workdir / "bad.csv"
        path.write_text("y\n1\n-2\n3\n")
        assert main(["fit-mixture", "--data", str(path), "--pre-training-len", "1",
                     "--training-len", "1"]) == EXIT_SCHEMA

    def test_missing_file(self, workdir):
        """A missing data file is a schema error."""
        assert main(["fit-mixture", "--data", str(workdir / "none.csv"), "--pre-training-len", "1",
                     "--training-len", "1"]) == EXIT_SCHEMA

    def test_inconsistent_split(self, workdir):
        """A training block no longer than the lag window is a config error."""
        data = _simulate(workdir, length=100)
        assert main(["fit-mixture", "--data", str(data), "--pre-training-len", "10", "--training-len", "3",
                     "--max-lag", "3"]) == EXIT_CONFIG

    def test_manifest_from_other_data(self, workdir):
        """A manifest built from different data is refused."""
        data = _simulate(workdir, "a.csv", seed=1)
        other = _simulate(workdir, "b.csv", seed=2)
        mixtures = _fit_mixture(workdir, data)
        assert main(["select-lags", "--data", str(other), "--mixtures", str(mixtures),
                     "--burnin", "5", "--iters", "5", "--out", str(workdir / "lags.json")]) == EXIT_SCHEMA

    def test_invalid_lag_manifest_fields(self, workdir):
        """Present-but-invalid manifest fields are schema errors, not crashes."""
        data = _simulate(workdir)
        mixtures = _fit_mixture(workdir, data)
        lags = workdir / "lags.json"
        assert main(["select-lags", "--data", str(data), "--mixtures", str(mixtures),
                     "--burnin", "5", "--iters", "10", "--out", str(lags)]) == EXIT_OK
        good = json.loads(lags.read_text())

        def fit_btf_with(**changes):
            broken = workdir / "broken.json"
            broken.write_text(json.dumps({**good, **changes}))
            return main(["fit-btf", "--data", str(data), "--lags", str(broken), "--burnin", "2", "--iters", "2",
                         "--L", "5", "--out", str(workdir / "btf")])

        assert fit_btf_with(hyperparams={**good["hyperparams"], "phi": -1.0}) == EXIT_SCHEMA
        assert fit_btf_with(partition={"assignments": [["a", "b"]]}) == EXIT_SCHEMA
        assert fit_btf_with(mixtures=[{"weights": [1.0], "rates": [-3.0]}]) == EXIT_SCHEMA
        assert fit_btf_with(partition={"assignments": [[0, 1]] * 5}) == EXIT_SCHEMA
        assert fit_btf_with(multivariate=True, mixtures=good["mixtures"] * 2) == EXIT_SCHEMA

    def test_invalid_draw_manifest(self, workdir):
        """Scoring a draw directory with a bad mixture entry is a schema error."""
        data = _simulate(workdir)
        mixtures = _fit_mixture(workdir, data)
        lags = workdir / "lags.json"
        assert main(["select-lags", "--data", str(data), "--mixtures", str(mixtures),
                     "--burnin", "5", "--iters", "10", "--out", str(lags)]) == EXIT_OK
        draws = workdir / "btf"
        assert main(["fit-btf", "--data", str(data), "--lags", str(lags), "--burnin", "2", "--iters", "3",
                     "--L", "5", "--out", str(draws)]) == EXIT_OK
        manifest = json.loads((draws / "manifest.json").read_text())
        manifest["mixtures"] = [{"weights": [0.5, 0.5], "rates": [0.0, 2.0]}]
        (draws / "manifest.json").write_text(json.dumps(manifest))
        assert main(["score", "--data", str(data), "--draws", str(draws)]) == EXIT_SCHEMA

        manifest["n_draws"] = "many"
        (draws / "manifest.json").write_text(json.dumps(manifest))
        assert main(["score", "--data", str(data), "--draws", str(draws)]) == EXIT_SCHEMA

    def test_split_without_test_block(self, workdir):
        """Fitting may use the whole series; scoring it is a config error."""
        data = _simulate(workdir)
        par = workdir / "par"
        assert main(["fit-par", "--data", str(data), "--pre-training-len", "150", "--training-len", "250",
                     "--q-max", "2", "--burnin", "20", "--iters", "40", "--out", str(par)]) == EXIT_OK
        assert json.loads((par / "manifest.json").read_text())["split"]["test_len"] == 0
        assert main(["score", "--data", str(data), "--draws", str(par)]) == EXIT_CONFIG


class TestPipeline:
    """Runs every stage on a short simulated series."""

    def test_btf_and_par_stages(self, workdir):
        """Each stage should succeed and the scores should be finite."""
        data = _simulate(workdir)
        mixtures = _fit_mixture(workdir, data)
        manifest = json.loads(mixtures.read_text())
        assert manifest["split"] == {"pre_training_len": 150, "training_len": 200, "test_len": 50, "max_lag": 3}
        assert (workdir / "mixtures_trace_y.csv").exists()

        lags = workdir / "lags.json"
        assert main(["select-lags", "--data", str(data), "--mixtures", str(mixtures),
                     "--burnin", "20", "--iters", "50", "--out", str(lags)]) == EXIT_OK
        lag_manifest = json.loads(lags.read_text())
        assert len(lag_manifest["inclusion"]) == 3
        assert (workdir / "lags_inclusion.csv").exists()

        btf_args = ["fit-btf", "--data", str(data), "--lags", str(lags), "--burnin", "20", "--iters", "30",
                    "--L", "20"]
        assert main(btf_args + ["--out", str(workdir / "btf")]) == EXIT_OK
        assert main(btf_args + ["--out", str(workdir / "btf_again")]) == EXIT_OK
        for f in sorted((workdir / "btf").iterdir()):
            assert f.read_bytes() == (workdir / "btf_again" / f.name).read_bytes()

        score = workdir / "score.json"
        assert main(["score", "--data", str(data), "--draws", str(workdir / "btf"), "--out", str(score)]) == EXIT_OK
        result = json.loads(score.read_text())
        assert result["model"] == "btf"
        assert result["test_len"] == 50
        assert np.isfinite(result["score"])
        assert len(pd.read_csv(workdir / "score_trace.csv")) == 50

        assert main(["fit-par", "--data", str(data), "--pre-training-len", "150", "--training-len", "200",
                     "--q-max", "3", "--burnin", "100", "--iters", "200", "--out", str(workdir / "par")]) == EXIT_OK
        par_score = workdir / "par_score.json"
        assert main(["score", "--data", str(data), "--draws", str(workdir / "par"),
                     "--out", str(par_score)]) == EXIT_OK
        assert np.isfinite(json.loads(par_score.read_text())["score"])

    def test_multivariate_par_scores_each_series(self, workdir):
        """A multivariate PAR run reports one score per series and no pooled score."""
        data = _simulate(workdir, scenario="table3-A")
        par = workdir / "par"
        assert main(["fit-par", "--data", str(data), "--pre-training-len", "150", "--training-len", "200",
                     "--q-max", "2", "--burnin", "50", "--iters", "100", "--out", str(par)]) == EXIT_OK
        out = workdir / "par_score.json"
        assert main(["score", "--data", str(data), "--draws", str(par), "--out", str(out)]) == EXIT_OK
        result = json.loads(out.read_text())
        assert sorted(result["per_series"]) == ["y1", "y2"]
        assert all(np.isfinite(v) for v in result["per_series"].values())
        assert result["score"] is None


class TestExperiment:
    """Tests for the experiment runner."""

    def test_experiment_command(self, workdir):
        """A tiny univariate study writes scores and a report."""
        config = {
            "name": "tiny",
            "scenario": "table2-A",
            "series_length": 300,
            "replicates": 2,
            "split": {"pre_training_len": 100, "train_lens": [220], "max_lag": 3},
            "mixture": {"c": 3, "burnin": 20, "iters": 40},
            "lag_selection": {"burnin": 10, "iters": 30},
            "btf": {"burnin": 10, "iters": 20},
            "par": {"q_max": 3, "burnin": 50, "iters": 100},
            "hyperparams": {"L": 20},
        }
        path = workdir / "tiny.json"
        path.write_text(json.dumps(config))
        out = workdir / "results"
        assert main(["experiment", "--config", str(path), "--out-dir", str(out)]) == EXIT_OK
        scores = pd.read_csv(out / "scores.csv")
        assert len(scores) == 6
        assert set(scores["model"]) == {"BTF", "PAR-AIC", "PAR-BIC"}
        assert set(scores["split"]) == {"220:80"}
        report = pd.read_csv(out / "report.csv")
        assert {"BTF_mean", "BTF_sd", "PAR-AIC_mean", "PAR-BIC_mean", "winner"} <= set(report.columns)
        assert (out / "report.txt").exists()
        assert ExperimentConfig.load(out / "config.json").name == "tiny"

    def _multi_config(self, **overrides):
        data = {
            "name": "tiny-multi",
            "scenario": "table3-A",
            "series_length": 200,
            "replicates": 1,
            "multivariate": True,
            "split": {"pre_training_len": 60, "train_lens": [150], "max_lag": 2, "pretrain_sizes": [40, 60]},
            "mixture": {"c": 3, "burnin": 20, "iters": 40},
            "lag_selection": {"burnin": 10, "iters": 20},
            "btf": {"burnin": 10, "iters": 10},
            "par": {"q_max": 2, "criteria": ["BIC"], "burnin": 50, "iters": 100},
            "hyperparams": {"L": 10},
        }
        data.update(overrides)
        return ExperimentConfig.from_dict(data)

    def test_multivariate_and_pretrain_sweep(self):
        """Only the configured target is scored; a pre-training sweep labels BTF by size."""
        scores, report = run_experiment(self._multi_config(targets=[1]))
        assert scores["model"].tolist() == ["BTF-40", "BTF-60", "PAR-BIC"]
        assert set(scores["target"]) == {"y1"}
        assert np.all(np.isfinite(scores["score"]))
        assert report["target"].tolist() == ["y1"]
        assert report.iloc[0]["winner"] in {"BTF-40", "BTF-60", "PAR-BIC"}

    def test_every_target_reported_separately(self, monkeypatch):
        """Each target gets its own row carrying its own score, never an average."""
        seen = []
        original = experiment.score_btf

        def recording_score_btf(draws, rules, series, split, predictors, target=0):
            score = original(draws, rules, series, split, predictors, target)
            seen.append((series.names[target], score))
            return score

        monkeypatch.setattr(experiment, "score_btf", recording_score_btf)
        config = self._multi_config(split={"pre_training_len": 60, "train_lens": [150], "max_lag": 2})
        scores, report = run_experiment(config)
        btf = scores[scores["model"] == "BTF"]
        assert list(zip(btf["target"], btf["score"])) == seen
        assert sorted(btf["target"]) == ["y1", "y2"]
        assert len(scores[scores["model"] == "PAR-BIC"]) == 2
        assert sorted(report["target"]) == ["y1", "y2"]

    def test_target_outside_series(self):
        """A target beyond the data's series count is a config error."""
        config = self._multi_config(targets=[3], scenario="table2-A", multivariate=False)
        with pytest.raises(ConfigError):
            run_experiment(config)
