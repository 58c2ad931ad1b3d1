#!/usr/bin/env python3
"""Tests for the split/merge lag-selection chain and its marginal likelihood."""

import math
import sys
from pathlib import Path

import numpy as np
import pytest
from scipy import integrate, stats

sys.path.insert(0, str(Path(__file__).parent.parent))

from countbtf import lag_selection
from countbtf.btf_gibbs import prepare_training
from countbtf.core import CellCapExceeded, Hyperparams, Predictor, make_split, predictor_layout
from countbtf.datagen import simulate
from countbtf.distributions import Rng
from countbtf.lag_selection import (
    KTrace,
    Partition,
    cell_statistics,
    important_lags,
    log_marginal,
    log_stirling2,
    modal_partition,
    proposal_log_ratio,
    propose_merge,
    propose_split,
    sample_K,
)
from countbtf.poisson_mixture import LabelRule, fit_series_mixtures


class TestPartition:
    """Tests for Partition."""

    def test_canonical_labels(self):
        """Relabelled clusters describe the same partition."""
        assert Partition(((1, 0, 1),)) == Partition(((0, 1, 0),))

    def test_k_and_clusters(self):
        """Should report cluster counts and grouped levels."""
        partition = Partition(((0, 0, 1, 2), (0,)))
        assert partition.k == (3, 1)
        assert partition.levels == (4, 1)
        assert partition.clusters(0) == [(0, 1), (2,), (3,)]

    def test_allocate(self):
        """Contexts map through each predictor's cluster map."""
        partition = Partition(((0, 0, 1), (0, 1)))
        D = np.array([[0, 1], [2, 0], [1, 1]])
        np.testing.assert_array_equal(partition.allocate(D), [[0, 1], [1, 0], [0, 1]])

    def test_dict_round_trip(self):
        """to_dict/from_dict should be the identity."""
        partition = Partition(((0, 1, 0, 2), (0, 0)))
        assert Partition.from_dict(partition.to_dict()) == partition


class TestCellStatistics:
    """Tests for per-cell tabulation."""

    def test_hand_example(self):
        """Two cells for a single predictor with k=2."""
        y = np.array([1, 2, 3, 4, 5, 6])
        D = np.array([[0], [1], [1], [0], [1], [0]])
        stats_ = cell_statistics(y, D, Partition(((0, 1),)))
        assert stats_.n.tolist() == [3, 3]
        assert stats_.S.tolist() == [11.0, 10.0]

    def test_conservation(self):
        """Counts and sums over cells should add up to the totals."""
        rng = np.random.default_rng(1)
        y = rng.poisson(4.0, 300)
        D = rng.integers(0, 3, size=(300, 3))
        stats_ = cell_statistics(y, D, Partition(((0, 1, 1), (0, 1, 2), (0, 0, 0))))
        assert stats_.n.sum() == 300
        assert stats_.S.sum() == y.sum()

    def test_cell_cap(self):
        """Should raise when the cell space exceeds the cap."""
        D = np.zeros((5, 2), dtype=int)
        with pytest.raises(CellCapExceeded):
            cell_statistics(np.ones(5), D, Partition(((0, 1, 2), (0, 1, 2))), cell_cap=8)


class TestLogMarginal:
    """Tests for the Gamma-marginalised likelihood."""

    def test_single_observation(self):
        """y={1}, a=b=1 gives ln(1/4)."""
        assert log_marginal(np.array([1]), np.zeros((1, 1), int), Partition(((0,),)), 1.0, 1.0) == \
            pytest.approx(math.log(0.25))

    def test_two_zeros(self):
        """y={0,0}, a=b=1 gives ln(1/3)."""
        assert log_marginal(np.array([0, 0]), np.zeros((2, 1), int), Partition(((0,),)), 1.0, 1.0) == \
            pytest.approx(math.log(1.0 / 3.0))

    def test_matches_quadrature(self):
        """Should match per-cell numerical integration of the Poisson likelihood."""
        rng = np.random.default_rng(2)
        y = rng.poisson(3.0, 9)
        D = rng.integers(0, 3, size=(9, 2))
        partition = Partition(((0, 1, 1), (0, 1, 0)))
        a, b = 2.0, 0.8
        cells = partition.allocate(D) @ np.array([1, 2])
        expected = 0.0
        for cell in np.unique(cells):
            ys = y[cells == cell]

            def integrand(lam):
                return np.exp(np.sum(stats.poisson.logpmf(ys, lam)) + stats.gamma.logpdf(lam, a, scale=1.0 / b))

            value, _ = integrate.quad(integrand, 0, np.inf, epsabs=0, epsrel=1e-12, limit=200)
            expected += math.log(value)
        assert log_marginal(y, D, partition, a, b) == pytest.approx(expected, abs=1e-7)

    def test_time_order_invariance(self):
        """Permuting training points should not change the score."""
        rng = np.random.default_rng(3)
        y = rng.poisson(5.0, 200)
        D = rng.integers(0, 4, size=(200, 2))
        partition = Partition(((0, 1, 1, 2), (0, 0, 1, 1)))
        order = rng.permutation(200)
        assert log_marginal(y[order], D[order], partition, 2.0, 1.0) == \
            pytest.approx(log_marginal(y, D, partition, 2.0, 1.0), abs=1e-9)


class TestStirling:
    """Tests for log_stirling2."""

    def test_known_values(self):
        """S(4,2)=7, S(5,3)=25, S(3,3)=1."""
        assert math.exp(log_stirling2(4, 2)) == pytest.approx(7.0)
        assert math.exp(log_stirling2(5, 3)) == pytest.approx(25.0)
        assert log_stirling2(3, 3) == 0.0

    def test_impossible(self):
        """More clusters than levels has no partitions."""
        assert log_stirling2(2, 3) == -math.inf


class TestProposals:
    """Tests for split/merge proposals and their correction terms."""

    def test_forced_split_two_levels(self):
        """With c_j=2 and k_j=1 the only move is the split {1},{2}."""
        proposed, log_q = propose_split(Partition.trivial([2]), 0, Rng(1))
        assert proposed == Partition(((0, 1),))
        assert log_q == pytest.approx(0.0)

    def test_forced_merge_back(self):
        """Merging the two singleton clusters returns the trivial partition."""
        proposed, log_q = propose_merge(Partition(((0, 1),)), 0, Rng(1))
        assert proposed == Partition.trivial([2])
        assert log_q == pytest.approx(0.0)

    def test_merge_single_cluster(self):
        """Should refuse to merge a single cluster."""
        with pytest.raises(ValueError):
            propose_merge(Partition.trivial([3]), 0, Rng(1))

    def test_split_singletons(self):
        """Should refuse to split when every cluster is a singleton."""
        with pytest.raises(ValueError):
            propose_split(Partition(((0, 1, 2),)), 0, Rng(1))

    def test_log_ratio_antisymmetric(self):
        """Forward and reverse proposal corrections should cancel."""
        rng = Rng(4)
        partition = Partition.trivial([5])
        for _ in range(50):
            if partition.k[0] < 5 and (partition.k[0] == 1 or rng.uniform() < 0.5):
                proposed, log_q = propose_split(partition, 0, rng)
            else:
                proposed, log_q = propose_merge(partition, 0, rng)
            assert log_q + proposal_log_ratio(proposed, partition, 0) == pytest.approx(0.0, abs=1e-12)
            partition = proposed

    def test_split_changes_one_predictor(self):
        """Other predictors' partitions are untouched by a split."""
        partition = Partition(((0, 0, 0), (0, 1, 1)))
        proposed, _ = propose_split(partition, 0, Rng(2))
        assert proposed.assignments[1] == partition.assignments[1]
        assert proposed.k == (2, 2)


class TestSampleK:
    """Tests for the lag-selection chain."""

    def test_prior_only_matches_geometric_prior(self):
        """Without data, k_j frequencies should follow exp(-phi*j*k)."""
        n = 50
        levels = (4, 4, 4)
        predictors = predictor_layout(1, 3)
        trace, _ = sample_K(np.ones(n), np.zeros((n, 3), dtype=int), predictors, levels,
                            Hyperparams(a=1.0), iters=30000, burnin=1000, rng=Rng(5),
                            use_likelihood=False)
        kappa = np.arange(1, 5)
        for j, predictor in enumerate(predictors):
            target = np.exp(-0.5 * predictor.lag * kappa)
            target /= target.sum()
            observed = np.bincount(trace.k_samples[:, j], minlength=5)[1:] / trace.k_samples.shape[0]
            assert 0.5 * np.abs(observed - target).sum() < 0.03

    def test_single_level_predictor_pinned(self):
        """A predictor with c_j=1 stays at k_j=1."""
        rng = np.random.default_rng(6)
        D = np.stack([np.zeros(200, dtype=int), rng.integers(0, 3, 200)], axis=1)
        trace, partition = sample_K(rng.poisson(5.0, 200), D, [Predictor(0, 1), Predictor(0, 2)], (1, 3),
                                    Hyperparams(), iters=200, burnin=50, rng=Rng(6))
        assert np.all(trace.k_samples[:, 0] == 1)
        assert partition.k[0] == 1

    def test_iid_series_has_no_important_lags(self):
        """Contexts unrelated to y should not be selected."""
        rng = np.random.default_rng(7)
        y = rng.poisson(10.0, 600)
        D = rng.integers(0, 4, size=(600, 3))
        trace, _ = sample_K(y, D, predictor_layout(1, 3), (4, 4, 4), Hyperparams(),
                            iters=400, burnin=100, rng=Rng(7))
        assert important_lags(trace) == []

    def test_detects_informative_lag(self):
        """A context that shifts the rate should be selected, the others not."""
        rng = np.random.default_rng(8)
        D = rng.integers(0, 4, size=(600, 3))
        y = rng.poisson(np.where(D[:, 0] >= 2, 30.0, 3.0))
        trace, partition = sample_K(y, D, predictor_layout(1, 3), (4, 4, 4), Hyperparams(),
                                    iters=400, burnin=100, rng=Rng(8))
        assert important_lags(trace) == [Predictor(0, 1)]
        assert partition.k[0] >= 2

    def test_oversized_proposals_rejected(self):
        """Proposals past cell_cap are rejected and the chain carries on."""
        rng = np.random.default_rng(10)
        D = rng.integers(0, 4, size=(300, 2))
        y = rng.poisson(np.where(D[:, 0] >= 2, 25.0, 4.0))
        trace, partition = sample_K(y, D, predictor_layout(1, 2), (4, 4), Hyperparams(cell_cap=3),
                                    iters=200, burnin=50, rng=Rng(10))
        assert np.all(np.prod(trace.k_samples, axis=1) <= 3)
        assert int(np.prod(partition.k)) <= 3

    def test_other_scoring_errors_propagate(self, monkeypatch):
        """Only cell-cap overflows are swallowed; other failures surface."""
        def broken(y, D, partition, *args):
            if max(partition.k) > 1:
                raise RuntimeError("marginal likelihood failed")
            return 0.0

        monkeypatch.setattr(lag_selection, "log_marginal", broken)
        rng = np.random.default_rng(11)
        with pytest.raises(RuntimeError, match="marginal likelihood failed"):
            sample_K(rng.poisson(5.0, 100), rng.integers(0, 3, size=(100, 2)), predictor_layout(1, 2), (3, 3),
                     Hyperparams(), iters=20, burnin=5, rng=Rng(11))

    def test_threshold_lag_seven_end_to_end(self):
        """Simulated lag-7 threshold data, labelled by the fitted mixture, should select lag 7."""
        hits = 0
        for seed in range(3):
            series = simulate("table2-B", seed, T=2000)
            split = make_split(series.length, 1000, 1000, 9)
            _, fits = fit_series_mixtures(series, split, 10, 300, 600, Rng(seed, (1,)))
            assert len(fits[0].rates) >= 2
            assert fits[0].rates[0] < 40.0 < fits[0].rates[-1]
            rules = [LabelRule(fit) for fit in fits]
            design = prepare_training(series, split, rules)
            assert len(design.levels) == 9 and len(set(design.levels)) == 1 and design.levels[0] >= 2
            trace, partition = sample_K(design.y, design.D, design.predictors, design.levels, Hyperparams(),
                                        iters=400, burnin=100, rng=Rng(seed, (2,)))
            chosen = important_lags(trace)
            hits += Predictor(0, 7) in chosen and partition.k[6] >= 2
        assert hits >= 2

    def test_deterministic(self):
        """Same seed should give the same trace."""
        rng = np.random.default_rng(9)
        y = rng.poisson(5.0, 100)
        D = rng.integers(0, 3, size=(100, 2))
        runs = [sample_K(y, D, predictor_layout(1, 2), (3, 3), Hyperparams(), 100, 20, Rng(3))[0]
                for _ in range(2)]
        np.testing.assert_array_equal(runs[0].k_samples, runs[1].k_samples)


class TestKTrace:
    """Tests for trace summaries."""

    def test_summaries(self):
        """Inclusion, frames and distributions should agree with the samples."""
        trace = KTrace(np.array([[1, 2], [2, 2], [1, 1], [1, 3]]), predictor_layout(1, 2), (3, 3))
        np.testing.assert_allclose(trace.inclusion_proportions(), [0.25, 0.75])
        assert important_lags(trace) == [Predictor(0, 2)]
        assert list(trace.to_frame().columns) == ["iter", "j", "k_j"]
        frame = trace.inclusion_frame(["flu"])
        assert frame["series"].tolist() == ["flu", "flu"]
        assert frame["lag"].tolist() == [1, 2]
        assert trace.n_important_distribution().to_dict() == {0: 0.25, 1: 0.5, 2: 0.25}
        assert trace.cell_count_distribution().to_dict() == {1: 0.25, 2: 0.25, 3: 0.25, 4: 0.25}

    def test_modal_partition(self):
        """Most-visited K, then the most-visited grouping at that k_j."""
        a = Partition(((0, 1, 1), (0, 0, 0)))
        b = Partition(((0, 0, 1), (0, 0, 0)))
        c = Partition(((0, 0, 0), (0, 0, 0)))
        partitions = [a, b, b, c]
        k_samples = np.array([p.k for p in partitions])
        assert modal_partition(k_samples, partitions) == b
