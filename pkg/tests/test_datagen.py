#!/usr/bin/env python3
"""Tests for the simulation scenarios."""

import json
import sys
import tempfile
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from countbtf.core import ConfigError
from countbtf.datagen import SCENARIOS, Design, ScenarioSpec, resolve_scenario, simulate


class TestScenarios:
    """Tests for the preset table."""

    def test_eighteen_presets(self):
        """Three designs times six rows."""
        assert len(SCENARIOS) == 18
        assert SCENARIOS["table1-F"].design is Design.PAR
        assert SCENARIOS["table2-E"].lags == (3, 7, 9)
        assert SCENARIOS["table3-F"].n_series == 3

    def test_max_lag(self):
        """max_lag covers coefficients, threshold lags and dependencies."""
        assert SCENARIOS["table1-C"].max_lag == 29
        assert SCENARIOS["table2-D"].max_lag == 9
        assert SCENARIOS["table3-D"].max_lag == 5

    def test_unknown_name(self):
        """Should raise ConfigError for an unknown preset."""
        with pytest.raises(ConfigError):
            resolve_scenario("table9-Z")

    def test_scenario_file(self):
        """A JSON scenario file should resolve to the same spec."""
        spec = SCENARIOS["table3-C"]
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "scenario.json"
            path.write_text(json.dumps(spec.to_dict()))
            assert resolve_scenario(path) == spec
            assert resolve_scenario(path, T=300).T == 300

    def test_bad_scenario_file(self):
        """A malformed scenario should raise ConfigError."""
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "scenario.json"
            path.write_text(json.dumps({"design": "SPLINE"}))
            with pytest.raises(ConfigError):
                resolve_scenario(path)


class TestSimulate:
    """Tests for the generators."""

    def test_deterministic(self):
        """Same (scenario, seed, stream) should reproduce bit for bit."""
        a = simulate("table2-C", 3, T=500, stream=(1, 0))
        b = simulate("table2-C", 3, T=500, stream=(1, 0))
        c = simulate("table2-C", 3, T=500, stream=(2, 0))
        np.testing.assert_array_equal(a.values, b.values)
        assert not np.array_equal(a.values, c.values)

    def test_par_zero_coefficients_is_iid(self):
        """beta_0 = 0 and no slopes gives iid PD(1)."""
        series = simulate(ScenarioSpec(Design.PAR, T=4000, beta0=0.0), 1)
        assert series.values.mean() == pytest.approx(1.0, abs=0.05)

    def test_long_par_stays_finite(self):
        """The table1-F process should not blow up over 5000 steps."""
        series = simulate("table1-F", 2)
        assert series.length == 5000
        assert series.values.max() < 10 ** 6

    def test_equal_rates_is_iid(self):
        """nu_plus = nu_minus makes the threshold process iid."""
        spec = ScenarioSpec(Design.NONLINEAR, T=4000, lags=(3,), nu_plus=10.0, nu_minus=10.0)
        series = simulate(spec, 4)
        assert series.values.mean() == pytest.approx(10.0, abs=0.2)

    def test_regimes_replay(self):
        """Conditional means per regime should match nu_plus and nu_minus."""
        y = simulate("table2-B", 5, T=10000).values[0]
        t = np.arange(7, y.size)
        high = y[t - 7] >= 30
        assert high.any() and (~high).any()
        assert y[t[high]].mean() == pytest.approx(30.0, rel=0.05)
        assert y[t[~high]].mean() == pytest.approx(50.0, rel=0.05)
        assert 30.0 < y.mean() < 50.0

    def test_multivariate_independent_series(self):
        """In table3-A the second series has no dependencies and stays PD(20)."""
        series = simulate("table3-A", 6)
        assert series.names == ("y1", "y2")
        assert series.values[1].mean() == pytest.approx(20.0, abs=0.5)
        assert series.values[0, 10:].mean() == pytest.approx(10.0, abs=0.5)
