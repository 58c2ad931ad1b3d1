"""
Config guard - validates experiment configs against guardrails.
Rejects out-of-range settings and inconsistent splits before any sampling starts.
"""

import json
from pathlib import Path
from typing import Dict, List, Optional

from .core import ConfigError
from .datagen import SCENARIOS
from .experiment_config import ExperimentConfig

DEFAULT_GUARDRAILS = Path(__file__).resolve().parent.parent / "config" / "guardrails.json"


class ConfigGuard:
    """Validates experiment configurations."""

    def __init__(self, guardrails_path: Optional[str] = None):
        path = Path(guardrails_path) if guardrails_path else DEFAULT_GUARDRAILS
        try:
            with open(path) as f:
                self.guardrails = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Could not read guardrails {path}: {e}")

    def _lookup(self, config: Dict, dotted: str):
        value = config
        for part in dotted.split("."):
            if not isinstance(value, dict) or part not in value:
                return None
            value = value[part]
        return value

    def problems(self, config: ExperimentConfig, raw: Optional[Dict] = None) -> List[str]:
        """
        List every guardrail violation.

        Args:
            config: parsed config
            raw: the document it was parsed from, checked for forbidden keys
        """
        found = []
        data = config.to_dict()

        for forbidden in self.guardrails["forbidden_keys"]:
            if raw is not None and self._lookup(raw, forbidden) is not None:
                found.append(f"Forbidden key: {forbidden}")

        for key, (low, high) in self.guardrails["safe_ranges"].items():
            value = self._lookup(data, key)
            if value is None:
                continue
            values = value if isinstance(value, list) else [value]
            for v in values:
                if not isinstance(v, (int, float)) or isinstance(v, bool):
                    found.append(f"{key} must be numeric, got {v!r}")
                elif not low <= v <= high:
                    found.append(f"{key}={v} outside safe range [{low}, {high}]")

        allowed = set(self.guardrails["allowed_criteria"])
        for criterion in config.par.criteria:
            if criterion.upper() not in allowed:
                found.append(f"Unknown order-selection criterion: {criterion}")

        split = config.split
        for pre in split.sizes():
            for train_len in split.train_lens:
                if train_len - pre <= split.max_lag:
                    found.append(f"Training block {train_len - pre} (train_len={train_len}, "
                                 f"pre_training_len={pre}) not longer than max_lag={split.max_lag}")
        if config.series_length is not None:
            for train_len in split.train_lens:
                if train_len >= config.series_length:
                    found.append(f"train_len={train_len} leaves no test points in {config.series_length}")
        if config.targets is not None:
            if not config.targets or len(set(config.targets)) != len(config.targets):
                found.append(f"targets must list distinct series, got {config.targets}")
            elif config.scenario in SCENARIOS:
                n_series = SCENARIOS[config.scenario].n_series
                for target in config.targets:
                    if isinstance(target, int) and target > n_series:
                        found.append(f"target {target} not in scenario {config.scenario} ({n_series} series)")
        if config.data is not None and config.replicates != 1:
            found.append("Observed-data experiments run exactly one replicate")
        return found

    def check(self, config: ExperimentConfig, raw: Optional[Dict] = None) -> ExperimentConfig:
        """Raise ConfigError listing every problem; return the config otherwise."""
        found = self.problems(config, raw)
        if found:
            raise ConfigError("; ".join(found))
        return config

    def load(self, path) -> ExperimentConfig:
        """Load a config file and validate it; forbidden keys are reported before parsing."""
        try:
            with open(path) as f:
                raw = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Could not read config {path}: {e}")
        forbidden = [key for key in self.guardrails["forbidden_keys"] if self._lookup(raw, key) is not None]
        if forbidden:
            raise ConfigError(f"Forbidden keys: {', '.join(forbidden)}")
        return self.check(ExperimentConfig.from_dict(raw), raw)
