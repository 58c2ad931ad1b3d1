"""
Experiment configuration: one JSON document per simulation-table row or
data study, with sections for the split and each fitting stage.
"""

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional

from .core import ConfigError, Hyperparams


def _build(cls, data: Optional[Dict], section: str):
    """Instantiate a section dataclass, rejecting unknown keys."""
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError(f"Section '{section}' must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"Unknown keys in '{section}': {', '.join(sorted(unknown))}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid '{section}' section: {e}")


@dataclass
class SplitConfig:
    """
    train_lens: pre-training + training lengths to evaluate (test = the rest)
    pretrain_sizes: optional sweep over pre-training lengths; empty means
        just `pre_training_len`
    """
    pre_training_len: int = 3000
    train_lens: List[int] = field(default_factory=lambda: [4000, 4500])
    max_lag: int = 3
    pretrain_sizes: List[int] = field(default_factory=list)

    def sizes(self) -> List[int]:
        return list(self.pretrain_sizes) or [self.pre_training_len]


@dataclass
class MixtureConfig:
    c: int = 10
    burnin: int = 2000
    iters: int = 5000
    min_weight: float = 0.01
    rate_merge_tol: float = 0.10


@dataclass
class LagSelectionConfig:
    burnin: int = 1000
    iters: int = 2000
    threshold: float = 0.5


@dataclass
class BtfConfig:
    burnin: int = 2000
    iters: int = 5000
    thin: int = 1


@dataclass
class ParConfig:
    q_max: int = 5
    criteria: List[str] = field(default_factory=lambda: ["AIC", "BIC"])
    burnin: int = 5000
    iters: int = 10000
    intercept_precision: float = 1e-6
    coefficient_precision: float = 1e-4


@dataclass
class ExperimentConfig:
    """
    A whole experiment: data source, replicates and every stage's settings.

    Exactly one of `scenario` (preset name or scenario file) and `data`
    (CSV of observed counts) is set. `targets` lists the 1-based series
    to forecast; None means every series of a multivariate run.
    """
    name: str
    scenario: Optional[str] = None
    data: Optional[str] = None
    series_length: Optional[int] = None
    replicates: int = 10
    seed: int = 1
    multivariate: bool = False
    targets: Optional[List[int]] = None
    split: SplitConfig = field(default_factory=SplitConfig)
    mixture: MixtureConfig = field(default_factory=MixtureConfig)
    lag_selection: LagSelectionConfig = field(default_factory=LagSelectionConfig)
    btf: BtfConfig = field(default_factory=BtfConfig)
    par: ParConfig = field(default_factory=ParConfig)
    hyperparams: Hyperparams = field(default_factory=Hyperparams)

    SECTIONS = {
        "split": SplitConfig,
        "mixture": MixtureConfig,
        "lag_selection": LagSelectionConfig,
        "btf": BtfConfig,
        "par": ParConfig,
        "hyperparams": Hyperparams,
    }

    def __post_init__(self):
        if (self.scenario is None) == (self.data is None):
            raise ConfigError("Set exactly one of 'scenario' or 'data'")

    @classmethod
    def from_dict(cls, data: Dict) -> "ExperimentConfig":
        if not isinstance(data, dict) or "name" not in data:
            raise ConfigError("Experiment config needs a 'name'")
        top = {f.name for f in fields(cls)}
        unknown = set(data) - top
        if unknown:
            raise ConfigError(f"Unknown top-level keys: {', '.join(sorted(unknown))}")
        kwargs = {k: v for k, v in data.items() if k not in cls.SECTIONS}
        for section, section_cls in cls.SECTIONS.items():
            kwargs[section] = _build(section_cls, data.get(section), section)
        try:
            return cls(**kwargs)
        except TypeError as e:
            raise ConfigError(f"Invalid experiment config: {e}")

    def to_dict(self) -> Dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = asdict(value) if f.name in self.SECTIONS else value
        return out

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Could not read config {path}: {e}")
        return cls.from_dict(data)

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write("\n")
