import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional

import numpy as np
import yaml

from utils.errors import ConfigError

# Stream keys mixed with the master seed so every random consumer gets its own stream.
SEED_SEPARATION = 1
SEED_INITIAL_SELECTION = 2
SEED_LEARNER = 3
SEED_SELECTION = 4
SEED_REDAL = 5
SEED_FEATURES = 6


def derive_seed(master_seed: int, *keys: int) -> int:
    """Deterministic 32-bit child seed for (master_seed, *keys)."""
    return int(np.random.SeedSequence([master_seed, *keys]).generate_state(1)[0])


class BudgetMode(str, Enum):
    POINT_FRACTION = "point_fraction"
    AREA_M2 = "area_m2"
    REGION_COUNT = "region_count"


class Policy(str, Enum):
    RANDOM = "random"
    AVG_VAR = "avg_var"
    AVG_ENT = "avg_ent"
    REDAL = "redal"


class SeparationMethod(str, Enum):
    COLUMNS = "columns"
    SUPERVOXELS = "supervoxels"


@dataclass(frozen=True)
class SelectionBudget:
    mode: BudgetMode = BudgetMode.POINT_FRACTION
    amount: float = 0.01

    def validate(self) -> None:
        if not self.amount > 0:
            raise ConfigError(f"budget amount must be > 0, got {self.amount}")


@dataclass(frozen=True)
class AugmentConfig:
    scale: bool = True
    rotation: bool = True
    elastic: bool = False
    chromatic: bool = True

    @classmethod
    def from_letters(cls, letters: str) -> "AugmentConfig":
        """Parse a subset of S (scale), R (rotation), E (elastic), C (chromatic); 'none' disables all."""
        text = letters.strip().upper()
        if text == "NONE":
            text = ""
        unknown = set(text) - set("SREC")
        if unknown:
            raise ConfigError(f"unknown augmentation letters {sorted(unknown)}, use a subset of S, R, E, C")
        return cls(scale="S" in text, rotation="R" in text, elastic="E" in text, chromatic="C" in text)

    @property
    def letters(self) -> str:
        flags = (("S", self.scale), ("R", self.rotation), ("E", self.elastic), ("C", self.chromatic))
        return "".join(letter for letter, on in flags if on) or "none"

    @property
    def geometric(self) -> bool:
        return self.scale or self.rotation or self.elastic

    @property
    def enabled(self) -> bool:
        return self.geometric or self.chromatic

    def validate(self) -> None:
        pass


@dataclass(frozen=True)
class LearnerConfig:
    ensemble_size: int = 4
    lr: float = 0.05
    epochs: int = 50
    batch: int = 256
    l2: float = 1e-4
    optimizer: str = "sgd"
    k_neighbors: int = 16

    def validate(self) -> None:
        if self.ensemble_size < 1:
            raise ConfigError(f"ensemble size must be >= 1, got {self.ensemble_size}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        if self.epochs < 1 or self.batch < 1:
            raise ConfigError("epochs and batch size must be >= 1")
        if self.l2 < 0:
            raise ConfigError(f"l2 must be >= 0, got {self.l2}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.k_neighbors < 3:
            raise ConfigError(f"k_neighbors must be >= 3, got {self.k_neighbors}")


@dataclass(frozen=True)
class SupervoxelParams:
    ransac_iterations: int = 200
    inlier_threshold: float = 0.1
    eps: float = 0.5
    min_pts: int = 5
    ground_region_target_area: float = 4.0

    def validate(self) -> None:
        if self.ransac_iterations < 1:
            raise ConfigError(f"ransac_iterations must be >= 1, got {self.ransac_iterations}")
        if not self.inlier_threshold > 0:
            raise ConfigError(f"inlier_threshold must be > 0, got {self.inlier_threshold}")
        if not self.eps > 0 or self.min_pts < 1:
            raise ConfigError("DBSCAN needs eps > 0 and min_pts >= 1")
        if not self.ground_region_target_area > 0:
            raise ConfigError("ground_region_target_area must be > 0")


@dataclass(frozen=True)
class SeparationConfig:
    method: SeparationMethod = SeparationMethod.COLUMNS
    r: float = 0.5
    supervoxel: SupervoxelParams = field(default_factory=SupervoxelParams)

    def validate(self) -> None:
        if self.method == SeparationMethod.COLUMNS and not self.r > 0:
            raise ConfigError(f"column edge length r must be > 0, got {self.r}")
        self.supervoxel.validate()


@dataclass(frozen=True)
class RedalConfig:
    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.5
    k_div: int = 10
    decay: float = 0.95
    single_member: bool = False

    def validate(self) -> None:
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("ReDAL weights alpha, beta, gamma must be >= 0")
        if not 0 < self.decay <= 1:
            raise ConfigError(f"ReDAL decay must lie in (0, 1], got {self.decay}")
        if self.k_div < 1:
            raise ConfigError(f"ReDAL k_div must be >= 1, got {self.k_div}")


@dataclass(frozen=True)
class ExperimentConfig:
    separation: SeparationConfig = field(default_factory=SeparationConfig)
    policy: Policy = Policy.AVG_ENT
    budget: SelectionBudget = field(default_factory=SelectionBudget)
    initial_budget: SelectionBudget = field(default_factory=SelectionBudget)
    cycles: int = 10
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    redal: RedalConfig = field(default_factory=RedalConfig)
    seed: int = 0
    ignore_classes: tuple[int, ...] = ()
    eval_on_train: bool = False

    def validate(self) -> "ExperimentConfig":
        if self.cycles < 1:
            raise ConfigError(f"cycles must be >= 1, got {self.cycles}")
        for part in (self.separation, self.budget, self.initial_budget, self.learner, self.augment, self.redal):
            part.validate()
        return self

    def to_dict(self) -> dict[str, Any]:
        return _plain(dataclasses.asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "ExperimentConfig":
        return _build(cls, values)


@dataclass
class RunManifest:
    runs: list[tuple[ExperimentConfig, int]]
    output_dir: str = "runs"
    curves: bool = False

    def validate(self) -> None:
        seen: set[tuple[str, int]] = set()
        for config, seed in self.runs:
            key = (dataclasses.replace(config, seed=0).fingerprint(), seed)
            if key in seen:
                raise ConfigError(f"seed {seed} appears twice for the same configuration")
            seen.add(key)


def _plain(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _build(cls, values: dict[str, Any]):
    """Recursively build a (nested) config dataclass from a plain mapping."""
    if not isinstance(values, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}, got {type(values).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in values.items():
        current = getattr(defaults, name)
        try:
            if dataclasses.is_dataclass(current):
                kwargs[name] = _build(type(current), value)
            elif isinstance(current, Enum):
                kwargs[name] = type(current)(value)
            elif isinstance(current, tuple):
                kwargs[name] = tuple(int(v) for v in value)
            elif isinstance(current, bool):
                kwargs[name] = bool(value)
            elif isinstance(current, int):
                kwargs[name] = int(value)
            elif isinstance(current, float):
                kwargs[name] = float(value)
            else:
                kwargs[name] = value
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid value {value!r} for {cls.__name__}.{name}: {e}") from e
    return cls(**kwargs)


def merge_dicts(base: dict[str, Any], override: dict[str, Any]) -> dict[str, Any]:
    """Deep merge; values from `override` win, None values are ignored."""
    merged = dict(base)
    for key, value in override.items():
        if value is None:
            continue
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_dicts(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config_file(path: Optional[str]) -> dict[str, Any]:
    """Read a YAML experiment config; an absent path yields an empty mapping."""
    if not path:
        return {}
    with open(path, encoding="utf-8") as f:
        try:
            values = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"invalid YAML in {path}: {e}") from e
    if not isinstance(values, dict):
        raise ConfigError(f"{path} must contain a YAML mapping")
    return values
