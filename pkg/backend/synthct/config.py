import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Mapping, Optional, Tuple

import yaml

from backend.synthct.conformal import Aggregation, EvalPolicy
from backend.synthct.core import NormalizationSpec, Units
from backend.synthct.errors import InvalidConfig, SynthCTError, UnknownConfigKey
from backend.synthct.metrics import StratificationBins
from backend.synthct.phantom import DegradationSpec, PhantomSpec
from backend.synthct.segmentation import BodySegConfig, BoneSegConfig, MorphKernel
from backend.synthct.translator import SamplerConfig, TranslatorConfig

logger = logging.getLogger(__name__)

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


@dataclass(frozen=True)
class ConformalConfig:
    alpha: float = 0.1
    crc_b: float = 1.0
    bound_quantiles: Tuple[float, float] = (0.05, 0.95)
    aggregation: Aggregation = Aggregation.IMAGE
    eval_policy: EvalPolicy = EvalPolicy.BODY
    clip_intervals: bool = True
    chunk_pixels: int = 16384
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "aggregation", Aggregation(self.aggregation))
        object.__setattr__(self, "eval_policy", EvalPolicy(self.eval_policy))
        object.__setattr__(self, "bound_quantiles", tuple(float(q) for q in self.bound_quantiles))
        if not 0.0 < self.alpha < 1.0:
            raise InvalidConfig(f"conformal.alpha must be in (0, 1), got {self.alpha}")
        q_lo, q_hi = self.bound_quantiles
        if not 0.0 <= q_lo < q_hi <= 1.0:
            raise InvalidConfig(f"conformal.bound_quantiles must satisfy 0 <= lo < hi <= 1, got {self.bound_quantiles}")
        if self.crc_b <= 0 or self.chunk_pixels < 1 or self.workers < 1:
            raise InvalidConfig("conformal.crc_b, chunk_pixels and workers must be positive")


@dataclass(frozen=True)
class MetricsConfig:
    bins: Tuple[float, ...] = (-200.0, 150.0, 350.0)
    dice_both_empty: Optional[float] = 1.0
    size_units: Units = Units.NORMALIZED

    def __post_init__(self):
        object.__setattr__(self, "bins", StratificationBins(self.bins).edges)
        object.__setattr__(self, "size_units", Units(self.size_units))
        if self.size_units is Units.SCALAR:
            raise InvalidConfig("metrics.size_units must be Normalized or HU")

    @property
    def stratification(self) -> StratificationBins:
        return StratificationBins(self.bins, Units.HU)


@dataclass(frozen=True)
class SplitConfig:
    fractions: Tuple[float, float, float] = (0.5, 0.3, 0.2)

    def __post_init__(self):
        fractions = tuple(float(f) for f in self.fractions)
        if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
            raise InvalidConfig(f"split.fractions must be three nonnegative values summing to 1, got {fractions}")
        object.__setattr__(self, "fractions", fractions)


@dataclass(frozen=True)
class RunConfig:
    """Resolved run configuration. Built from defaults, a YAML file and command-line flags."""
    normalization: NormalizationSpec = field(default_factory=NormalizationSpec)
    body: BodySegConfig = field(default_factory=BodySegConfig)
    bone: BoneSegConfig = field(default_factory=BoneSegConfig)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    degradation: DegradationSpec = field(default_factory=DegradationSpec)
    translator: TranslatorConfig = field(default_factory=TranslatorConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    conformal: ConformalConfig = field(default_factory=ConformalConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    seed: int = 0
    log_level: str = "INFO"

    def __post_init__(self):
        level = str(self.log_level).upper()
        if level not in LOG_LEVELS:
            raise InvalidConfig(f"log_level must be one of {LOG_LEVELS}, got {self.log_level}")
        object.__setattr__(self, "log_level", level)


def _apply(base: Any, data: Mapping[str, Any], prefix: str) -> Any:
    if not isinstance(data, Mapping):
        raise InvalidConfig(f"Section '{prefix or '<root>'}' must be a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(base)}
    updates = {}
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else str(key)
        if key not in names:
            raise UnknownConfigKey(path)
        current = getattr(base, key)
        if isinstance(current, MorphKernel):
            updates[key] = MorphKernel.parse(value)
        elif dataclasses.is_dataclass(current):
            updates[key] = _apply(current, value if value is not None else {}, path)
        elif isinstance(current, tuple):
            if not isinstance(value, (list, tuple)):
                raise InvalidConfig(f"'{path}' must be a list, got {value!r}")
            updates[key] = tuple(value)
        else:
            updates[key] = value
    try:
        return dataclasses.replace(base, **updates)
    except SynthCTError:
        raise
    except (TypeError, ValueError) as e:
        raise InvalidConfig(f"Invalid value in section '{prefix or '<root>'}': {e}")


def from_dict(data: Optional[Mapping[str, Any]], base: Optional[RunConfig] = None) -> RunConfig:
    """Overlays a nested mapping onto `base` (defaults when omitted), rejecting unknown keys."""
    return _apply(base if base is not None else RunConfig(), data or {}, "")


def to_dict(value: Any) -> Any:
    """Plain JSON-ready structure of a config tree."""
    if isinstance(value, MorphKernel):
        return str(value)
    if dataclasses.is_dataclass(value):
        return {f.name: to_dict(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, (list, tuple)):
        return [to_dict(v) for v in value]
    return value


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def config_digest(cfg: RunConfig) -> str:
    """sha256 of the canonical JSON form of the resolved config."""
    return hashlib.sha256(canonical_json(to_dict(cfg)).encode("utf-8")).hexdigest()


def load_config(path: str) -> Dict[str, Any]:
    """Reads a YAML config file into a mapping (an empty file yields {})."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except OSError as e:
        logger.error(f"Error reading config file {path}: {e}")
        raise
    except yaml.YAMLError as e:
        logger.error(f"Error parsing config file {path}: {e}")
        raise InvalidConfig(f"Config file {path} is not valid YAML: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise InvalidConfig(f"Config file {path} must contain a mapping at the top level")
    return data


def nest(dotted: Mapping[str, Any]) -> Dict[str, Any]:
    """{'conformal.alpha': 0.2} -> {'conformal': {'alpha': 0.2}}"""
    tree: Dict[str, Any] = {}
    for key, value in dotted.items():
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return tree


def resolve_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """
    Resolves the run config with precedence flag > file > built-in default.

    Args:
        path (Optional[str]): YAML config file.
        overrides (Optional[Mapping[str, Any]]): Dotted keys set by command-line flags;
            None values are ignored.

    Returns:
        RunConfig: The resolved config.
    """
    cfg = RunConfig()
    if path:
        cfg = from_dict(load_config(path), cfg)
        logger.debug(f"Loaded config file {path}")
    if overrides:
        cfg = from_dict(nest({k: v for k, v in overrides.items() if v is not None}), cfg)
    return cfg
