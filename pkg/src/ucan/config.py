"""Run configuration: TOML file, environment and command-line overrides."""

import dataclasses
import hashlib
import json
import logging
import os
import sys
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from ucan.baselines import BaselineConfig
from ucan.data import SplitSpec, TemplateSpec
from ucan.errors import ConfigError
from ucan.model import ModelConfig, TrainConfig
from ucan.risk import UcanConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "UCAN_OUTPUT_DIR"
HASH_LENGTH = 16


class Source:
    """Where the interaction log comes from."""

    SYNTHETIC = "synthetic"
    ML100K = "ml100k"

    ALL = (SYNTHETIC, ML100K)


@dataclass(frozen=True)
class DatasetConfig:
    """Dataset selection and split parameters."""

    source: str = Source.SYNTHETIC
    path: Optional[str] = None
    titles_path: Optional[str] = None
    n_users: int = 50
    n_items: int = 100
    planted_cluster_fraction: float = 0.25
    forget_fraction: float = 0.25
    core: int = 5

    def validate(self) -> None:
        """Check the dataset section.

        Raises:
            ConfigError: If a field is invalid or a required one is missing.
        """
        if self.source not in Source.ALL:
            raise ConfigError("dataset.source", f"unknown source {self.source!r}")
        if self.source == Source.ML100K and not self.path:
            raise ConfigError("dataset.path", "required when source is ml100k")
        if self.source == Source.SYNTHETIC:
            if self.n_users < 1:
                raise ConfigError("dataset.n_users", "must be positive")
            if self.n_items < 20:
                raise ConfigError("dataset.n_items", "synthetic logs need 20+ items")
            if not 0.0 <= self.planted_cluster_fraction < 1.0:
                raise ConfigError(
                    "dataset.planted_cluster_fraction", "must lie in [0, 1)"
                )
        if not 0.0 <= self.forget_fraction <= 1.0:
            raise ConfigError("dataset.forget_fraction", "must lie in [0, 1]")
        if self.core < 1:
            raise ConfigError("dataset.core", "must be positive")


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to reproduce a run from its seed."""

    seed: int = 0
    output_dir: str = "runs"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    template: TemplateSpec = field(default_factory=TemplateSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ucan: UcanConfig = field(default_factory=UcanConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)

    def validate(self) -> None:
        """Validate every section.

        ``model.n_items`` may still be 0 here; it is filled from the data.

        Raises:
            ConfigError: If any section is invalid.
        """
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed", "must be a 64-bit unsigned integer")
        if not self.output_dir:
            raise ConfigError("output_dir", "must not be empty")
        self.dataset.validate()
        self.template.validate()
        if self.model.n_items:
            self.model.validate()
        self.train.validate()
        self.ucan.validate()
        self.baseline.validate()

    def to_dict(self) -> dict[str, Any]:
        """Plain-JSON view of the configuration."""
        return _jsonable(dataclasses.asdict(self))

    def split_spec(self) -> SplitSpec:
        """Random per-user split seeded from the ``split`` substream."""
        return SplitSpec(self.dataset.forget_fraction, derive_seed(self.seed, "split"))

    def train_hyper(self) -> TrainConfig:
        """Training hyperparameters seeded from the ``train`` substream."""
        return dataclasses.replace(self.train, seed=derive_seed(self.seed, "train"))

    def baseline_hyper(self, method: Optional[str] = None) -> BaselineConfig:
        """Baseline hyperparameters seeded from the method's substream."""
        method = method or self.baseline.method
        return dataclasses.replace(
            self.baseline, method=method, seed=derive_seed(self.seed, method)
        )


SECTIONS: dict[str, type] = {
    "dataset": DatasetConfig,
    "template": TemplateSpec,
    "model": ModelConfig,
    "train": TrainConfig,
    "ucan": UcanConfig,
    "baseline": BaselineConfig,
}

# Substream seeds come from the top-level seed only.
DERIVED_FIELDS = {"train": {"seed"}, "baseline": {"seed"}}


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def derive_seed(seed: int, name: str) -> int:
    """Seed of a named substream.

    Args:
        seed: Run seed.
        name: Substream name such as ``split`` or ``init``.

    Returns:
        First 8 bytes of ``sha256(f"{seed}:{name}")`` as an unsigned integer.
    """
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def config_hash(config: RunConfig) -> str:
    """Short SHA-256 of the canonical JSON of a configuration.

    ``output_dir`` does not affect any artifact and is left out.
    """
    data = config.to_dict()
    data.pop("output_dir")
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:HASH_LENGTH]


def _coerce(key: str, value: Any, default: Any) -> Any:
    """Convert a raw file/flag value to the type of the field default."""
    if isinstance(value, list):
        value = tuple(value)
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true or false, got {value!r}")
        return value
    if isinstance(default, float) and type(value) is int:
        return float(value)
    if isinstance(default, tuple) and isinstance(value, tuple):
        return value
    if not isinstance(value, type(default)) or isinstance(value, bool):
        raise ConfigError(key, f"expected {type(default).__name__}, got {value!r}")
    return value


def _replace_fields(obj: Any, section: str, values: Mapping[str, Any]) -> Any:
    names = {f.name: f for f in dataclasses.fields(obj)}
    changes = {}
    for name, value in values.items():
        key = f"{section}.{name}" if section else name
        if name not in names or (section == "" and name in SECTIONS):
            raise ConfigError(key, "unknown key")
        if name in DERIVED_FIELDS.get(section, set()):
            raise ConfigError(key, "derived from the top-level seed; set seed instead")
        changes[name] = _coerce(key, value, getattr(obj, name))
    return dataclasses.replace(obj, **changes)


def from_mapping(
    data: Mapping[str, Any], base: Optional[RunConfig] = None
) -> RunConfig:
    """Apply a nested mapping (parsed TOML) on top of a configuration.

    Args:
        data: Top-level keys plus one table per section.
        base: Configuration to start from; defaults when omitted.

    Returns:
        The updated configuration.

    Raises:
        ConfigError: On an unknown key or a value of the wrong type.
    """
    config = base or RunConfig()
    top = {k: v for k, v in data.items() if k not in SECTIONS}
    sections = {}
    for name, section_type in SECTIONS.items():
        table = data.get(name)
        if table is None:
            continue
        if not isinstance(table, Mapping):
            raise ConfigError(name, f"expected a [{name}] table")
        current = getattr(config, name)
        assert isinstance(current, section_type)
        sections[name] = _replace_fields(current, name, table)
    config = _replace_fields(config, "", top)
    return dataclasses.replace(config, **sections)


def apply_overrides(config: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    """Apply dotted ``section.field`` overrides such as ``ucan.tau_risk``."""
    nested: dict[str, Any] = {}
    for key, value in overrides.items():
        section, _, name = key.rpartition(".")
        if section:
            nested.setdefault(section, {})[name] = value
        else:
            nested[name] = value
    return from_mapping(nested, config)


def read_toml(path: Path) -> dict[str, Any]:
    """Parse a TOML config file.

    Raises:
        ConfigError: If the file is missing or not valid TOML.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config", f"{path} does not exist")
    try:
        with open(path, "rb") as handle:
            return tomllib.load(handle)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("config", f"{path}: {exc}") from exc


def load_config(
    path: Optional[Path] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """Resolve a run configuration.

    Precedence, lowest first: dataclass defaults, the TOML file, the
    ``UCAN_OUTPUT_DIR`` environment variable, then ``overrides``.

    Args:
        path: Optional TOML file.
        overrides: Dotted keys from the command line.
        environ: Environment to read; ``os.environ`` when omitted.

    Returns:
        Validated configuration.
    """
    config = RunConfig()
    if path is not None:
        config = from_mapping(read_toml(path), config)
        logger.info("Loaded config %s", path)
    env = os.environ if environ is None else environ
    if env.get(OUTPUT_DIR_ENV):
        config = dataclasses.replace(config, output_dir=env[OUTPUT_DIR_ENV])
    if overrides:
        config = apply_overrides(config, overrides)
    config.validate()
    return config


def save_config(path: Path, config: RunConfig) -> None:
    """Write the resolved configuration as JSON next to run artifacts."""
    document = {"config_hash": config_hash(config), **config.to_dict()}
    Path(path).write_text(json.dumps(document, indent=2) + "\n", encoding="utf-8")
