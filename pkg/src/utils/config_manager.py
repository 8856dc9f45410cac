"""
Configuration Manager for the E2EC contour lab

Resolves the run configuration in layers:
- Built-in desk-scale defaults (toy network sizes, short schedule)
- An optional YAML or JSON configuration file
- ``section.field=value`` overrides from the command line (last wins)

Sections are the per-module dataclasses: synth, mda, loss, model, train.
"""

import copy
import json
import logging
import os
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple, Union

import yaml

from core.dataset import SynthConfig
from core.errors import ConfigError
from core.labeling import MDAConfig
from core.losses import LossConfig
from core.model import ModelConfig
from core.training import TrainConfig

SEED_ENV_VAR = "E2EC_SEED"

SECTIONS = {
    "synth": SynthConfig,
    "mda": MDAConfig,
    "loss": LossConfig,
    "model": ModelConfig,
    "train": TrainConfig,
}
NESTED_IN_TRAIN = ("mda", "loss", "model")

# Sizes small enough for the full round trip to finish in minutes on a laptop
DESK_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "mda": {"n_vertices": 32},
    "model": {"n_vertices": 32, "channels": 8, "init_hidden": 32, "refine_channels": 16,
              "grid_size": [32, 32]},
    "train": {"epochs": 60, "optimizer": "adam", "learning_rate": 5e-3, "milestones": [40, 52]},
}


def parse_override(text: str) -> Tuple[str, str, Any]:
    """
    Split ``section.field=value``; the value is parsed as YAML so numbers,
    booleans and ``[a, b]`` lists come through typed.
    """
    key, sep, raw = text.partition("=")
    section, dot, name = key.strip().partition(".")
    if not sep or not dot or not section or not name:
        raise ConfigError(f"Override must look like section.field=value, got {text!r}")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as e:
        raise ConfigError(f"Cannot parse value of {key}: {e}") from e
    return section, name, value


def _field_default(cls, name: str) -> Any:
    for f in fields(cls):
        if f.name == name:
            return f.default
    return None


def _coerce(key: str, default: Any, value: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        # YAML 1.1 reads exponents without a dot ("1e-4") as strings
        if isinstance(value, str):
            try:
                value = float(value)
            except ValueError:
                raise ConfigError(f"{key} must be a number, got {value!r}")
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string, got {value!r}")
        return value
    if isinstance(default, (tuple, list)):
        if not isinstance(value, (tuple, list)):
            raise ConfigError(f"{key} must be a list, got {value!r}")
        return list(value)
    return value


class ConfigManager:
    """
    Builds and exports the resolved run configuration.

    Every output artifact embeds ``get_config_dict()``.
    """

    VERSION = "1.0"

    def __init__(self, config_file: Optional[Union[str, Path]] = None,
                 overrides: Iterable[str] = (), seed: Optional[int] = None,
                 validate: Iterable[str] = ("synth", "train")):
        """
        Args:
            config_file: YAML (.yaml/.yml) or JSON configuration file
            overrides: ``section.field=value`` strings applied after the file
            seed: Explicit seed for synth and train; defaults to $E2EC_SEED
            validate: Sections to validate ("synth", "mda", "train"); commands
                only check what they use

        Raises:
            ConfigError: on unknown keys, mistyped values or failed validation
        """
        self.logger = logging.getLogger(__name__)
        self.values = self._defaults()

        env_seed = self._env_seed()
        if env_seed is not None:
            self._set_seed(env_seed)
        if config_file:
            self.load_file(config_file)
        if seed is not None:
            self._set_seed(seed)
        for text in overrides:
            self.set(*parse_override(text))

        self.synth, self.train = self._build()
        self.validate(validate)

    @staticmethod
    def _defaults() -> Dict[str, Dict[str, Any]]:
        values = {}
        for name, cls in SECTIONS.items():
            section = asdict(cls())
            if name == "train":
                for nested in NESTED_IN_TRAIN:
                    section.pop(nested)
            values[name] = section
        for name, section in DESK_DEFAULTS.items():
            values[name].update(copy.deepcopy(section))
        return values

    def _set_seed(self, seed: int) -> None:
        self.set("synth", "seed", seed)
        self.set("train", "seed", seed)

    def _env_seed(self) -> Optional[int]:
        raw = os.environ.get(SEED_ENV_VAR)
        if raw is None or raw == "":
            return None
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}")

    def set(self, section: str, name: str, value: Any) -> None:
        """Set one ``section.field`` value, checking the key and type"""
        key = f"{section}.{name}"
        if section not in self.values:
            raise ConfigError(f"Unknown configuration section in {key}; expected one of {list(SECTIONS)}")
        if name not in self.values[section]:
            raise ConfigError(f"Unknown configuration key {key}; {section} accepts: "
                              f"{', '.join(self.config_keys()[section])}")
        if value is None and _field_default(SECTIONS[section], name) is None:
            self.values[section][name] = None
            return
        current = self.values[section][name]
        if current is None:
            current = 0.0
        self.values[section][name] = _coerce(key, current, value)

    def load_file(self, path: Union[str, Path]) -> None:
        """
        Merge a configuration file over the current values.

        Raises:
            ConfigError: if the file is missing, unparsable or has unknown keys
        """
        path = Path(path)
        try:
            text = path.read_text(encoding='utf-8')
        except OSError as e:
            raise ConfigError(f"Cannot read configuration file {path}: {e}") from e
        try:
            if path.suffix.lower() in (".yaml", ".yml"):
                data = yaml.safe_load(text) or {}
            else:
                data = json.loads(text)
        except (yaml.YAMLError, json.JSONDecodeError) as e:
            raise ConfigError(f"Cannot parse configuration file {path}: {e}") from e

        if not self._validate_config_data(data):
            raise ConfigError(f"Configuration file {path} must map section names to mappings")

        file_version = str(data.pop("version", self.VERSION))
        if file_version != self.VERSION:
            self.logger.info(f"Migrating configuration from v{file_version} to v{self.VERSION}")
            data = self._migrate_config(data, file_version)

        for section, entries in data.items():
            for name, value in entries.items():
                self.set(section, name, value)
        self.logger.info(f"Configuration loaded from {path}")

    def _validate_config_data(self, data: Any) -> bool:
        if not isinstance(data, dict):
            return False
        return all(key == "version" or isinstance(value, dict) for key, value in data.items())

    def _migrate_config(self, data: Dict[str, Any], from_version: str) -> Dict[str, Any]:
        # Only v1.0 exists so far; older files are taken as-is
        return data

    def _build(self) -> Tuple[SynthConfig, TrainConfig]:
        try:
            synth = SynthConfig(**self.values["synth"])
            train = TrainConfig(
                mda=MDAConfig(**self.values["mda"]),
                loss=LossConfig(**self.values["loss"]),
                model=ModelConfig(**self.values["model"]),
                **self.values["train"],
            )
        except TypeError as e:
            raise ConfigError(f"Invalid configuration: {e}") from e
        return synth, train

    def validate(self, sections: Iterable[str]) -> None:
        """
        Raises:
            ConfigError: naming the first invalid key
        """
        checks = {"synth": self.synth.validate, "mda": self.train.mda.validate, "train": self.train.validate}
        for section in sections:
            checks[section]()

    def get_config_dict(self) -> Dict[str, Any]:
        """Fully resolved configuration, JSON-ready"""
        config = {"version": self.VERSION, "synth": asdict(self.synth)}
        train = asdict(self.train)
        for nested in NESTED_IN_TRAIN:
            config[nested] = train.pop(nested)
        config["train"] = train
        return json.loads(json.dumps(config))

    def export_config(self, export_path: Union[str, Path]) -> bool:
        """
        Write the resolved configuration (YAML or JSON by extension).

        Returns:
            True if exported successfully, False otherwise
        """
        path = Path(export_path)
        try:
            data = self.get_config_dict()
            with open(path, 'w', encoding='utf-8') as f:
                if path.suffix.lower() in (".yaml", ".yml"):
                    yaml.safe_dump(data, f, sort_keys=True)
                else:
                    json.dump(data, f, indent=2, sort_keys=True)
            self.logger.info(f"Configuration exported to {path}")
            return True
        except Exception as e:
            self.logger.error(f"Failed to export configuration: {e}")
            return False

    @staticmethod
    def config_keys() -> Dict[str, Tuple[str, ...]]:
        """Every ``section.field`` accepted by ``--set``"""
        keys = {}
        for name, cls in SECTIONS.items():
            keys[name] = tuple(f.name for f in fields(cls) if f.name not in NESTED_IN_TRAIN)
        return keys
