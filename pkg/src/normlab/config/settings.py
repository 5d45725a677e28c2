"""Experiment config files and runtime settings.

Config files are INI-style: `[run]`, `[data]`, `[model]` and `[optimizer]`
sections of `key = value` lines. Hidden layers are flat dotted keys in
`[model]` (`layer.0.out_features = 64`, `layer.0.norm = l1`,
`layer.0.norm.k = 10`). See docs/config.md for the full grammar.
"""

from __future__ import annotations

import configparser
import json
import logging
import os
import threading
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional

from pydantic import ValidationError

from normlab.errors import ConfigError
from normlab.schema.experiment import (
    DataConfig,
    ExperimentConfig,
    LayerSpec,
    ModelSpec,
    NormScheme,
    OptimizerConfig,
)
from normlab.utils.constants import DEFAULT_SEED, MC_DEFAULT_TRIALS
from normlab.utils.fileio import write_file_atomic

logger = logging.getLogger(__name__)

SEED_ENV = "NORMLAB_SEED"
SETTINGS_FILE = ".normlab.json"

SECTIONS = ("run", "data", "model", "optimizer")
RUN_KEYS = ("seed", "epochs", "batch_size", "precision", "mc_trials")
_MODEL_KEYS = tuple(k for k in ModelSpec.model_fields if k != "layers")
_LAYER_KEYS = tuple(k for k in LayerSpec.model_fields if k != "norm")
_NORM_KEYS = tuple(NormScheme.model_fields)


def _value(raw: str) -> Optional[str]:
    raw = raw.strip()
    return raw or None


def _shape(raw: str, key: str) -> tuple:
    try:
        return tuple(int(part) for part in raw.split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"[model] {key}: expected comma-separated integers, got '{raw}'") from None


def _schedule(raw: str) -> List[Dict[str, str]]:
    """`step:multiplier` pairs separated by commas."""
    events = []
    for item in raw.split(","):
        item = item.strip()
        if not item:
            continue
        step, sep, multiplier = item.partition(":")
        if not sep:
            raise ConfigError(f"[optimizer] schedule: expected 'step:multiplier', got '{item}'")
        events.append({"step": step.strip(), "multiplier": multiplier.strip()})
    return events


def _layers(entries: Mapping[str, str]) -> List[Dict]:
    layers: Dict[int, Dict] = {}
    for key, raw in entries.items():
        parts = key.split(".")
        if len(parts) < 3 or not parts[1].isdigit():
            raise ConfigError(f"[model] {key}: layer keys look like 'layer.<index>.<field>'")
        index = int(parts[1])
        layer = layers.setdefault(index, {})
        field = parts[2]
        if field == "norm" and len(parts) == 3:
            layer.setdefault("norm", {})["metric"] = raw
        elif field == "norm" and len(parts) == 4 and parts[3] in _NORM_KEYS:
            layer.setdefault("norm", {})[parts[3]] = raw
        elif len(parts) == 3 and field in _LAYER_KEYS:
            layer[field] = raw
        else:
            raise ConfigError(f"[model] unknown key '{key}'")

    missing = sorted(set(range(len(layers))) - set(layers))
    if missing or (layers and max(layers) != len(layers) - 1):
        raise ConfigError(f"[model] layer indices must run 0..{len(layers) - 1} without gaps")
    for index, layer in layers.items():
        if "norm" in layer and "metric" not in layer["norm"]:
            raise ConfigError(f"[model] layer.{index}.norm options given without 'layer.{index}.norm = <metric>'")
    return [layers[i] for i in range(len(layers))]


def _section(parser: configparser.ConfigParser, name: str) -> Dict[str, str]:
    if not parser.has_section(name):
        return {}
    return {key: value for key, value in parser.items(name) if _value(value) is not None}


def _check_keys(section: str, keys, allowed) -> None:
    for key in keys:
        if key not in allowed:
            raise ConfigError(f"[{section}] unknown key '{key}'")


def _format_validation(e: ValidationError) -> str:
    problems = []
    for err in e.errors():
        where = ".".join(str(part) for part in err["loc"])
        problems.append(f"{where}: {err['msg']}")
    return "; ".join(problems)


def parse_experiment_config(text: str, env: Optional[Mapping[str, str]] = None, base_dir: Optional[Path] = None) -> ExperimentConfig:
    """
    Parse config text into an ExperimentConfig.

    Args:
        text: INI-style config text
        env: Environment to read NORMLAB_SEED from (os.environ when None)
        base_dir: Directory that relative data/trajectory paths are resolved against

    Returns:
        Validated ExperimentConfig

    Raises:
        ConfigError: syntax errors, unknown sections or keys, invalid values
    """
    parser = configparser.ConfigParser(
        interpolation=None,
        inline_comment_prefixes=("#", ";"),
        empty_lines_in_values=False,
        default_section="__none__",
    )
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"config syntax error: {e}") from None

    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}] (expected one of: {', '.join(SECTIONS)})")

    run = _section(parser, "run")
    data = _section(parser, "data")
    model = _section(parser, "model")
    optimizer = _section(parser, "optimizer")
    _check_keys("run", run, RUN_KEYS)
    _check_keys("data", data, DataConfig.model_fields)
    _check_keys("optimizer", optimizer, OptimizerConfig.model_fields)
    layer_entries = {k: v for k, v in model.items() if k.startswith("layer.")}
    model = {k: v for k, v in model.items() if not k.startswith("layer.")}
    _check_keys("model", model, _MODEL_KEYS)

    if "input_shape" in model:
        model["input_shape"] = _shape(model["input_shape"], "input_shape")
    model["layers"] = _layers(layer_entries)
    if "schedule" in optimizer:
        optimizer["schedule"] = _schedule(optimizer["schedule"])

    if base_dir is not None:
        for section, key in ((data, "path"), (data, "labels_path"), (optimizer, "trajectory")):
            if key in section and not Path(section[key]).expanduser().is_absolute():
                section[key] = str(base_dir / section[key])

    env = os.environ if env is None else env
    seed = env.get(SEED_ENV)
    if seed is not None and seed.strip():
        if not seed.strip().isdigit():
            raise ConfigError(f"{SEED_ENV} must be a non-negative integer, got '{seed}'")
        logger.info(f"{SEED_ENV}={seed.strip()} overrides the config seed")
        run["seed"] = seed.strip()

    try:
        return ExperimentConfig(model=model, data=data, optimizer=optimizer, **run)
    except ValidationError as e:
        raise ConfigError(f"invalid config: {_format_validation(e)}") from None


def load_experiment_config(path: Path, env: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
    """
    Read and validate an experiment config file.

    Relative paths inside the file are resolved against the file's directory.

    Raises:
        ConfigError: the file is missing or invalid
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    logger.debug(f"Loading config from {path}")
    return parse_experiment_config(text, env=env, base_dir=path.resolve().parent)


def _ini_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_experiment_config(config: ExperimentConfig) -> str:
    """Config text that parses back to `config` (seed override aside)."""
    lines = ["[run]"]
    for key in RUN_KEYS:
        lines.append(f"{key} = {_ini_value(getattr(config, key))}")

    lines += ["", "[data]"]
    for key, value in config.data.model_dump().items():
        if value is not None:
            lines.append(f"{key} = {_ini_value(value)}")

    lines += ["", "[model]"]
    spec = config.model
    for key in _MODEL_KEYS:
        value = getattr(spec, key)
        if key == "input_shape":
            if value is not None:
                lines.append(f"input_shape = {', '.join(str(v) for v in value)}")
        else:
            lines.append(f"{key} = {_ini_value(value)}")
    for index, layer in enumerate(spec.layers):
        for key in _LAYER_KEYS:
            lines.append(f"layer.{index}.{key} = {_ini_value(getattr(layer, key))}")
        if layer.norm is not None:
            lines.append(f"layer.{index}.norm = {layer.norm.metric}")
            for key, value in layer.norm.model_dump().items():
                if key != "metric" and value is not None:
                    lines.append(f"layer.{index}.norm.{key} = {_ini_value(value)}")

    lines += ["", "[optimizer]"]
    opt = config.optimizer
    for key, value in opt.model_dump().items():
        if key == "schedule":
            if value:
                lines.append("schedule = " + ", ".join(f"{e['step']}:{e['multiplier']!r}" for e in value))
        elif value is not None:
            lines.append(f"{key} = {_ini_value(value)}")
    return "\n".join(lines) + "\n"


def write_experiment_config(config: ExperimentConfig, path: Path) -> Path:
    path = Path(path)
    write_file_atomic(path, render_experiment_config(config))
    return path


@dataclass
class Settings:
    """Runtime settings that are not part of an experiment config."""

    log_level: str = "INFO"
    log_file: Optional[str] = None
    mc_trials: int = MC_DEFAULT_TRIALS
    mc_seed: int = DEFAULT_SEED
    workers: int = 1

    def __post_init__(self) -> None:
        """Initialize thread lock for thread-safe operations"""
        self._lock = threading.RLock()

    @classmethod
    def load(cls, path: Optional[Path] = None) -> "Settings":
        """Load settings from a JSON file (./.normlab.json by default); missing file means defaults."""
        path = Path(path) if path is not None else Path.cwd() / SETTINGS_FILE
        data: Dict = {}
        try:
            if path.exists():
                data = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            logger.warning(f"Ignoring unreadable settings file {path}: {e}")
            data = {}

        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        for key in sorted(set(data) - set(known)):
            logger.warning(f"Ignoring unknown setting '{key}' in {path}")
        settings = cls(**known)
        if settings.workers < 1:
            logger.warning(f"workers={settings.workers} is not positive; using 1")
            settings.workers = 1
        return settings

    def save(self, path: Optional[Path] = None) -> Path:
        """Save settings as JSON (thread-safe)"""
        path = Path(path) if path is not None else Path.cwd() / SETTINGS_FILE
        with self._lock:
            write_file_atomic(path, json.dumps(asdict(self), indent=2))
        return path


__all__ = [
    "SEED_ENV",
    "SETTINGS_FILE",
    "SECTIONS",
    "parse_experiment_config",
    "load_experiment_config",
    "render_experiment_config",
    "write_experiment_config",
    "Settings",
]
