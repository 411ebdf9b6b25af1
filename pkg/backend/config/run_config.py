# backend/config/run_config.py
"""
INI run and grid configuration.

A run config has one section per concern ([data], [encoder], [objective],
[training], [protonet], [probes], [mine], [tre], [synthetic], [output]).
Values are plain strings; pydantic coerces them into RunConfig.
"""
import configparser
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

from pydantic import ValidationError

from models.models import ExperimentGrid, RunConfig
from utils.errors import ConfigError

logger = logging.getLogger(__name__)

# section -> RunConfig field for sections that map onto a nested model
NESTED_SECTIONS = {
    "objective": "objective",
    "training": "training",
    "protonet": "protonet",
    "probes": "probes",
    "mine": "mine",
    "tre": "tre",
    "synthetic": "synthetic",
}
# sections whose keys are renamed onto top-level RunConfig fields
FLAT_SECTIONS = {
    "data": {"dataset": "dataset", "data_root": "data_root"},
    "encoder": {"family": "encoder", "width": "encoder_width"},
    "output": {"out_dir": "out_dir", "seed": "seed", "zfs_strict": "zfs_strict"},
}
SEEDED_SECTIONS = ("protonet", "probes", "mine", "tre")
LIST_KEYS = {"class_attribute_matrix"}


def _read(path: Union[str, Path]) -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    path = Path(path)
    try:
        found = parser.read(path, encoding="utf-8")
    except configparser.Error as e:
        raise ConfigError(f"Cannot parse {path}: {e}") from e
    if not found:
        raise ConfigError(f"Config file not found: {path}")
    return parser


def _section_values(parser: configparser.ConfigParser, section: str) -> Dict[str, Any]:
    values = {}
    for key, raw in parser.items(section):
        raw = raw.strip()
        if raw == "":
            continue
        if key in LIST_KEYS:
            values[key] = [[int(v) for v in row.split(",")] for row in raw.split(";")]
        else:
            values[key] = raw
    return values


def parse_run_config(parser: configparser.ConfigParser,
                     overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    data: Dict[str, Any] = {}
    known = set(NESTED_SECTIONS) | set(FLAT_SECTIONS)
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"Unknown config section [{section}]")
        values = _section_values(parser, section)
        if section in FLAT_SECTIONS:
            mapping = FLAT_SECTIONS[section]
            unknown = set(values) - set(mapping)
            if unknown:
                raise ConfigError(f"Unknown keys in [{section}]: {sorted(unknown)}")
            data.update({mapping[k]: v for k, v in values.items()})
        else:
            data[NESTED_SECTIONS[section]] = values

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "objective_label":
            objective = dict(data.get("objective", {}))
            objective.pop("match_prob", None)
            if value.startswith("cmdim_p"):
                objective.update(kind="cmdim", match_prob=value[len("cmdim_p"):])
            else:
                objective["kind"] = value
            data["objective"] = objective
        elif key == "local_loss":
            data.setdefault("objective", {})["local_loss"] = value
        else:
            data[key] = value

    # sub-seeds follow the run seed unless a section sets its own
    seed = data.get("seed", 0)
    for section in SEEDED_SECTIONS:
        block = data.setdefault(section, {})
        block.setdefault("seed", seed)

    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid run config: {e}") from e


def load_run_config(path: Optional[Union[str, Path]] = None,
                    overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Read an INI run config (or defaults when path is None) and apply CLI overrides."""
    parser = _read(path) if path is not None else configparser.ConfigParser()
    config = parse_run_config(parser, overrides)
    logger.debug(f"Loaded run config {config.run_name} from {path or 'defaults'}")
    return config


def load_grid(path: Union[str, Path]) -> ExperimentGrid:
    """Read the [grid] section: comma-separated axes."""
    parser = _read(path)
    if not parser.has_section("grid"):
        raise ConfigError(f"{path} has no [grid] section")
    axes = {
        key: [v.strip() for v in raw.split(",") if v.strip()]
        for key, raw in parser.items("grid")
    }
    try:
        return ExperimentGrid.model_validate(axes)
    except ValidationError as e:
        raise ConfigError(f"Invalid grid config: {e}") from e
