"""Helper utilities to load run configuration objects from JSON or dotted text profiles.

Two file formats describe the same :class:`RunConfig`:

* JSON (``*.json``): ``{"section": {"key": value, ...}, ...}``
* dotted text (any other suffix): one ``section.key = value`` per line, ``#``
  starts a comment. Values are JSON literals; bare words are read as strings.

The effective configuration is always echoed back in the dotted form, which is
also what the config hash is computed over.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

from Metrics.evaluation import EvalConfig
from Phantom.dataset import DatasetConfig
from Phantom.projector import ProjectionGeometry
from Phantom.volume import PhantomParams
from Sampling.samplers import SamplerConfig
from SDE.ve_sde import SigmaSchedule
from ScoreNet.model import ScoreModelConfig
from Training.trainer import TrainConfig

logger = logging.getLogger(__name__)

EFFECTIVE_CONFIG_NAME = "effective_config.cfg"

# Model fields fixed by the method wiring or by the schedule section.
_DERIVED_MODEL_FIELDS = ("conditional", "noise_conditioned", "input_channels", "sigma_min", "sigma_max")


class ConfigError(ValueError):
    """Raised for unknown keys, malformed lines or invalid values in a run profile."""


@dataclass
class RunSettings:
    seed: int = 0
    out_dir: str = "runs/desk"


@dataclass
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    schedule: SigmaSchedule = field(default_factory=SigmaSchedule)
    phantom: PhantomParams = field(default_factory=PhantomParams)
    geometry: ProjectionGeometry = field(default_factory=ProjectionGeometry)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ScoreModelConfig = field(default_factory=ScoreModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def out_dir(self) -> Path:
        return Path(self.run.out_dir)

    @property
    def dataset_dir(self) -> Path:
        return Path(self.dataset.directory)

    def model_config(self, method: str) -> ScoreModelConfig:
        """Architecture from the ``model`` section, wired for ``method``."""
        overrides = {k: v for k, v in asdict(self.model).items() if k not in _DERIVED_MODEL_FIELDS}
        return ScoreModelConfig.for_method(
            method,
            sigma_min=self.schedule.sigma_min,
            sigma_max=self.schedule.sigma_max,
            **overrides,
        )

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with ``seed`` pushed into every stochastic section."""
        return replace(
            self,
            run=replace(self.run, seed=seed),
            phantom=replace(self.phantom, seed=seed),
            dataset=replace(self.dataset, split_seed=seed),
            model=replace(self.model, init_seed=seed),
            train=replace(self.train, seed=seed),
            sampler=replace(self.sampler, seed=seed),
        )

    def validate(self) -> None:
        try:
            self.phantom.validate()
            self.geometry.validate()
            self.dataset.validate()
            self.train.validate()
            self.sampler.validate()
            self.eval.validate()
            self.model_config("csm")
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.model.resolution_levels[0] != self.geometry.detector_h or (
            self.geometry.detector_h != self.geometry.detector_w
        ):
            raise ConfigError(
                f"model.resolution_levels[0]={self.model.resolution_levels[0]} must equal the square "
                f"detector size ({self.geometry.detector_h}x{self.geometry.detector_w})"
            )


SECTIONS: Tuple[str, ...] = tuple(f.name for f in fields(RunConfig))


def _section_keys(config: RunConfig, section: str) -> List[str]:
    keys = [f.name for f in fields(getattr(config, section))]
    if section == "model":
        keys = [k for k in keys if k not in _DERIVED_MODEL_FIELDS]
    return keys


# Parsing ---------------------------------------------------------------
def _parse_value(raw: str) -> Any:
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _coerce(key: str, value: Any, default: Any) -> Any:
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or float(value) != int(value):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, (tuple, list)):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return tuple(value) if isinstance(default, tuple) else list(value)
    return value


def parse_dotted(text: str, source: str = "<text>") -> Dict[str, Any]:
    """``section.key = value`` lines to a ``{dotted_key: value}`` mapping."""
    values: Dict[str, Any] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{line_no}: expected 'section.key = value', got {line.strip()!r}")
        key, raw = stripped.split("=", 1)
        values[key.strip()] = _parse_value(raw)
    return values


def _flatten_json(data: Dict[str, Any], source: str) -> Dict[str, Any]:
    values: Dict[str, Any] = {}
    for section, body in data.items():
        if not isinstance(body, dict):
            raise ConfigError(f"{source}: section '{section}' must be an object")
        for key, value in body.items():
            values[f"{section}.{key}"] = value
    return values


def parse_overrides(items: Iterable[str]) -> Dict[str, Any]:
    """``--set section.key=value`` items."""
    values: Dict[str, Any] = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, raw = item.split("=", 1)
        values[key.strip()] = _parse_value(raw)
    return values


def apply_values(config: RunConfig, values: Dict[str, Any]) -> RunConfig:
    """New config with dotted ``values`` applied on top of ``config``."""
    updates: Dict[str, Dict[str, Any]] = {}
    for dotted, value in values.items():
        section, _, key = dotted.partition(".")
        if section not in SECTIONS or not key:
            raise ConfigError(f"Unknown config key '{dotted}' (sections: {', '.join(SECTIONS)})")
        if key not in _section_keys(config, section):
            if section == "model" and key in _DERIVED_MODEL_FIELDS:
                raise ConfigError(f"'{dotted}' is derived from the method or the schedule section")
            raise ConfigError(f"Unknown config key '{dotted}'")
        default = getattr(getattr(config, section), key)
        updates.setdefault(section, {})[key] = _coerce(dotted, value, default)

    replaced: Dict[str, Any] = {}
    for section, changes in updates.items():
        try:
            replaced[section] = replace(getattr(config, section), **changes)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"Invalid values for section '{section}': {exc}") from exc
    return replace(config, **replaced)


def load_run_config(
    config_path: Optional[Path] = None,
    *,
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
    out_dir: Optional[Path] = None,
) -> RunConfig:
    """Defaults, then the profile file, then ``--seed``/``--out``, then ``--set`` items."""
    config = RunConfig()
    if config_path is not None:
        config_path = Path(config_path)
        if not config_path.exists():
            raise ConfigError(f"Config file '{config_path}' does not exist")
        text = config_path.read_text(encoding="utf-8")
        if config_path.suffix.lower() == ".json":
            try:
                data = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{config_path}: invalid JSON ({exc})") from exc
            values = _flatten_json(data, str(config_path))
        else:
            values = parse_dotted(text, str(config_path))
        config = apply_values(config, values)

    if seed is not None:
        config = config.with_seed(int(seed))
    if out_dir is not None:
        config = replace(config, run=replace(config.run, out_dir=str(out_dir)))
    config = apply_values(config, parse_overrides(overrides))
    config.validate()
    return config


# Dumping ---------------------------------------------------------------
def flatten_config(config: RunConfig) -> Dict[str, Any]:
    values: Dict[str, Any] = {}
    for section in SECTIONS:
        body = getattr(config, section)
        for key in _section_keys(config, section):
            values[f"{section}.{key}"] = getattr(body, key)
    return values


def dump_config(config: RunConfig) -> str:
    """Canonical dotted text; reloading it reproduces ``config``."""
    lines = [f"{key} = {json.dumps(value)}" for key, value in flatten_config(config).items()]
    return "\n".join(lines) + "\n"


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(dump_config(config).encode("utf-8")).hexdigest()


def write_effective_config(config: RunConfig, out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / EFFECTIVE_CONFIG_NAME
    path.write_text(dump_config(config), encoding="utf-8")
    logger.debug("Effective config written to %s", path)
    return path
