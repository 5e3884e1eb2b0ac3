"""
Environment settings and the run configuration.

Environment (`ANGLEKIT_*`, also read from a local `.env`) holds per-machine
settings. A run config file holds `section.key=value` lines, parsed with
python-dotenv and validated into nested pydantic models; `--set` overrides are
applied on top.
"""
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from anglekit.classifier import ClassifierConfig
from anglekit.data_pipeline import SynthConfig
from anglekit.errors import ConfigError
from anglekit.localizer import LocalizerConfig
from anglekit.losses import LossConfig
from anglekit.training import OptimConfig, TrainConfig

load_dotenv()

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


class AngleKitSettings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="ANGLEKIT_", extra="ignore")

    cache: Path = Path.home() / ".cache" / "anglekit"
    log_level: str = "INFO"
    device: str = "cpu"


def configure_logging(level: Optional[str] = None) -> None:
    level = (level or AngleKitSettings().log_level).upper()
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)


class DataConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    manifest: Optional[Path] = None
    image_root: Optional[Path] = None
    split_ratio: float = Field(default=0.8, gt=0, lt=1)
    split_seed: int = 0
    mirror_right: bool = True


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    threshold: float = Field(default=0.5, ge=0, le=1)
    method_name: str = "anglekit"


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    data: DataConfig = DataConfig()
    synth: SynthConfig = SynthConfig()
    cls: ClassifierConfig = ClassifierConfig()
    loc: LocalizerConfig = LocalizerConfig()
    loss: LossConfig = LossConfig()
    optim: OptimConfig = OptimConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()


def nest_dotted(flat: Dict[str, str]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        parts = [p.strip() for p in key.split(".")]
        if any(not p for p in parts):
            raise ConfigError(f"Malformed config key: {key!r}")
        node = nested
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"Config key {key!r} conflicts with a scalar value")
            node = child
        if isinstance(node.get(parts[-1]), dict):
            raise ConfigError(f"Config key {key!r} conflicts with a section")
        node[parts[-1]] = value
    return nested


def flatten(data: Dict[str, Any], prefix: str = "") -> Dict[str, str]:
    """Inverse of nest_dotted for a JSON-mode dump; None values are left out."""
    out: Dict[str, str] = {}
    for key, value in data.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(flatten(value, f"{name}."))
        elif value is None:
            continue
        elif isinstance(value, (list, tuple)):
            out[name] = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            out[name] = "true" if value else "false"
        else:
            out[name] = str(value)
    return out


def parse_overrides(overrides: Sequence[str]) -> Dict[str, str]:
    out = {}
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"Override must look like key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def load_run_config(path: Optional[Path] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """
    Raises:
        ConfigError: missing file, key without a value, unknown key or invalid value
    """
    flat: Dict[str, str] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        for key, value in dotenv_values(path).items():
            if value is None:
                raise ConfigError(f"{path}: key {key!r} has no value")
            flat[key] = value
    flat.update(parse_overrides(overrides))
    try:
        return RunConfig.model_validate(nest_dotted(flat))
    except ValidationError as e:
        raise ConfigError(f"Invalid run config: {e}") from e


def update_config(cfg: RunConfig, values: Dict[str, Any]) -> RunConfig:
    """Apply dotted-key values (e.g. from CLI flags) on top of a validated config."""
    flat = flatten(cfg.model_dump(mode="json"))
    flat.update(flatten(nest_dotted(values)))
    try:
        return RunConfig.model_validate(nest_dotted(flat))
    except ValidationError as e:
        raise ConfigError(f"Invalid run config: {e}") from e


def dump_flat(cfg: RunConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in sorted(flatten(cfg.model_dump(mode="json")).items()))


def write_config_echo(cfg: RunConfig, run_dir: Path) -> Dict[str, Path]:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    txt, js = run_dir / "config.txt", run_dir / "config.json"
    txt.write_text(dump_flat(cfg), encoding="utf-8")
    js.write_text(json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True), encoding="utf-8")
    return {"config.txt": txt, "config.json": js}


def config_from_echo(data: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Checkpoint carries an invalid config: {e}") from e
