import configparser
import json
import logging
from pathlib import Path
from typing import Dict, Any, Iterable, Optional

from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from diffpretrain.errors import ConfigError, MissingArtifactError
from diffpretrain.models.schemas import ExperimentConfig

logger = logging.getLogger(__name__)

SECTIONS = ("global", "synth", "bpr", "denoiser", "schedule", "pretrain", "extract", "probe", "ablate")


class Settings(BaseSettings):
    OUTPUT_ROOT: Optional[str] = None
    LOG_LEVEL: str = "INFO"
    NUM_THREADS: Optional[int] = None
    DETERMINISTIC: bool = True

    model_config = SettingsConfigDict(env_prefix="DIFFPRETRAIN_", env_file=".env", extra="ignore")


settings = Settings()


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _sections_to_experiment(sections: Dict[str, Dict[str, Any]]) -> ExperimentConfig:
    unknown = set(sections) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    data = {name: dict(values) for name, values in sections.items() if name not in ("denoiser", "schedule")}
    pretrain = data.setdefault("pretrain", {})
    if "denoiser" in sections:
        pretrain["denoiser"] = dict(sections["denoiser"])
    if "schedule" in sections:
        pretrain["schedule"] = dict(sections["schedule"])
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in exc.errors()
        )
        raise ConfigError(f"invalid experiment config: {problems}") from exc


def parse_overrides(overrides: Iterable[str]) -> Dict[str, Dict[str, Any]]:
    parsed: Dict[str, Dict[str, Any]] = {}
    for item in overrides:
        key, sep, raw = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not section or not name:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        parsed.setdefault(section, {})[name] = _parse_value(raw.strip())
    return parsed


def load_experiment_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    sections: Dict[str, Dict[str, Any]] = {}
    if path is not None:
        config_path = Path(path)
        if not config_path.is_file():
            raise MissingArtifactError(f"config file not found: {config_path}")
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read(config_path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {config_path}: {exc}") from exc
        for section in parser.sections():
            sections[section] = {key: _parse_value(raw) for key, raw in parser.items(section)}
    for section, values in parse_overrides(overrides).items():
        sections.setdefault(section, {}).update(values)
    config = _sections_to_experiment(sections)
    if settings.OUTPUT_ROOT and "output_dir" not in sections.get("global", {}):
        config.global_.output_dir = settings.OUTPUT_ROOT
    return config


def experiment_sections(config: ExperimentConfig) -> Dict[str, Dict[str, Any]]:
    dumped = config.model_dump(by_alias=True)
    pretrain = dumped["pretrain"]
    sections = {
        "global": dumped["global"],
        "synth": dumped["synth"],
        "bpr": dumped["bpr"],
        "denoiser": pretrain.pop("denoiser"),
        "schedule": pretrain.pop("schedule"),
        "pretrain": pretrain,
        "extract": dumped["extract"],
        "probe": dumped["probe"],
        "ablate": dumped["ablate"],
    }
    return sections


def write_config_snapshot(config: ExperimentConfig, out_dir: Path) -> Path:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, values in experiment_sections(config).items():
        parser[section] = {key: json.dumps(value) for key, value in values.items()}
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "resolved_config.ini"
    with open(path, "w", encoding="utf-8") as f:
        parser.write(f)
    logger.debug("wrote config snapshot %s", path)
    return path
