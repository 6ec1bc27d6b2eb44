from __future__ import annotations

from pathlib import Path

from pydantic import ValidationError

from .schemas.cost_model import CostModel
from .schemas.experiment import ExperimentConfig
from .schemas.kv_config import KVConfig, ModelConfig

_SECTIONS: tuple[tuple[str, type], ...] = (
    ("kv", KVConfig),
    ("model", ModelConfig),
    ("cost", CostModel),
)


class ConfigError(ValueError):
    pass


def _section_for(key: str) -> str | None:
    for section, model in _SECTIONS:
        if key in model.model_fields:
            return section
    return None


def parse_settings_text(text: str, *, source: str = "<texto>") -> ExperimentConfig:
    values: dict[str, dict[str, str]] = {section: {} for section, _ in _SECTIONS}
    seen: dict[str, int] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: se esperaba clave=valor; línea: {raw_line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"{source}:{lineno}: clave o valor vacío; línea: {raw_line!r}")
        section = _section_for(key)
        if section is None:
            raise ConfigError(f"{source}:{lineno}: clave desconocida {key!r}")
        if key in seen:
            raise ConfigError(
                f"{source}:{lineno}: clave {key!r} repetida (ya definida en la línea {seen[key]})"
            )
        seen[key] = lineno
        values[section][key] = value

    built = {}
    for section, model in _SECTIONS:
        try:
            built[section] = model.model_validate(values[section])
        except ValidationError as exc:
            first = exc.errors()[0]
            location = ".".join(str(part) for part in first.get("loc", ())) or section
            lineno = seen.get(location)
            where = f"{source}:{lineno}" if lineno else source
            raise ConfigError(f"{where}: {location}: {first.get('msg')}") from exc
    return ExperimentConfig(**built)


def load_experiment_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"no se puede leer el fichero de configuración {path}: {exc.strerror}") from exc
    return parse_settings_text(text, source=str(path))


def render_settings(config: ExperimentConfig) -> str:
    lines = []
    for section, _ in _SECTIONS:
        lines.append(f"# {section}")
        for key, value in getattr(config, section).model_dump().items():
            lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
