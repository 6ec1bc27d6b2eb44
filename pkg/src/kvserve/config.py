import logging
import os
from pathlib import Path

_TRUE_VALUES = {"1", "true", "yes", "on", "si", "sí"}
_FALSE_VALUES = {"0", "false", "no", "off", ""}


def _parse_int_setting(env_name: str, default_value: str, *, minimum: int) -> int:
    raw_value = str(os.getenv(env_name, default_value)).strip()
    try:
        parsed_value = int(raw_value)
    except ValueError as exc:
        raise ValueError(
            f"{env_name} debe ser un entero; valor recibido: {raw_value!r}"
        ) from exc
    if parsed_value < minimum:
        raise ValueError(
            f"{env_name} debe ser al menos {minimum}; valor recibido: {raw_value!r}"
        )
    return parsed_value


def _parse_optional_int_setting(env_name: str, *, minimum: int) -> int | None:
    if not str(os.getenv(env_name, "")).strip():
        return None
    return _parse_int_setting(env_name, "", minimum=minimum)


def _parse_float_setting(env_name: str, default_value: str) -> float:
    raw_value = str(os.getenv(env_name, default_value)).strip()
    try:
        value = float(raw_value.replace(",", "."))
    except ValueError as exc:
        raise ValueError(
            f"{env_name} debe ser un número decimal; valor recibido: {raw_value!r}"
        ) from exc
    if value <= 0:
        raise ValueError(f"{env_name} debe ser positivo; valor recibido: {raw_value!r}")
    return value


def _parse_bool_setting(env_name: str, default_value: str) -> bool:
    raw_value = str(os.getenv(env_name, default_value)).strip().lower()
    if raw_value in _TRUE_VALUES:
        return True
    if raw_value in _FALSE_VALUES:
        return False
    raise ValueError(
        f"{env_name} debe ser un booleano (1/0, true/false); valor recibido: {raw_value!r}"
    )


def _parse_log_level(env_name: str, default_value: str) -> str:
    raw_value = str(os.getenv(env_name, default_value)).strip() or default_value
    level = raw_value.upper()
    if level not in logging.getLevelNamesMapping():
        raise ValueError(
            f"{env_name} debe ser un nivel de logging; valor recibido: {raw_value!r}"
        )
    return level


PROJECT_ROOT = Path(os.getenv("PROJECT_ROOT", Path.cwd())).resolve()


def _resolve_path(env_name: str, default_relative: str) -> Path:
    raw = os.getenv(env_name, default_relative)
    path = Path(raw)
    if not path.is_absolute():
        path = PROJECT_ROOT / path
    return path


OUTPUT_DIR = _resolve_path("KVSIM_OUTPUT_DIR", "data/runs")
LOG_LEVEL = _parse_log_level("KVSIM_LOG_LEVEL", "WARNING")
DEFAULT_SEED = _parse_int_setting("KVSIM_SEED", "0", minimum=0)
VERIFY_TRIALS = _parse_int_setting("KVSIM_VERIFY_TRIALS", "100", minimum=0)
VERIFY_TOLERANCE = _parse_float_setting("KVSIM_VERIFY_TOLERANCE", "1e-5")
VERIFY_INJECT_FAULT = _parse_bool_setting("KVSIM_VERIFY_INJECT_FAULT", "0")
PRESET_REQUESTS = _parse_optional_int_setting("KVSIM_PRESET_REQUESTS", minimum=1)


def configure_logging(level: str | None = None) -> None:
    logging.basicConfig(
        level=level or LOG_LEVEL,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


if __name__ == "__main__":
    print("PROJECT_ROOT:", PROJECT_ROOT)
    print("KVSIM_OUTPUT_DIR:", OUTPUT_DIR)
    print("KVSIM_LOG_LEVEL:", LOG_LEVEL)
    print("KVSIM_SEED:", DEFAULT_SEED)
    print("KVSIM_VERIFY_TRIALS:", VERIFY_TRIALS)
    print("KVSIM_VERIFY_TOLERANCE:", VERIFY_TOLERANCE)
    print("KVSIM_VERIFY_INJECT_FAULT:", "ON" if VERIFY_INJECT_FAULT else "OFF")
    print("KVSIM_PRESET_REQUESTS:", PRESET_REQUESTS or "preset")
