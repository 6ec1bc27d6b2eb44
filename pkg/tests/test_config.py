import importlib
import sys

import pytest


def _reload_config(monkeypatch, **env):
    for name in (
        "KVSIM_OUTPUT_DIR",
        "KVSIM_LOG_LEVEL",
        "KVSIM_SEED",
        "KVSIM_VERIFY_TRIALS",
        "KVSIM_VERIFY_TOLERANCE",
        "KVSIM_VERIFY_INJECT_FAULT",
        "KVSIM_PRESET_REQUESTS",
    ):
        monkeypatch.delenv(name, raising=False)
    for name, value in env.items():
        monkeypatch.setenv(name, value)

    for module_name in list(sys.modules):
        if module_name == "src" or module_name.startswith("src."):
            sys.modules.pop(module_name, None)

    return importlib.import_module("src.kvserve.config")


def test_defaults(tmp_path, monkeypatch):
    config = _reload_config(monkeypatch, PROJECT_ROOT=str(tmp_path))

    assert config.PROJECT_ROOT == tmp_path.resolve()
    assert config.OUTPUT_DIR == tmp_path.resolve() / "data" / "runs"
    assert config.LOG_LEVEL == "WARNING"
    assert config.DEFAULT_SEED == 0
    assert config.VERIFY_TRIALS == 100
    assert config.VERIFY_TOLERANCE == pytest.approx(1e-5)
    assert config.VERIFY_INJECT_FAULT is False
    assert config.PRESET_REQUESTS is None


def test_overrides_are_parsed(tmp_path, monkeypatch):
    config = _reload_config(
        monkeypatch,
        PROJECT_ROOT=str(tmp_path),
        KVSIM_OUTPUT_DIR="salidas",
        KVSIM_LOG_LEVEL="debug",
        KVSIM_SEED="7",
        KVSIM_VERIFY_TRIALS="0",
        KVSIM_VERIFY_TOLERANCE="1e-3",
        KVSIM_VERIFY_INJECT_FAULT="sí",
        KVSIM_PRESET_REQUESTS="500",
    )

    assert config.OUTPUT_DIR == tmp_path.resolve() / "salidas"
    assert config.LOG_LEVEL == "DEBUG"
    assert config.DEFAULT_SEED == 7
    assert config.VERIFY_TRIALS == 0
    assert config.VERIFY_TOLERANCE == pytest.approx(1e-3)
    assert config.VERIFY_INJECT_FAULT is True
    assert config.PRESET_REQUESTS == 500


@pytest.mark.parametrize(
    ("name", "value", "fragment"),
    [
        ("KVSIM_SEED", "abc", "debe ser un entero"),
        ("KVSIM_SEED", "-1", "al menos 0"),
        ("KVSIM_VERIFY_TOLERANCE", "0", "debe ser positivo"),
        ("KVSIM_VERIFY_INJECT_FAULT", "quizá", "booleano"),
        ("KVSIM_LOG_LEVEL", "ruidoso", "nivel de logging"),
        ("KVSIM_PRESET_REQUESTS", "0", "al menos 1"),
    ],
)
def test_invalid_values_name_the_setting(tmp_path, monkeypatch, name, value, fragment):
    with pytest.raises(ValueError) as excinfo:
        _reload_config(monkeypatch, PROJECT_ROOT=str(tmp_path), **{name: value})

    assert name in str(excinfo.value)
    assert fragment in str(excinfo.value)
    assert repr(value) in str(excinfo.value)
