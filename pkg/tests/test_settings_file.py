import pytest

from src.kvserve.schemas.experiment import ExperimentConfig
from src.kvserve.settings_file import (
    ConfigError,
    load_experiment_config,
    parse_settings_text,
    render_settings,
)


def test_missing_path_gives_defaults():
    config = load_experiment_config(None)

    assert config == ExperimentConfig()
    assert config.kv.num_layers == 8
    assert config.kv.num_heads == 4
    assert config.kv.head_dim == 128
    assert config.kv.page_size == 32
    assert config.kv.chunk_size == 1024
    assert config.kv.device_pages == 40960
    assert config.kv.onload_pages == 10008


def test_keys_are_split_by_section(tmp_path):
    path = tmp_path / "exp.conf"
    path.write_text(
        "# experimento pequeño\n"
        "num_layers = 4\n"
        "\n"
        "chunk_size=512   # medio chunk\n"
        "vocab_size = 64\n"
        "bus_bandwidth = 1e9\n",
        encoding="utf-8",
    )

    config = load_experiment_config(path)

    assert config.kv.num_layers == 4
    assert config.kv.chunk_size == 512
    assert config.model.vocab_size == 64
    assert config.cost.bus_bandwidth == 1e9
    assert config.kv.page_size == 32


@pytest.mark.parametrize(
    ("text", "fragment"),
    [
        ("num_layers\n", "exp.conf:1: se esperaba clave=valor"),
        ("page_size = 32\nmystery = 1\n", "exp.conf:2: clave desconocida 'mystery'"),
        ("page_size = 32\npage_size = 16\n", "exp.conf:2: clave 'page_size' repetida"),
        ("page_size =\n", "exp.conf:1: clave o valor vacío"),
        ("num_heads = 2\npage_size = 0\n", "exp.conf:2: page_size"),
        ("chunk_size = 48\n", "chunk_size debe ser un múltiplo de page_size"),
        ("offload_quota = 512\n", "offload_quota debe admitir al menos un chunk"),
    ],
)
def test_errors_name_file_and_line(text, fragment):
    with pytest.raises(ConfigError) as excinfo:
        parse_settings_text(text, source="exp.conf")

    assert fragment in str(excinfo.value)


def test_unreadable_file_is_a_config_error(tmp_path):
    missing = tmp_path / "nope.conf"

    with pytest.raises(ConfigError) as excinfo:
        load_experiment_config(missing)

    assert str(missing) in str(excinfo.value)


def test_rendered_settings_parse_back():
    config = ExperimentConfig().model_copy(
        update={"kv": ExperimentConfig().kv.with_overrides(num_layers=4, chunk_size=2048)}
    )

    assert parse_settings_text(render_settings(config)) == config
