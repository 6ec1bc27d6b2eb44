import pytest

from src.kvserve.schemas.kv_config import KVConfig
from src.kvserve.services.footprint import FootprintError, footprint_lines, memory_footprint


def test_reference_deployment_footprint():
    breakdown = memory_footprint(KVConfig(), 8, 40008)

    assert breakdown.max_tokens == 320064
    assert breakdown.cache_mib == 25484
    assert breakdown.primary_cache_mib == 20480
    assert breakdown.uvqk_layer_mib == 1250
    assert breakdown.output_layer_mib == 625
    assert breakdown.workbench_layer_mib == 1875
    assert breakdown.workbench_mib == 15000
    assert breakdown.total_mib == 42671
    assert breakdown.total_gib == 41.67
    assert breakdown.derived_onload_pages == 10002


def test_cache_without_onload_buffer_and_residual():
    breakdown = memory_footprint(KVConfig(), 1, 1024, onload_pages=0, residual_mib=0)

    assert breakdown.cache_mib == 20480
    assert breakdown.onload_buffer_mib == 0
    assert breakdown.total_mib == breakdown.cache_mib + breakdown.workbench_mib


def test_workbench_scales_with_layers():
    small = memory_footprint(KVConfig(num_layers=2), 8, 40008)
    assert small.workbench_mib == 2 * 1875


@pytest.mark.parametrize(
    ("batch", "maxseq", "kwargs"),
    [(0, 10, {}), (1, 0, {}), (1, 10, {"residual_mib": -1}), (1, 10, {"onload_pages": -1})],
)
def test_invalid_dimensions(batch, maxseq, kwargs):
    with pytest.raises(FootprintError):
        memory_footprint(KVConfig(), batch, maxseq, **kwargs)


def test_console_rows_carry_the_totals():
    rows = dict(footprint_lines(memory_footprint(KVConfig(), 8, 40008)))

    assert rows["Peak Footprint"] == "42671 MiB (41.67 GiB)"
    assert rows["Paged KV Cache (cache_table)"] == "25484 MiB"
