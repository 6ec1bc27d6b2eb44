from __future__ import annotations

from decimal import ROUND_HALF_UP, Decimal

from ..core import pages_needed
from ..schemas.kv_config import KVConfig
from ..schemas.report import FootprintBreakdown

MIB = 1 << 20
DEFAULT_RESIDUAL_MIB = 2187


class FootprintError(ValueError):
    pass


def _to_mib(num_bytes: int) -> int:
    return int((Decimal(num_bytes) / MIB).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def memory_footprint(
    config: KVConfig,
    batch_size: int,
    max_seq_len: int,
    *,
    onload_pages: int | None = None,
    residual_mib: int = DEFAULT_RESIDUAL_MIB,
) -> FootprintBreakdown:
    """Static device memory plan: paged cache, per-layer workbench and a residual.

    Each component is rounded to the MiB (half up) before the totals are summed.
    """
    if batch_size < 1 or max_seq_len < 1:
        raise FootprintError(
            f"batch y maxseq deben ser positivos; recibido batch={batch_size}, maxseq={max_seq_len}"
        )
    if residual_mib < 0:
        raise FootprintError(f"el residual no puede ser negativo: {residual_mib}")
    if onload_pages is not None and onload_pages < 0:
        raise FootprintError(f"onload_pages no puede ser negativo: {onload_pages}")

    used_onload = config.onload_pages if onload_pages is None else onload_pages
    max_tokens = batch_size * max_seq_len
    width = config.hidden_width
    element = config.bytes_per_element
    page_bytes = config.token_bytes * config.page_size

    cache_bytes = (config.device_pages + used_onload) * page_bytes
    uvqk_layer = _to_mib(max_tokens * 4 * width * element)
    output_layer = _to_mib(max_tokens * 2 * width * element)
    workbench_layer = uvqk_layer + output_layer
    workbench = workbench_layer * config.num_layers
    cache_mib = _to_mib(cache_bytes)
    total = cache_mib + workbench + residual_mib
    return FootprintBreakdown(
        num_layers=config.num_layers,
        batch_size=batch_size,
        max_seq_len=max_seq_len,
        max_tokens=max_tokens,
        device_pages=config.device_pages,
        onload_pages=used_onload,
        derived_onload_pages=pages_needed(max_tokens, config.page_size),
        cache_bytes=cache_bytes,
        primary_cache_mib=_to_mib(config.device_pages * page_bytes),
        onload_buffer_mib=_to_mib(used_onload * page_bytes),
        cache_mib=cache_mib,
        uvqk_layer_mib=uvqk_layer,
        output_layer_mib=output_layer,
        workbench_layer_mib=workbench_layer,
        workbench_mib=workbench,
        residual_mib=residual_mib,
        total_mib=total,
        total_gib=round(total / 1024, 2),
    )


def footprint_lines(breakdown: FootprintBreakdown) -> list[tuple[str, str]]:
    """Labelled rows for the console rendering."""
    return [
        ("Paged KV Cache (cache_table)", f"{breakdown.cache_mib} MiB"),
        ("  Primary Cache", f"{breakdown.primary_cache_mib} MiB ({breakdown.device_pages} páginas)"),
        (
            "  Onload Buffer",
            f"{breakdown.onload_buffer_mib} MiB ({breakdown.onload_pages} páginas; "
            f"ceil(B*L_max/S_page) = {breakdown.derived_onload_pages})",
        ),
        ("Activation Workbench per layer", f"{breakdown.workbench_layer_mib} MiB"),
        ("  UVQK", f"{breakdown.uvqk_layer_mib} MiB"),
        ("  Attention Output", f"{breakdown.output_layer_mib} MiB"),
        ("Activation Workbench total", f"{breakdown.workbench_mib} MiB"),
        ("Weights and misc", f"{breakdown.residual_mib} MiB"),
        ("Peak Footprint", f"{breakdown.total_mib} MiB ({breakdown.total_gib:.2f} GiB)"),
    ]
