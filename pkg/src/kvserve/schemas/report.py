from __future__ import annotations

from pydantic import BaseModel, ConfigDict, Field

STEP_LABELS = (
    "Step 1-2. Prepare Metadata",
    "Step 3. Strip Tokens",
    "Step 4. Embedding",
    "Step 5. Data Layout",
    "Step 6. Await Metadata",
    "Step 7. Update Metadata",
    "Step 8. HSTU Inference",
    "Step 9. Offload KV",
    "Step 10. Postprocess",
)

WAIT_LABEL = "Wait Time"
COMP_LABEL = "Comp Time"


class RunReport(BaseModel):
    """Averages are per executed batch, in simulated milliseconds."""

    model_config = ConfigDict(extra="forbid")

    mode: str
    backend: str
    batch_size: int
    num_requests: int = 0
    num_batches: int = 0
    steps_ms: dict[str, float] = Field(default_factory=lambda: dict.fromkeys(STEP_LABELS, 0.0))
    wait_ms: float = 0.0
    comp_ms: float = 0.0
    avg_latency_ms: float = 0.0
    total_ms: float = 0.0
    gpu_hit_ratio: float = 1.0
    total_hit_ratio: float = 1.0
    history_tokens: int = 0
    device_served_tokens: int = 0
    host_served_tokens: int = 0
    tokens_processed: int = 0
    evictions: int = 0
    tail_tokens_lost: int = 0
    allocated_pages: int = 0
    peak_occupancy: int = 0
    offload_tasks: int = 0
    offload_rejections: int = 0
    onloaded_chunks: int = 0
    rejected_batches: int = 0
    uncached_requests: int = 0
    onload_overflow_tokens: int = 0
    speedup_vs_recompute: float | None = None
    speedup_vs_gpu_only: float | None = None
    chunk_size: int = 0
    device_pages: int = 0


class FootprintBreakdown(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    num_layers: int
    batch_size: int
    max_seq_len: int
    max_tokens: int
    device_pages: int
    onload_pages: int
    derived_onload_pages: int
    cache_bytes: int
    primary_cache_mib: int
    onload_buffer_mib: int
    cache_mib: int
    uvqk_layer_mib: int
    output_layer_mib: int
    workbench_layer_mib: int
    workbench_mib: int
    residual_mib: int
    total_mib: int
    total_gib: float
