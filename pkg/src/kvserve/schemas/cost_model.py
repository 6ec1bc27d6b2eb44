from __future__ import annotations

from typing import Any

from pydantic import BaseModel, ConfigDict, Field


class CostModel(BaseModel):
    """Simulated-time coefficients in seconds and bytes per second.

    The defaults are a calibration that puts the reference traces in the
    regime of the published latency tables; they are not measurements.
    ``layer_overhead`` is charged once per layer and batch, so it is the part
    of Step 8 that batching amortizes.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    bus_bandwidth: float = Field(default=25e9, gt=0)
    tx_setup: float = Field(default=10e-6, ge=0)
    host_bandwidth: float = Field(default=100e9, gt=0)
    page_cost: float = Field(default=0.5e-6, ge=0)
    attn_coeff: float = Field(default=5e-11, ge=0)
    linear_coeff: float = Field(default=2e-8, ge=0)
    layer_overhead: float = Field(default=1.0e-3, ge=0)
    prepare_overhead: float = Field(default=0.1e-3, ge=0)
    strip_overhead: float = Field(default=0.4e-3, ge=0)
    embed_overhead: float = Field(default=1.0e-3, ge=0)
    embed_coeff: float = Field(default=2e-7, ge=0)
    layout_overhead: float = Field(default=1.5e-3, ge=0)
    layout_coeff: float = Field(default=6e-8, ge=0)
    await_overhead: float = Field(default=0.1e-3, ge=0)
    update_overhead: float = Field(default=0.05e-3, ge=0)
    commit_coeff: float = Field(default=0.02e-3, ge=0)
    offload_submit: float = Field(default=0.03e-3, ge=0)
    postprocess_overhead: float = Field(default=0.5e-3, ge=0)

    def bus_time(self, num_bytes: int) -> float:
        return self.tx_setup + num_bytes / self.bus_bandwidth

    def host_copy_time(self, num_bytes: int) -> float:
        return num_bytes / self.host_bandwidth

    def pages_time(self, num_pages: int) -> float:
        return self.page_cost * num_pages

    def with_overrides(self, **fields: Any) -> CostModel:
        return CostModel.model_validate({**self.model_dump(), **fields})
