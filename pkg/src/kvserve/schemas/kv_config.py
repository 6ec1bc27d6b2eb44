from __future__ import annotations

from typing import Any

from pydantic import BaseModel, ConfigDict, Field, model_validator


class KVConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    num_layers: int = Field(default=8, ge=1, le=127)
    num_heads: int = Field(default=4, ge=1)
    head_dim: int = Field(default=128, ge=1)
    page_size: int = Field(default=32, ge=1)
    chunk_size: int = Field(default=1024, ge=1)
    device_pages: int = Field(default=40960, ge=1)
    onload_pages: int = Field(default=10008, ge=0)
    bytes_per_element: int = Field(default=2, ge=1)
    offload_quota: int = Field(default=16384, ge=1)
    host_capacity: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_geometry(self) -> KVConfig:
        if self.chunk_size < self.page_size or self.chunk_size % self.page_size:
            raise ValueError(
                "chunk_size debe ser un múltiplo de page_size; "
                f"recibido chunk_size={self.chunk_size}, page_size={self.page_size}"
            )
        if self.offload_quota < self.chunk_size:
            raise ValueError(
                "offload_quota debe admitir al menos un chunk; "
                f"recibido offload_quota={self.offload_quota}, chunk_size={self.chunk_size}"
            )
        return self

    @property
    def pages_per_chunk(self) -> int:
        return self.chunk_size // self.page_size

    @property
    def hidden_width(self) -> int:
        return self.num_heads * self.head_dim

    @property
    def onload_tokens(self) -> int:
        return self.onload_pages * self.page_size

    @property
    def chunk_layer_bytes(self) -> int:
        return self.chunk_size * 2 * self.hidden_width * self.bytes_per_element

    @property
    def token_bytes(self) -> int:
        return self.num_layers * 2 * self.hidden_width * self.bytes_per_element

    def with_overrides(self, **fields: Any) -> KVConfig:
        return KVConfig.model_validate({**self.model_dump(), **fields})


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    vocab_size: int = Field(default=1000, ge=2)
    model_seed: int = Field(default=0, ge=0)
