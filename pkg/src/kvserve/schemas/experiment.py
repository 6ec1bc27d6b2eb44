from __future__ import annotations

from pydantic import BaseModel, ConfigDict, Field

from .cost_model import CostModel
from .kv_config import KVConfig, ModelConfig


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kv: KVConfig = Field(default_factory=KVConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    cost: CostModel = Field(default_factory=CostModel)
