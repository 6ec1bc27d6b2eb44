import pytest

from src.kvserve.schemas.cost_model import CostModel
from src.kvserve.schemas.experiment import ExperimentConfig
from src.kvserve.schemas.kv_config import KVConfig, ModelConfig


@pytest.fixture
def tiny_kv() -> KVConfig:
    return KVConfig(
        num_layers=2,
        num_heads=1,
        head_dim=2,
        page_size=4,
        chunk_size=8,
        device_pages=8,
        onload_pages=8,
        offload_quota=1024,
    )


@pytest.fixture
def tiny_experiment(tiny_kv) -> ExperimentConfig:
    return ExperimentConfig(kv=tiny_kv, model=ModelConfig(vocab_size=32), cost=CostModel())
