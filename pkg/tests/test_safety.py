"""Randomized interleavings of batches, onloads and offloads on the tag backend."""

import numpy as np
import pytest

from src.kvserve.core import Request
from src.kvserve.schemas.experiment import ExperimentConfig
from src.kvserve.schemas.kv_config import KVConfig, ModelConfig
from src.kvserve.services.cache_manager import check_conservation
from src.kvserve.services.simulator import Mode, TraceSimulator

SAFETY_KV = KVConfig(
    num_layers=2, num_heads=1, head_dim=1, page_size=4, chunk_size=8,
    device_pages=24, onload_pages=16, offload_quota=16,
)
STEPS = 2000
EPOCH = 120


def _random_batch(rng, step, clock):
    size = int(rng.integers(1, 4))
    batch = []
    for offset in range(size):
        user = int(rng.integers(0, 6)) + 6 * (step // EPOCH)
        batch.append(
            Request(
                timestamp=clock,
                user=user,
                delta_len=int(rng.integers(0, 5)),
                num_candidates=int(rng.integers(1, 4)),
                index=step * 3 + offset,
            )
        )
    return batch


def _check(simulator):
    manager, pipeline = simulator.manager, simulator.pipeline
    manager.check_accounting()
    assert check_conservation(manager) == []
    assert pipeline.quota.in_flight <= pipeline.quota.limit
    for user in manager.locks:
        assert manager.is_resident(user)
        assert pipeline.pending_chunks(user) > 0
    for user in manager.known_users():
        state = manager.state(user)
        assert state.persisted_len % SAFETY_KV.chunk_size == 0
        assert state.persisted_len <= state.total_len


@pytest.mark.parametrize("seed", range(5))
def test_random_interleavings_keep_the_tiers_consistent(seed):
    experiment = ExperimentConfig(kv=SAFETY_KV, model=ModelConfig(vocab_size=16))
    simulator = TraceSimulator(
        experiment, Mode.HIERARCHICAL, batch_size=3, backend="tag", record_events=True
    )
    manager, pipeline = simulator.manager, simulator.pipeline
    evict = manager.evict_user
    evicted = []

    def evict_without_transfers(user):
        before = len(pipeline.events)
        freed = evict(user)
        assert len(pipeline.events) == before
        evicted.append(user)
        return freed

    manager.evict_user = evict_without_transfers
    rng = np.random.default_rng(seed)
    clock = 0

    for step in range(STEPS):
        clock += int(rng.integers(0, 4))
        simulator.step(_random_batch(rng, step, clock))
        _check(simulator)

    report = simulator.finish()
    assert simulator.manager.locks == set()
    assert simulator.pipeline.quota.in_flight == 0
    assert simulator.pipeline.quota.peak <= SAFETY_KV.offload_quota
    assert report.num_requests > STEPS
    assert report.offload_tasks > 0
    assert evicted
    assert check_conservation(simulator.manager) == []
