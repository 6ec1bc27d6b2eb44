import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from src.kvserve.core import Request, tag_span
from src.kvserve.schemas.cost_model import CostModel
from src.kvserve.schemas.kv_config import KVConfig
from src.kvserve.services.cache_manager import KVCacheManager, UserLockedError, check_conservation
from src.kvserve.services.kv_store import Backend, DevicePagedStore, HostCapacityError, HostChunkedStore
from src.kvserve.services.pipeline import (
    CompletionEvent,
    OffloadQuota,
    OffloadState,
    PipelineError,
    TransferPipeline,
    admit_offload,
)

# Whole seconds per chunk: fill 1 s, bus 4 s, scatter free.
STEPPED_COST = CostModel(
    host_bandwidth=32.0, bus_bandwidth=8.0, tx_setup=0.0, page_cost=0.0
)


def _config(**overrides):
    fields = dict(
        num_layers=2, num_heads=1, head_dim=1, page_size=4, chunk_size=8,
        device_pages=16, onload_pages=8, offload_quota=64,
    )
    fields.update(overrides)
    return KVConfig(**fields)


def _stack(config, cost=None):
    manager = KVCacheManager(
        config, DevicePagedStore(config, Backend.TAG), HostChunkedStore(config, Backend.TAG)
    )
    return manager, TransferPipeline(config, cost or CostModel(), manager, record_events=True)


def _serve(manager, user, delta):
    metadata = manager.prepare_metadata([Request(timestamp=0, user=user, delta_len=delta, num_candidates=1)])
    manager.commit_onload(metadata.users)
    manager.update_metadata(metadata)
    for plan in metadata.plans:
        for layer in range(manager.config.num_layers):
            manager.append_kv(plan, layer, tag_span(user, plan.prefix_len, plan.fresh_history, layer))
        manager.finish_append(plan)
        manager.release_scratch(plan)
    return metadata


def _persisted_and_evicted(manager, user, chunks):
    config = manager.config
    _serve(manager, user, chunks * config.chunk_size)
    payloads = [
        np.stack([tag_span(user, c * config.chunk_size, config.chunk_size, layer) for layer in range(config.num_layers)])
        for c in range(chunks)
    ]
    manager.host.write_chunks(user, 0, payloads)
    manager.evict_user(user)


def test_empty_onload_fires_every_layer_at_start():
    manager, pipeline = _stack(_config())

    handle = pipeline.submit_onload([], 5.0)

    assert [event.fire_time for event in handle.events] == [5.0, 5.0]
    assert pipeline.await_layer(handle, 1, 5.0) == 0.0
    assert pipeline.await_layer(handle, 0, 7.5) == 0.0


def test_single_chunk_onload_restores_the_prefix():
    manager, pipeline = _stack(_config())
    _persisted_and_evicted(manager, 3, 1)

    metadata = manager.prepare_metadata([Request(timestamp=1, user=3, delta_len=2, num_candidates=1)])
    handle = pipeline.submit_onload(metadata.onload_plans, 0.0)
    manager.commit_onload(metadata.users)

    assert handle.chunks == 1
    assert manager.device_len(3) == 8
    assert pipeline.await_layer(handle, 0, 0.0) > 0.0
    assert check_conservation(manager) == []


def test_four_chunks_ping_pong_through_two_buffers():
    config = _config(num_layers=1, onload_pages=8)
    manager, pipeline = _stack(config, STEPPED_COST)
    _persisted_and_evicted(manager, 1, 4)

    metadata = manager.prepare_metadata([Request(timestamp=1, user=1, delta_len=0, num_candidates=1)])
    handle = pipeline.submit_onload(metadata.onload_plans, 0.0)

    fills = [(e["time"], e["end"]) for e in pipeline.events if e["task"] == "fill"]
    transfers = [(e["time"], e["end"]) for e in pipeline.events if e["task"] == "transfer"]
    assert fills == [(0.0, 1.0), (1.0, 2.0), (5.0, 6.0), (9.0, 10.0)]
    assert transfers == [(1.0, 5.0), (5.0, 9.0), (9.0, 13.0), (13.0, 17.0)]
    assert handle.fire_time(0) == 17.0
    manager.commit_onload(metadata.users)
    assert check_conservation(manager) == []


def test_layer_events_fire_in_layer_order():
    manager, pipeline = _stack(_config(num_layers=4, device_pages=32, onload_pages=16))
    _persisted_and_evicted(manager, 1, 2)

    metadata = manager.prepare_metadata([Request(timestamp=1, user=1, delta_len=1, num_candidates=1)])
    handle = pipeline.submit_onload(metadata.onload_plans, 2.0)

    times = [event.fire_time for event in handle.events]
    assert times == sorted(times)
    assert times[0] > 2.0


def test_event_fires_once():
    event = CompletionEvent(1)
    event.fire(1.0)
    with pytest.raises(PipelineError):
        event.fire(2.0)


def test_gap_below_one_chunk_does_not_offload():
    manager, pipeline = _stack(_config())
    _serve(manager, 1, 7)

    assert pipeline.maybe_trigger_offload(1, 0.0) == []
    assert 1 not in manager.locks


def test_two_chunk_gap_offloads_two_chunks_and_locks_the_user():
    manager, pipeline = _stack(_config())
    _serve(manager, 1, 16)

    tasks = pipeline.maybe_trigger_offload(1, 0.0)

    assert [task.chunk_index for task in tasks] == [0, 1]
    assert pipeline.quota.in_flight == 16
    assert 1 in manager.locks
    with pytest.raises(UserLockedError):
        manager.evict_user(1)
    assert pipeline.maybe_trigger_offload(1, 0.0) == []

    finish = pipeline.drain()

    assert finish == tasks[-1].done_time
    assert 1 not in manager.locks
    assert pipeline.quota.in_flight == 0
    assert manager.persisted_len(1) == 16
    assert check_conservation(manager) == []


def test_quota_rejects_then_admits_after_completion():
    manager, pipeline = _stack(_config(offload_quota=8))
    _serve(manager, 1, 16)

    first = pipeline.maybe_trigger_offload(1, 0.0)

    assert len(first) == 1
    assert pipeline.offload_rejections == 1
    assert pipeline.advance(first[0].done_time) == 1
    assert 1 not in manager.locks

    second = pipeline.maybe_trigger_offload(1, first[0].done_time)

    assert [task.chunk_index for task in second] == [1]
    pipeline.drain()
    assert manager.persisted_len(1) == 16


def test_offload_task_states_follow_the_schedule():
    manager, pipeline = _stack(_config())
    _serve(manager, 1, 8)

    (task,) = pipeline.maybe_trigger_offload(1, 1.0)

    assert task.state_at(task.transfer_start) is OffloadState.TRANSFERRING
    assert task.state_at(task.persist_start) is OffloadState.PERSISTING
    assert task.state_at(task.done_time) is OffloadState.DONE
    assert task.gather_start >= 1.0


def test_admit_offload_near_the_limit():
    quota = OffloadQuota(16384)
    quota.in_flight = 15360
    assert not admit_offload(quota, 2048)
    assert quota.in_flight == 15360
    assert admit_offload(quota, 1024)
    assert quota.in_flight == 16384


@given(st.lists(st.tuples(st.booleans(), st.integers(min_value=1, max_value=4)), max_size=200))
def test_quota_never_exceeds_its_limit(operations):
    quota = OffloadQuota(limit=8)
    granted: list[int] = []
    for admit, tokens in operations:
        if admit:
            if admit_offload(quota, tokens):
                granted.append(tokens)
        elif granted:
            quota.release(granted.pop(0))
        assert quota.in_flight == sum(granted)
        assert quota.in_flight <= quota.limit
    assert quota.peak <= quota.limit


def test_failed_host_write_releases_quota_and_lock():
    manager, pipeline = _stack(_config(host_capacity=1))
    _serve(manager, 1, 16)
    pipeline.maybe_trigger_offload(1, 0.0)

    with pytest.raises(HostCapacityError):
        pipeline.drain()

    assert pipeline.pending == []
    assert pipeline.quota.in_flight == 0
    assert pipeline.pending_chunks(1) == 0
    assert 1 not in manager.locks
    assert manager.persisted_len(1) == 8


def test_eviction_after_persist_records_no_transfer():
    manager, pipeline = _stack(_config())
    _serve(manager, 1, 16)
    pipeline.maybe_trigger_offload(1, 0.0)
    pipeline.drain()
    before = list(pipeline.events)

    freed = manager.evict_user(1)

    assert len(freed) == 4
    assert pipeline.events == before
    assert pipeline.pending == []
    assert manager.persisted_len(1) == 16
