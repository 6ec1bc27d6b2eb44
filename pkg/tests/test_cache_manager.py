import numpy as np
import pytest

from src.kvserve.core import Request, tag_span
from src.kvserve.schemas.cost_model import CostModel
from src.kvserve.schemas.kv_config import KVConfig
from src.kvserve.services.cache_manager import (
    BatchRejectedError,
    CacheManagerError,
    KVCacheManager,
    LockStateError,
    UserLockedError,
    check_conservation,
    strip_cached_tokens,
)
from src.kvserve.services.kv_store import Backend, DevicePagedStore, HostChunkedStore
from src.kvserve.services.pipeline import TransferPipeline


def _config(**overrides):
    fields = dict(
        num_layers=2, num_heads=1, head_dim=1, page_size=4, chunk_size=8,
        device_pages=16, onload_pages=16, offload_quota=64,
    )
    fields.update(overrides)
    return KVConfig(**fields)


def _manager(config, *, host=True):
    store = DevicePagedStore(config, Backend.TAG)
    host_store = HostChunkedStore(config, Backend.TAG) if host else None
    return KVCacheManager(config, store, host_store)


def _request(user, delta, candidates=1, index=0):
    return Request(timestamp=index, user=user, delta_len=delta, num_candidates=candidates, index=index)


def _serve(manager, *requests):
    metadata = manager.prepare_metadata(list(requests))
    manager.commit_onload(metadata.users)
    manager.update_metadata(metadata)
    for plan in metadata.plans:
        for layer in range(manager.config.num_layers):
            manager.append_kv(plan, layer, tag_span(plan.user, plan.prefix_len, plan.fresh_history, layer))
        manager.finish_append(plan)
        manager.release_scratch(plan)
    return metadata


def _persist(manager, user, chunks):
    config = manager.config
    payloads = [
        np.stack([tag_span(user, c * config.chunk_size, config.chunk_size, layer) for layer in range(config.num_layers)])
        for c in range(manager.host.chunk_count(user), manager.host.chunk_count(user) + chunks)
    ]
    manager.host.write_chunks(user, manager.host.chunk_count(user), payloads)


def test_new_user_gets_one_page_and_no_onload():
    config = _config(page_size=32, chunk_size=64, device_pages=4, onload_pages=4)
    manager = _manager(config)

    metadata = _serve(manager, _request(1, 10))

    assert len(manager.pages_of(1)) == 1
    assert metadata.onload_plans == []
    assert metadata.plans[0].prefix_len == 0
    assert manager.state(1).device_len == 10
    manager.check_accounting()


def test_third_user_evicts_least_recent():
    manager = _manager(_config(device_pages=5), host=False)

    _serve(manager, _request(1, 8, index=0))
    _serve(manager, _request(2, 8, index=1))
    metadata = _serve(manager, _request(3, 8, index=2))

    assert [record.user for record in metadata.evictions] == [1]
    assert not manager.is_resident(1)
    assert manager.is_resident(2) and manager.is_resident(3)
    manager.check_accounting()


def test_locked_victim_is_skipped():
    manager = _manager(_config(device_pages=5), host=False)
    _serve(manager, _request(1, 8, index=0))
    _serve(manager, _request(2, 8, index=1))
    manager.lock_user(1)

    metadata = _serve(manager, _request(3, 8, index=2))

    assert [record.user for record in metadata.evictions] == [2]
    assert manager.is_resident(1)


def test_only_unlocked_users_are_evicted_under_pressure():
    manager = _manager(_config(device_pages=7), host=False)
    for index, user in enumerate((1, 2, 3)):
        _serve(manager, _request(user, 8, index=index))
    manager.lock_user(1)
    manager.lock_user(3)

    metadata = _serve(manager, _request(4, 4, index=3))

    assert [record.user for record in metadata.evictions] == [2]
    assert all(record.user not in manager.locks for record in manager.eviction_log)


def test_eviction_of_fully_persisted_user_keeps_prefix():
    manager = _manager(_config())
    _serve(manager, _request(1, 16))
    _persist(manager, 1, 2)

    freed = manager.evict_user(1)

    assert len(freed) == 4
    assert manager.get_total_cache_length([1]) == [16]
    assert manager.eviction_log[-1].tail_lost == 0


def test_eviction_loses_the_unpersisted_tail():
    manager = _manager(_config())
    _serve(manager, _request(1, 10))
    _persist(manager, 1, 1)
    assert manager.get_total_cache_length([1]) == [10]

    manager.evict_user(1)

    assert manager.get_total_cache_length([1]) == [8]
    assert manager.tail_tokens_lost == 2
    assert manager.state(1).device_len == 0
    assert manager.state(1).persisted_len == 8


def test_locked_user_cannot_be_evicted():
    manager = _manager(_config())
    _serve(manager, _request(1, 10))
    manager.lock_user(1)
    free_before = manager.store.free_count

    with pytest.raises(UserLockedError):
        manager.evict_user(1)

    assert manager.store.free_count == free_before
    manager.unlock_user(1)
    assert len(manager.evict_user(1)) == 3


def test_lock_protocol_errors():
    manager = _manager(_config())
    with pytest.raises(LockStateError):
        manager.lock_user(1)
    _serve(manager, _request(1, 4))
    manager.lock_user(1)
    with pytest.raises(LockStateError):
        manager.lock_user(1)
    manager.unlock_user(1)
    with pytest.raises(LockStateError):
        manager.unlock_user(1)


def test_total_cache_length_of_unknown_user_is_zero():
    manager = _manager(_config())
    assert manager.get_total_cache_length([42]) == [0]


@pytest.mark.parametrize(
    ("prior", "prefix", "delta", "expected"),
    [(100, 100, 10, 10), (100, 0, 10, 110), (5189, 5120, 10, 79)],
)
def test_strip_cached_tokens_lengths(prior, prefix, delta, expected):
    stripped = strip_cached_tokens(_request(1, delta, candidates=3), prefix, prior)

    assert stripped.fresh_history_len == expected
    assert stripped.fresh_len == expected + 3


def test_strip_cached_tokens_keeps_tail_and_delta_ids():
    request = Request(timestamp=0, user=1, delta_len=2, num_candidates=1, new_tokens=(8, 9), candidates=(5,))

    stripped = strip_cached_tokens(request, 3, 5, [1, 2, 3, 4, 5])

    assert stripped.fresh_tokens == (4, 5, 8, 9)
    assert stripped.candidates == (5,)
    with pytest.raises(CacheManagerError):
        strip_cached_tokens(request, 8, 5)


def test_commit_onload_restores_persisted_chunks():
    config = _config(num_layers=1, page_size=32, chunk_size=1024, device_pages=80, onload_pages=64, offload_quota=1024)
    manager = _manager(config)
    _serve(manager, _request(7, 2048))
    _persist(manager, 7, 2)
    manager.evict_user(7)
    pipeline = TransferPipeline(config, CostModel(), manager)

    metadata = manager.prepare_metadata([_request(7, 0)])
    assert metadata.plans[0].host_served == 2048
    pipeline.submit_onload(metadata.onload_plans, 0.0)
    manager.commit_onload([7])

    assert manager.device_len(7) == 2048
    assert len(manager.pages_of(7)) == 64
    assert check_conservation(manager) == []
    manager.commit_onload([7])
    assert manager.device_len(7) == 2048


def test_onload_plan_is_truncated_to_the_buffer():
    manager = _manager(_config(device_pages=32, onload_pages=2))
    for user in (1, 2):
        _serve(manager, _request(user, 8, index=user))
        _persist(manager, user, 1)
        manager.evict_user(user)

    metadata = manager.prepare_metadata([_request(1, 1, index=0), _request(2, 1, index=1)])

    assert [plan.prefix_len for plan in metadata.plans] == [8, 0]
    assert metadata.onload_overflow_tokens == 8
    assert len(metadata.onload_plans) == 1


def test_rejected_batch_leaves_state_untouched():
    manager = _manager(_config(device_pages=4))
    _serve(manager, _request(1, 4))
    free_before = manager.store.free_count

    with pytest.raises(BatchRejectedError) as excinfo:
        manager.prepare_metadata([_request(2, 12, index=1), _request(3, 8, index=2)])

    assert excinfo.value.demand > excinfo.value.available
    assert manager.store.free_count == free_before
    assert manager.known_users() == [1]
    assert manager.is_resident(1)


def test_same_user_twice_in_a_batch_is_sequential():
    manager = _manager(_config())

    metadata = _serve(manager, _request(1, 5, index=0), _request(1, 3, index=1))

    first, second = metadata.plans
    assert (first.prefix_len, first.fresh_history) == (0, 5)
    assert (second.prior_len, second.prefix_len, second.fresh_history) == (5, 5, 3)
    assert manager.device_len(1) == 8
    assert check_conservation(manager) == []


def test_uncached_request_leaves_a_gap_to_recompute():
    manager = _manager(_config())
    _serve(manager, _request(1, 6))

    assert manager.record_uncached(_request(1, 4)) == 6
    metadata = _serve(manager, _request(1, 2))

    plan = metadata.plans[0]
    assert (plan.prior_len, plan.prefix_len, plan.fresh_history) == (10, 6, 6)
    assert manager.state(1).total_len == 12
    assert manager.device_len(1) == 12


def test_page_table_dump():
    manager = _manager(_config())
    _serve(manager, _request(3, 10))
    _persist(manager, 3, 1)

    table = manager.page_table()

    assert table["3"]["pages"] == manager.pages_of(3)
    assert table["3"]["last_page_len"] == 2
    assert table["3"]["chunks"] == [0]
    assert table["3"]["resident"] is True
