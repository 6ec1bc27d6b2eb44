"""Control plane: length tracking, page tables, LRU eviction and user locks."""

from __future__ import annotations

import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np

from ..core import Request, SequenceState, pages_needed, tag_span
from ..schemas.kv_config import KVConfig
from . import kv_store
from .kv_store import DevicePagedStore, HostChunkedStore
from .lru import LruIndex

logger = logging.getLogger(__name__)


class CacheManagerError(RuntimeError):
    pass


class UserLockedError(CacheManagerError):
    pass


class LockStateError(CacheManagerError):
    pass


class BatchRejectedError(CacheManagerError):
    def __init__(self, message: str, *, demand: int = 0, available: int = 0) -> None:
        super().__init__(message)
        self.demand = demand
        self.available = available


@dataclass(frozen=True)
class OnloadPlan:
    user: int
    chunks: tuple[int, ...]
    dst_pages: tuple[int, ...]
    buffer_offset: int
    tokens: int


@dataclass
class RequestPlan:
    index: int
    request: Request
    prior_len: int
    prefix_len: int
    fresh_history: int
    device_served: int
    host_served: int
    scratch_pages: list[int]
    onload: OnloadPlan | None = None
    onload_tokens: int = 0
    append_offset: int = 0

    @property
    def user(self) -> int:
        return self.request.user

    @property
    def history_after(self) -> int:
        return self.prior_len + self.request.delta_len

    @property
    def fresh_tokens(self) -> int:
        return self.fresh_history + self.request.num_candidates

    @property
    def sequence_len(self) -> int:
        return self.history_after + self.request.num_candidates


@dataclass(frozen=True)
class EvictionRecord:
    user: int
    freed_pages: int
    device_len: int
    persisted_len: int
    tail_lost: int
    clock: int


@dataclass
class BatchMetadata:
    plans: list[RequestPlan]
    onload_plans: list[OnloadPlan]
    evictions: list[EvictionRecord]
    allocated_pages: int
    onload_overflow_tokens: int = 0
    history_offsets: list[int] = field(default_factory=list)
    history_lengths: list[int] = field(default_factory=list)

    @property
    def users(self) -> list[int]:
        return list(dict.fromkeys(plan.user for plan in self.plans))


@dataclass(frozen=True)
class StrippedRequest:
    user: int
    prefix_len: int
    fresh_history_len: int
    num_candidates: int
    fresh_tokens: tuple[int, ...] | None = None
    candidates: tuple[int, ...] | None = None

    @property
    def fresh_len(self) -> int:
        return self.fresh_history_len + self.num_candidates


def strip_cached_tokens(
    request: Request,
    prefix_len: int,
    prior_len: int,
    history_tokens: Sequence[int] | None = None,
) -> StrippedRequest:
    full_len = prior_len + request.delta_len
    if not 0 <= prefix_len <= full_len:
        raise CacheManagerError(
            f"P_pre={prefix_len} fuera de la historia disponible ({full_len} tokens)"
        )
    fresh_tokens = None
    if history_tokens is not None and request.new_tokens is not None:
        if len(history_tokens) != prior_len:
            raise CacheManagerError(
                f"la historia tiene {len(history_tokens)} tokens y se esperaban {prior_len}"
            )
        fresh_tokens = tuple(history_tokens[prefix_len:]) + tuple(
            request.new_tokens[max(0, prefix_len - prior_len) :]
        )
    return StrippedRequest(
        user=request.user,
        prefix_len=prefix_len,
        fresh_history_len=full_len - prefix_len,
        num_candidates=request.num_candidates,
        fresh_tokens=fresh_tokens,
        candidates=request.candidates,
    )


@dataclass
class _UserEntry:
    total_len: int = 0
    device_len: int = 0
    pages: list[int] = field(default_factory=list)
    last_page_len: int = 0
    last_access: int = 0
    pending_onload: OnloadPlan | None = None


class KVCacheManager:
    def __init__(
        self,
        config: KVConfig,
        store: DevicePagedStore,
        host: HostChunkedStore | None = None,
    ) -> None:
        self.config = config
        self.store = store
        self.host = host
        self.lru = LruIndex()
        self.locks: set[int] = set()
        self.clock = 0
        self.eviction_log: list[EvictionRecord] = []
        self.tail_tokens_lost = 0
        self.allocated_pages = 0
        self.uncached_requests = 0
        self.peak_occupancy = 0
        self._users: dict[int, _UserEntry] = {}
        self._scratch: set[int] = set()

    # -- queries -----------------------------------------------------------

    def persisted_len(self, user: int) -> int:
        return self.host.persisted_len(user) if self.host is not None else 0

    def is_resident(self, user: int) -> bool:
        return user in self.lru

    def device_len(self, user: int) -> int:
        entry = self._users.get(user)
        return entry.device_len if entry else 0

    def pages_of(self, user: int) -> list[int]:
        entry = self._users.get(user)
        return list(entry.pages) if entry else []

    def known_users(self) -> list[int]:
        return sorted(self._users)

    def state(self, user: int) -> SequenceState:
        entry = self._users.get(user)
        if entry is None:
            return SequenceState(persisted_len=self.persisted_len(user))
        return SequenceState(
            total_len=entry.total_len,
            device_len=entry.device_len,
            persisted_len=self.persisted_len(user),
            locked=user in self.locks,
            last_access=entry.last_access,
        )

    def get_total_cache_length(self, users: Iterable[int]) -> list[int]:
        lengths = []
        for user in users:
            persisted = self.persisted_len(user)
            if self.is_resident(user):
                lengths.append(max(self._users[user].device_len, persisted))
            else:
                lengths.append(persisted)
        return lengths

    def occupied_pages(self) -> int:
        return sum(len(entry.pages) for entry in self._users.values()) + len(self._scratch)

    def check_accounting(self, *, between_batches: bool = True) -> None:
        """Raise if page ownership is inconsistent.

        Between batches every resident page list also matches
        ``pages_needed(device_len)``; inside a batch pages run ahead of the
        appended length, so only ownership and the free count are checked.
        """
        owned = [page for entry in self._users.values() for page in entry.pages]
        owned.extend(self._scratch)
        if len(owned) != len(set(owned)):
            raise CacheManagerError("una página aparece en más de una lista")
        if len(owned) + self.store.free_count != self.config.device_pages:
            raise CacheManagerError(
                f"contabilidad de páginas rota: {len(owned)} ocupadas + "
                f"{self.store.free_count} libres != {self.config.device_pages}"
            )
        if not between_batches:
            return
        for user, entry in self._users.items():
            if self.is_resident(user) and entry.pending_onload is None:
                expected = pages_needed(entry.device_len, self.config.page_size)
                if len(entry.pages) != expected:
                    raise CacheManagerError(
                        f"usuario {user}: {len(entry.pages)} páginas para device_len={entry.device_len}"
                    )

    def page_table(self) -> dict[str, dict]:
        table = {}
        for user in sorted(self._users):
            entry = self._users[user]
            persisted = self.persisted_len(user)
            table[str(user)] = {
                "pages": list(entry.pages),
                "last_page_len": entry.last_page_len,
                "device_len": entry.device_len,
                "total_len": entry.total_len,
                "persisted_len": persisted,
                "chunks": list(range(persisted // self.config.chunk_size)),
                "resident": self.is_resident(user),
                "locked": user in self.locks,
            }
        return table

    # -- locks -------------------------------------------------------------

    def lock_user(self, user: int) -> None:
        if not self.is_resident(user):
            raise LockStateError(f"no se puede bloquear al usuario {user}: no está residente")
        if user in self.locks:
            raise LockStateError(f"el usuario {user} ya está bloqueado")
        self.locks.add(user)

    def unlock_user(self, user: int) -> None:
        if user not in self.locks:
            raise LockStateError(f"el usuario {user} no está bloqueado")
        self.locks.discard(user)

    # -- eviction ------------------------------------------------------------

    def evict_user(self, user: int) -> list[int]:
        if user in self.locks:
            raise UserLockedError(f"el usuario {user} está bloqueado por un offload en curso")
        if not self.is_resident(user):
            return []
        entry = self._users[user]
        freed = list(entry.pages)
        self.store.release(freed)
        persisted = self.persisted_len(user)
        tail = max(0, entry.device_len - persisted)
        record = EvictionRecord(
            user=user,
            freed_pages=len(freed),
            device_len=entry.device_len,
            persisted_len=persisted,
            tail_lost=tail,
            clock=self.clock,
        )
        self.eviction_log.append(record)
        self.tail_tokens_lost += tail
        entry.pages = []
        entry.device_len = 0
        entry.last_page_len = 0
        entry.pending_onload = None
        self.lru.remove(user)
        logger.debug("evicted user %s: %s pages, %s tail tokens lost", user, len(freed), tail)
        return freed

    def _allocate(self, count: int, protected: set[int], evictions: list[EvictionRecord]) -> list[int]:
        while self.store.free_count < count:
            victim = self.lru.select_victim(skip=self.locks | protected)
            if victim is None:
                raise BatchRejectedError(
                    f"no quedan víctimas desbloqueadas para liberar {count} páginas"
                )
            self.evict_user(victim)
            evictions.append(self.eviction_log[-1])
        pages = self.store.allocate(count)
        self.allocated_pages += count
        return pages

    # -- metadata ------------------------------------------------------------

    def _check_feasible(self, requests: Sequence[Request]) -> None:
        batch_users = {request.user for request in requests}
        planned_total: dict[int, int] = {}
        planned_pages: dict[int, int] = {}
        demand = 0
        for request in requests:
            user = request.user
            entry = self._users.get(user)
            total = planned_total.get(user, entry.total_len if entry else 0)
            if user in planned_pages:
                have = planned_pages[user]
            elif self.is_resident(user):
                have = len(entry.pages)
            else:
                have = 0
            after = total + request.delta_len
            history_pages = pages_needed(after, self.config.page_size)
            demand += max(0, history_pages - have)
            demand += pages_needed(request.num_candidates, self.config.page_size)
            planned_total[user] = after
            planned_pages[user] = max(have, history_pages)
        evictable = sum(
            len(self._users[user].pages)
            for user in self.lru.iter_lru()
            if user not in self.locks and user not in batch_users
        )
        available = self.store.free_count + evictable
        if demand > available:
            raise BatchRejectedError(
                f"el lote necesita {demand} páginas y solo hay {available} recuperables",
                demand=demand,
                available=available,
            )

    def prepare_metadata(self, requests: Sequence[Request]) -> BatchMetadata:
        self._check_feasible(requests)
        protected = {request.user for request in requests}
        page_size = self.config.page_size
        chunk_size = self.config.chunk_size
        planned_total: dict[int, int] = {}
        planned_device: dict[int, int] = {}
        plans: list[RequestPlan] = []
        onload_plans: list[OnloadPlan] = []
        evictions: list[EvictionRecord] = []
        allocated_before = self.allocated_pages
        buffer_used = 0
        overflow = 0

        for index, request in enumerate(requests):
            user = request.user
            entry = self._users.setdefault(user, _UserEntry())
            self.clock += 1
            entry.last_access = self.clock

            prior = planned_total.get(user, entry.total_len)
            after = prior + request.delta_len
            resident = self.is_resident(user)
            onload = None
            onload_tokens = 0
            if resident:
                prefix = planned_device.get(user, entry.device_len)
                grow = pages_needed(after, page_size) - len(entry.pages)
                if grow > 0:
                    entry.pages.extend(self._allocate(grow, protected, evictions))
                device_served, host_served = prefix, 0
            else:
                prefix = self.persisted_len(user)
                wanted = prefix // chunk_size
                fit = min(wanted, (self.config.onload_tokens - buffer_used) // chunk_size)
                overflow += (wanted - fit) * chunk_size
                prefix = fit * chunk_size
                entry.pages = self._allocate(pages_needed(after, page_size), protected, evictions)
                entry.device_len = 0
                entry.last_page_len = 0
                if fit:
                    ppc = self.config.pages_per_chunk
                    onload = OnloadPlan(
                        user=user,
                        chunks=tuple(range(fit)),
                        dst_pages=tuple(entry.pages[: fit * ppc]),
                        buffer_offset=buffer_used,
                        tokens=prefix,
                    )
                    onload_tokens = prefix
                    buffer_used += prefix
                    entry.pending_onload = onload
                    onload_plans.append(onload)
                device_served, host_served = 0, prefix
            scratch = self._allocate(
                pages_needed(request.num_candidates, page_size), protected, evictions
            )
            self._scratch.update(scratch)
            self.lru.touch(user)

            plans.append(
                RequestPlan(
                    index=index,
                    request=request,
                    prior_len=prior,
                    prefix_len=prefix,
                    fresh_history=after - prefix,
                    device_served=device_served,
                    host_served=host_served,
                    scratch_pages=scratch,
                    onload=onload,
                    onload_tokens=onload_tokens,
                )
            )
            planned_total[user] = after
            planned_device[user] = after

        self.peak_occupancy = max(self.peak_occupancy, self.occupied_pages())
        if overflow:
            logger.debug("onload buffer full: %s tokens will be recomputed", overflow)
        return BatchMetadata(
            plans=plans,
            onload_plans=onload_plans,
            evictions=evictions,
            allocated_pages=self.allocated_pages - allocated_before,
            onload_overflow_tokens=overflow,
        )

    def strip_cached_tokens(
        self,
        plan: RequestPlan,
        history_tokens: Sequence[int] | None = None,
    ) -> StrippedRequest:
        return strip_cached_tokens(plan.request, plan.prefix_len, plan.prior_len, history_tokens)

    def commit_onload(self, users: Iterable[int]) -> None:
        for user in users:
            entry = self._users.get(user)
            if entry is None or entry.pending_onload is None:
                continue
            plan = entry.pending_onload
            entry.device_len = plan.tokens
            entry.last_page_len = self._last_page_len(entry.device_len)
            entry.pending_onload = None

    def update_metadata(self, metadata: BatchMetadata) -> None:
        metadata.history_offsets = []
        metadata.history_lengths = []
        for plan in metadata.plans:
            plan.append_offset = plan.prefix_len
            metadata.history_offsets.append(plan.prefix_len)
            metadata.history_lengths.append(plan.fresh_history)

    # -- data plane hooks ----------------------------------------------------

    def append_kv(self, plan: RequestPlan, layer: int, span: np.ndarray) -> int:
        entry = self._users[plan.user]
        if entry.device_len != plan.append_offset:
            raise CacheManagerError(
                f"usuario {plan.user}: device_len={entry.device_len} y el plan escribe en "
                f"{plan.append_offset}"
            )
        return kv_store.append_kv(self.store, entry.pages, plan.append_offset, layer, span)

    def finish_append(self, plan: RequestPlan) -> None:
        entry = self._users[plan.user]
        entry.device_len = plan.append_offset + plan.fresh_history
        entry.total_len = plan.history_after
        entry.last_page_len = self._last_page_len(entry.device_len)

    def write_scratch(self, plan: RequestPlan, layer: int, span: np.ndarray) -> None:
        self.store.write(layer, plan.scratch_pages, 0, span)

    def release_scratch(self, plan: RequestPlan) -> None:
        self.store.release(plan.scratch_pages)
        self._scratch.difference_update(plan.scratch_pages)
        plan.scratch_pages = []

    def record_uncached(self, request: Request) -> int:
        """Register a request served without the cache; returns its prior history."""
        entry = self._users.setdefault(request.user, _UserEntry())
        self.clock += 1
        entry.last_access = self.clock
        prior = entry.total_len
        entry.total_len += request.delta_len
        self.uncached_requests += 1
        return prior

    def _last_page_len(self, device_len: int) -> int:
        if device_len == 0:
            return 0
        return device_len - (pages_needed(device_len, self.config.page_size) - 1) * self.config.page_size


def check_conservation(manager: KVCacheManager) -> list[str]:
    """List every tag mismatch between the tiers and the recorded lengths.

    Only meaningful with the tag backend: device pages of a resident user must
    hold positions ``[0, device_len)`` and host chunks ``[0, persisted_len)``.
    """
    config = manager.config
    violations: list[str] = []
    for user in manager.known_users():
        device_len = manager.device_len(user)
        pages = manager.pages_of(user)
        for layer in range(config.num_layers):
            if device_len and manager.is_resident(user):
                found = manager.store.read(layer, pages, 0, device_len)
                if not np.array_equal(found, tag_span(user, 0, device_len, layer)):
                    violations.append(f"usuario {user}, capa {layer}: páginas del dispositivo")
            if manager.host is None:
                continue
            for index in range(manager.host.chunk_count(user)):
                found = manager.host.read_layer(user, index, layer)
                start = index * config.chunk_size
                if not np.array_equal(found, tag_span(user, start, config.chunk_size, layer)):
                    violations.append(f"usuario {user}, capa {layer}: chunk {index} del host")
    return violations
