"""Discrete-event transfer fabric: lanes, per-layer onload events and offload tasks.

Lanes are serial resources over simulated seconds. Cross-lane ordering only
exists through ``CompletionEvent`` fire times. Data movement itself happens
eagerly when a task is scheduled; the schedule decides when it counts as done.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import StrEnum

import numpy as np

from ..schemas.cost_model import CostModel
from ..schemas.kv_config import KVConfig
from .cache_manager import KVCacheManager, OnloadPlan
from .kv_store import BufferState, OnloadBuffer, PinnedBufferPair

logger = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


class LaneName(StrEnum):
    COMPUTE = "compute"
    ONLOAD = "onload"
    SCATTER = "scatter"
    OFFLOAD = "offload"


@dataclass
class Lane:
    name: LaneName
    busy_until: float = 0.0

    def run(self, ready: float, duration: float) -> tuple[float, float]:
        start = max(ready, self.busy_until)
        self.busy_until = start + duration
        return start, self.busy_until


@dataclass
class CompletionEvent:
    id: int
    fire_time: float | None = None

    @property
    def fired(self) -> bool:
        return self.fire_time is not None

    def fire(self, time: float) -> None:
        if self.fired:
            raise PipelineError(f"el evento {self.id} ya se disparó")
        self.fire_time = time


@dataclass
class OnloadHandle:
    events: list[CompletionEvent]
    chunks: int = 0

    def fire_time(self, layer: int) -> float:
        return self.events[layer].fire_time


class OffloadState(StrEnum):
    PENDING = "pending"
    GATHERING = "gathering"
    TRANSFERRING = "transferring"
    PERSISTING = "persisting"
    DONE = "done"


@dataclass
class OffloadTask:
    id: int
    user: int
    chunk_index: int
    pages: tuple[int, ...]
    tokens: int
    submitted: float
    gather_start: float
    transfer_start: float
    persist_start: float
    done_time: float
    payload: np.ndarray | None = field(default=None, repr=False)
    completed: bool = False

    def state_at(self, instant: float) -> OffloadState:
        if self.completed or instant >= self.done_time:
            return OffloadState.DONE
        if instant >= self.persist_start:
            return OffloadState.PERSISTING
        if instant >= self.transfer_start:
            return OffloadState.TRANSFERRING
        if instant >= self.gather_start:
            return OffloadState.GATHERING
        return OffloadState.PENDING


@dataclass
class OffloadQuota:
    limit: int
    in_flight: int = 0
    peak: int = 0

    def release(self, tokens: int) -> None:
        if tokens > self.in_flight:
            raise PipelineError(
                f"se liberan {tokens} tokens de cuota con solo {self.in_flight} en vuelo"
            )
        self.in_flight -= tokens


def admit_offload(quota: OffloadQuota, tokens: int) -> bool:
    if quota.in_flight + tokens > quota.limit:
        return False
    quota.in_flight += tokens
    quota.peak = max(quota.peak, quota.in_flight)
    return True


class TransferPipeline:
    def __init__(
        self,
        config: KVConfig,
        cost: CostModel,
        manager: KVCacheManager,
        *,
        record_events: bool = False,
    ) -> None:
        self.config = config
        self.cost = cost
        self.manager = manager
        self.record_events = record_events
        self.lanes = {name: Lane(name) for name in LaneName}
        layout = manager.store.layout
        self.onload_pair = PinnedBufferPair(config.chunk_size, layout)
        self.offload_pair = PinnedBufferPair(config.chunk_size, layout)
        self.onload_buffer = OnloadBuffer(config, layout)
        self.quota = OffloadQuota(config.offload_quota)
        self.pending: list[OffloadTask] = []
        self.events: list[dict] = []
        self.offload_tasks = 0
        self.offload_rejections = 0
        self.onloaded_chunks = 0
        self._pending_by_user: dict[int, int] = {}
        self._next_id = 0

    def _new_id(self) -> int:
        self._next_id += 1
        return self._next_id

    def _log(self, lane: str, task: str, user: int | None, layer: int | None, start: float, end: float) -> None:
        if self.record_events:
            self.events.append(
                {"time": start, "end": end, "lane": lane, "task": task, "user": user, "layer": layer}
            )

    # -- onload --------------------------------------------------------------

    def submit_onload(self, plans: Sequence[OnloadPlan], start: float) -> OnloadHandle:
        config = self.config
        host = self.manager.host
        events = [CompletionEvent(self._new_id()) for _ in range(config.num_layers)]
        if not plans:
            for event in events:
                event.fire(start)
            return OnloadHandle(events)
        if host is None:
            raise PipelineError("no hay capa host de la que hacer onload")

        payloads: dict[int, list[np.ndarray]] = {}
        for plan in plans:
            stop = len(plan.chunks)
            if stop > host.chunk_count(plan.user):
                raise PipelineError(
                    f"el plan del usuario {plan.user} pide {stop} chunks y solo hay "
                    f"{host.chunk_count(plan.user)} persistidos"
                )
            payloads[plan.user] = host.read_chunks(plan.user, 0, stop)

        chunk_bytes = config.chunk_layer_bytes
        fill_time = self.cost.host_copy_time(chunk_bytes)
        bus_time = self.cost.bus_time(chunk_bytes)
        scatter_time = self.cost.pages_time(config.pages_per_chunk)
        ppc = config.pages_per_chunk
        pair = self.onload_pair
        previous = start
        for layer in range(config.num_layers):
            layer_done = previous
            for plan in plans:
                for position, chunk in enumerate(plan.chunks):
                    index = pair.next_buffer()
                    fill_start, fill_end = pair.host_first(index, start, fill_time)
                    pair.record(index, BufferState.FILLING, fill_start, fill_end)
                    staged = pair.load(index, payloads[plan.user][chunk][layer])

                    tx_start, tx_end = self.lanes[LaneName.ONLOAD].run(fill_end, bus_time)
                    pair.mark_transferred(index, tx_end)
                    pair.record(index, BufferState.TRANSFERRING, tx_start, tx_end)
                    offset = plan.buffer_offset + position * config.chunk_size
                    self.onload_buffer.stage(layer, offset, staged)

                    sc_start, sc_end = self.lanes[LaneName.SCATTER].run(tx_end, scatter_time)
                    self.manager.store.scatter(
                        self.onload_buffer.span(layer, offset, config.chunk_size),
                        plan.dst_pages[position * ppc : (position + 1) * ppc],
                        layer,
                    )
                    layer_done = max(layer_done, sc_end)
                    self._log("host", "fill", plan.user, layer, fill_start, fill_end)
                    self._log(LaneName.ONLOAD, "transfer", plan.user, layer, tx_start, tx_end)
                    self._log(LaneName.SCATTER, "scatter", plan.user, layer, sc_start, sc_end)
            events[layer].fire(layer_done)
            previous = layer_done
        chunks = sum(len(plan.chunks) for plan in plans)
        self.onloaded_chunks += chunks
        return OnloadHandle(events, chunks=chunks)

    def await_layer(self, handle: OnloadHandle, layer: int, ready: float) -> float:
        if not 0 <= layer < len(handle.events):
            raise PipelineError(f"capa {layer} fuera de rango")
        return max(0.0, handle.fire_time(layer) - ready)

    # -- offload -------------------------------------------------------------

    def pending_chunks(self, user: int) -> int:
        return self._pending_by_user.get(user, 0)

    def maybe_trigger_offload(self, user: int, now: float) -> list[OffloadTask]:
        manager = self.manager
        if manager.host is None or not manager.is_resident(user):
            return []
        config = self.config
        chunk = config.chunk_size
        ppc = config.pages_per_chunk
        layers = config.num_layers
        total_bytes = config.token_bytes * chunk
        tasks: list[OffloadTask] = []
        while True:
            queued = manager.persisted_len(user) + self.pending_chunks(user) * chunk
            if manager.device_len(user) - queued < chunk:
                break
            if not admit_offload(self.quota, chunk):
                self.offload_rejections += 1
                logger.debug("offload of user %s rejected by the quota", user)
                break
            if user not in manager.locks:
                manager.lock_user(user)
            index = queued // chunk
            pages = tuple(manager.pages_of(user)[index * ppc : (index + 1) * ppc])
            payload = np.stack([manager.store.gather(pages, layer) for layer in range(layers)])

            lane = self.lanes[LaneName.OFFLOAD]
            g_start, g_end = lane.run(now, self.cost.pages_time(ppc * layers))
            buffer = self.offload_pair.next_buffer()
            ready = max(g_end, self.offload_pair.buffer_free_at(buffer))
            t_start, t_end = lane.run(ready, self.cost.bus_time(total_bytes))
            self.offload_pair.record(buffer, BufferState.TRANSFERRING, t_start, t_end)
            p_start, p_end = self.offload_pair.host_after(
                buffer, t_end, self.cost.host_copy_time(total_bytes)
            )
            task = OffloadTask(
                id=self._new_id(),
                user=user,
                chunk_index=index,
                pages=pages,
                tokens=chunk,
                submitted=now,
                gather_start=g_start,
                transfer_start=t_start,
                persist_start=p_start,
                done_time=p_end,
                payload=payload,
            )
            self.pending.append(task)
            self._pending_by_user[user] = self.pending_chunks(user) + 1
            self.offload_tasks += 1
            tasks.append(task)
            self._log(LaneName.OFFLOAD, "gather", user, None, g_start, g_end)
            self._log(LaneName.OFFLOAD, "transfer", user, None, t_start, t_end)
            self._log("host", "persist", user, None, p_start, p_end)
        return tasks

    def _complete(self, task: OffloadTask) -> None:
        # Quota, pending count and lock are settled even when the host write fails.
        manager = self.manager
        try:
            manager.host.write_chunks(task.user, task.chunk_index, [task.payload])
            task.completed = True
        finally:
            task.payload = None
            self.quota.release(task.tokens)
            left = self.pending_chunks(task.user) - 1
            if left:
                self._pending_by_user[task.user] = left
            else:
                self._pending_by_user.pop(task.user, None)
                manager.unlock_user(task.user)

    def advance(self, now: float) -> int:
        """Complete every offload whose persist finished by ``now``."""
        done = 0
        while self.pending and self.pending[0].done_time <= now:
            self._complete(self.pending.pop(0))
            done += 1
        return done

    def drain(self) -> float:
        """Complete all pending offloads and return the time the last one ends."""
        finish = 0.0
        while self.pending:
            task = self.pending.pop(0)
            finish = max(finish, task.done_time)
            self._complete(task)
        return finish
