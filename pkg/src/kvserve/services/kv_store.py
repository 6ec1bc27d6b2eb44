"""Device paged tier, host chunked tier and the staging buffers between them.

Spans are numpy arrays laid out ``[tokens, kind, *payload]``. The payload of a
backend is ``(H, D)`` floats (``value``), a scalar int64 tag (``tag``) or
zero-width (``none``); geometry checks are identical for all three.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import StrEnum

import numpy as np

from ..core import EMPTY_TAG, pages_needed
from ..schemas.kv_config import KVConfig

logger = logging.getLogger(__name__)


class StoreError(RuntimeError):
    pass


class PageNotAllocatedError(StoreError):
    pass


class SpanMismatchError(StoreError):
    pass


class InsufficientPagesError(StoreError):
    pass


class HostWriteError(StoreError):
    pass


class HostReadError(StoreError):
    pass


class HostCapacityError(StoreError):
    pass


class Backend(StrEnum):
    VALUE = "value"
    TAG = "tag"
    NONE = "none"


@dataclass(frozen=True)
class PayloadLayout:
    backend: Backend
    shape: tuple[int, ...]
    dtype: type
    fill: float | int

    @classmethod
    def for_backend(cls, backend: Backend | str, config: KVConfig) -> PayloadLayout:
        backend = Backend(backend)
        if backend is Backend.VALUE:
            return cls(backend, (config.num_heads, config.head_dim), np.float64, 0.0)
        if backend is Backend.TAG:
            return cls(backend, (), np.int64, EMPTY_TAG)
        return cls(backend, (0,), np.float64, 0.0)

    def empty_span(self, tokens: int = 0) -> np.ndarray:
        return np.full((tokens, 2, *self.shape), self.fill, dtype=self.dtype)


class DevicePagedStore:
    """Layer planes of ``N_pages`` slots; one page id addresses all planes."""

    def __init__(self, config: KVConfig, backend: Backend | str = Backend.NONE) -> None:
        self.config = config
        self.layout = PayloadLayout.for_backend(backend, config)
        self._planes = np.full(
            (config.num_layers, config.device_pages, 2, config.page_size, *self.layout.shape),
            self.layout.fill,
            dtype=self.layout.dtype,
        )
        # Pop from the end: page 0 is handed out first.
        self._free = list(range(config.device_pages - 1, -1, -1))
        self._allocated = np.zeros(config.device_pages, dtype=bool)

    @property
    def backend(self) -> Backend:
        return self.layout.backend

    @property
    def free_count(self) -> int:
        return len(self._free)

    @property
    def occupied_count(self) -> int:
        return self.config.device_pages - len(self._free)

    def is_allocated(self, page: int) -> bool:
        return bool(self._allocated[page])

    def allocate(self, count: int) -> list[int]:
        if count > len(self._free):
            raise InsufficientPagesError(
                f"se piden {count} páginas y quedan {len(self._free)} libres"
            )
        pages = [self._free.pop() for _ in range(count)]
        self._allocated[pages] = True
        return pages

    def release(self, pages: Sequence[int]) -> None:
        for page in pages:
            if not self._allocated[page]:
                raise PageNotAllocatedError(f"la página {page} no está asignada")
            self._allocated[page] = False
            self._free.append(page)

    def _locate(
        self, pages: Sequence[int], start: int, count: int
    ) -> tuple[np.ndarray, np.ndarray]:
        size = self.config.page_size
        if start + count > len(pages) * size:
            raise InsufficientPagesError(
                f"{len(pages)} páginas no alcanzan para las posiciones {start}..{start + count - 1}"
            )
        page_ids = np.asarray(pages, dtype=np.int64)
        touched = page_ids[start // size : pages_needed(start + count, size)]
        if touched.size and not self._allocated[touched].all():
            missing = int(touched[~self._allocated[touched]][0])
            raise PageNotAllocatedError(f"la página {missing} no está asignada")
        positions = np.arange(start, start + count)
        return page_ids[positions // size], positions % size

    def write(self, layer: int, pages: Sequence[int], start: int, span: np.ndarray) -> None:
        page_ids, slots = self._locate(pages, start, len(span))
        self._planes[layer][page_ids, :, slots] = span

    def read(self, layer: int, pages: Sequence[int], start: int, count: int) -> np.ndarray:
        page_ids, slots = self._locate(pages, start, count)
        return self._planes[layer][page_ids, :, slots]

    def scatter(self, span: np.ndarray, dst_pages: Sequence[int], layer: int) -> None:
        size = self.config.page_size
        tokens = len(span)
        if pages_needed(tokens, size) != len(dst_pages):
            raise SpanMismatchError(
                f"un tramo de {tokens} tokens no encaja en {len(dst_pages)} páginas de {size}"
            )
        if tokens:
            self.write(layer, dst_pages, 0, span)

    def gather(
        self, src_pages: Sequence[int], layer: int, length: int | None = None
    ) -> np.ndarray:
        if length is None:
            length = len(src_pages) * self.config.page_size
        return self.read(layer, src_pages, 0, length)


def scatter(
    store: DevicePagedStore, span: np.ndarray, dst_pages: Sequence[int], layer: int
) -> None:
    store.scatter(span, dst_pages, layer)


def gather(
    store: DevicePagedStore, src_pages: Sequence[int], layer: int, length: int | None = None
) -> np.ndarray:
    return store.gather(src_pages, layer, length)


def append_kv(
    store: DevicePagedStore,
    pages: Sequence[int],
    device_len: int,
    layer: int,
    span: np.ndarray,
) -> int:
    """Write ``span`` at ``device_len`` and return the resulting last_page_len."""
    store.write(layer, pages, device_len, span)
    end = device_len + len(span)
    if end == 0:
        return 0
    return end - (pages_needed(end, store.config.page_size) - 1) * store.config.page_size


@dataclass
class _HostUser:
    chunks: list[np.ndarray] = field(default_factory=list)


class HostChunkedStore:
    """Whole chunks per user, each ``[L, S_chunk, kind, *payload]``."""

    def __init__(self, config: KVConfig, backend: Backend | str = Backend.NONE) -> None:
        self.config = config
        self.layout = PayloadLayout.for_backend(backend, config)
        self._users: dict[int, _HostUser] = {}
        self._stored = 0

    def chunk_count(self, user: int) -> int:
        entry = self._users.get(user)
        return len(entry.chunks) if entry else 0

    def persisted_len(self, user: int) -> int:
        return self.chunk_count(user) * self.config.chunk_size

    def users(self) -> list[int]:
        return sorted(self._users)

    def write_chunks(self, user: int, start_index: int, payloads: Sequence[np.ndarray]) -> None:
        have = self.chunk_count(user)
        if start_index != have:
            raise HostWriteError(
                f"escritura no contigua para el usuario {user}: chunk {start_index} "
                f"cuando solo existen {have}"
            )
        expected = (self.config.num_layers, self.config.chunk_size, 2, *self.layout.shape)
        for payload in payloads:
            if payload.shape != expected:
                raise HostWriteError(
                    f"chunk con forma {payload.shape}; se esperaba {expected}"
                )
        capacity = self.config.host_capacity
        if capacity and self._stored + len(payloads) > capacity:
            raise HostCapacityError(
                f"la memoria host admite {capacity} chunks y ya guarda {self._stored}"
            )
        entry = self._users.setdefault(user, _HostUser())
        entry.chunks.extend(np.array(payload, copy=True) for payload in payloads)
        self._stored += len(payloads)

    def read_chunks(self, user: int, start: int, stop: int) -> list[np.ndarray]:
        have = self.chunk_count(user)
        if not 0 <= start <= stop <= have:
            raise HostReadError(
                f"lectura de chunks {start}..{stop - 1} fuera de lo persistido "
                f"({have} chunks) para el usuario {user}"
            )
        return list(self._users[user].chunks[start:stop]) if stop > start else []

    def read_layer(self, user: int, index: int, layer: int) -> np.ndarray:
        return self.read_chunks(user, index, index + 1)[0][layer]


def host_write_chunks(
    host: HostChunkedStore, user: int, start_index: int, payloads: Sequence[np.ndarray]
) -> None:
    host.write_chunks(user, start_index, payloads)


def host_read_chunks(host: HostChunkedStore, user: int, start: int, stop: int) -> list[np.ndarray]:
    return host.read_chunks(user, start, stop)


class OnloadBuffer:
    """Contiguous device staging area of ``N_o`` pages per layer plane."""

    def __init__(self, config: KVConfig, layout: PayloadLayout) -> None:
        self.capacity = config.onload_tokens
        self._data = np.full(
            (config.num_layers, self.capacity, 2, *layout.shape), layout.fill, dtype=layout.dtype
        )

    def stage(self, layer: int, offset: int, span: np.ndarray) -> None:
        if offset + len(span) > self.capacity:
            raise SpanMismatchError(
                f"el buffer de onload tiene {self.capacity} tokens; "
                f"se intenta escribir hasta {offset + len(span)}"
            )
        self._data[layer, offset : offset + len(span)] = span

    def span(self, layer: int, offset: int, length: int) -> np.ndarray:
        return self._data[layer, offset : offset + length]


class BufferState(StrEnum):
    IDLE = "idle"
    FILLING = "filling"
    TRANSFERRING = "transferring"


@dataclass(frozen=True)
class BufferInterval:
    buffer: int
    state: BufferState
    start: float
    end: float


class PinnedBufferPair:
    """Two chunk-sized host staging buffers used ping-pong.

    The host side (filler on onload, persisting worker pool on offload) is one
    serial resource; the bus side is the lane handed to ``schedule``.
    """

    def __init__(self, tokens: int, layout: PayloadLayout) -> None:
        self.tokens = tokens
        self._buffers = [layout.empty_span(tokens), layout.empty_span(tokens)]
        self._free_at = [0.0, 0.0]
        self._host_free_at = 0.0
        self._next = 0
        self.intervals: list[BufferInterval] = []

    def buffer(self, index: int) -> np.ndarray:
        return self._buffers[index]

    def load(self, index: int, span: np.ndarray) -> np.ndarray:
        self._buffers[index][: len(span)] = span
        return self._buffers[index][: len(span)]

    def next_buffer(self) -> int:
        index = self._next
        self._next = 1 - index
        return index

    def host_first(self, index: int, ready: float, duration: float) -> tuple[float, float]:
        """Host work that needs the buffer idle (fill before a transfer)."""
        start = max(ready, self._host_free_at, self._free_at[index])
        end = start + duration
        self._host_free_at = end
        return start, end

    def host_after(self, index: int, ready: float, duration: float) -> tuple[float, float]:
        """Host work that drains the buffer after a transfer (persist)."""
        start = max(ready, self._host_free_at)
        end = start + duration
        self._host_free_at = end
        self._free_at[index] = end
        return start, end

    def buffer_free_at(self, index: int) -> float:
        return self._free_at[index]

    def mark_transferred(self, index: int, end: float) -> None:
        self._free_at[index] = max(self._free_at[index], end)

    def record(self, index: int, state: BufferState, start: float, end: float) -> None:
        self.intervals.append(BufferInterval(index, state, start, end))

    def state_at(self, index: int, instant: float) -> BufferState:
        for interval in self.intervals:
            if interval.buffer == index and interval.start <= instant < interval.end:
                return interval.state
        return BufferState.IDLE
