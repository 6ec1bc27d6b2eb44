"""Shared identifiers and page/chunk geometry used by every engine module."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

# Tag layout (63 bits): user | position | layer | kind.
_USER_BITS = 27
_POSITION_BITS = 28
_LAYER_BITS = 7
EMPTY_TAG = -1


class KVKind(IntEnum):
    KEY = 0
    VALUE = 1


def pages_needed(length: int, page_size: int) -> int:
    if page_size < 1:
        raise ValueError(f"page_size debe ser al menos 1; valor recibido: {page_size!r}")
    return -(-length // page_size)


def persisted_prefix(length: int, chunk_size: int) -> int:
    if chunk_size < 1:
        raise ValueError(
            f"chunk_size debe ser al menos 1; valor recibido: {chunk_size!r}"
        )
    return (length // chunk_size) * chunk_size


@dataclass(frozen=True)
class Request:
    timestamp: int
    user: int
    delta_len: int
    num_candidates: int
    new_tokens: tuple[int, ...] | None = None
    candidates: tuple[int, ...] | None = None
    index: int = 0

    def __post_init__(self) -> None:
        if self.delta_len < 0:
            raise ValueError(f"delta_len no puede ser negativo: {self.delta_len!r}")
        if self.num_candidates < 1:
            raise ValueError(
                f"una petición necesita al menos un candidato: {self.num_candidates!r}"
            )
        if self.new_tokens is not None and len(self.new_tokens) != self.delta_len:
            raise ValueError("new_tokens no coincide con delta_len")
        if self.candidates is not None and len(self.candidates) != self.num_candidates:
            raise ValueError("candidates no coincide con num_candidates")

    @property
    def has_token_ids(self) -> bool:
        return self.new_tokens is not None and self.candidates is not None


@dataclass(frozen=True)
class SequenceState:
    total_len: int = 0
    device_len: int = 0
    persisted_len: int = 0
    locked: bool = False
    last_access: int = 0

    @property
    def reusable_prefix(self) -> int:
        return max(self.device_len, self.persisted_len)


@dataclass(frozen=True)
class TokenAddress:
    user: int
    position: int
    layer: int
    kind: KVKind = field(default=KVKind.KEY)


def _check_tag_range(user: int, start: int, stop: int, layer: int) -> None:
    if not 0 <= user < 1 << _USER_BITS:
        raise ValueError(f"usuario fuera del rango de etiquetas: {user!r}")
    if start < 0 or stop > 1 << _POSITION_BITS:
        raise ValueError(f"posición fuera del rango de etiquetas: [{start}, {stop})")
    if not 0 <= layer < 1 << _LAYER_BITS:
        raise ValueError(f"capa fuera del rango de etiquetas: {layer!r}")


def encode_tag(address: TokenAddress) -> int:
    _check_tag_range(address.user, address.position, address.position + 1, address.layer)
    packed = (address.user << _POSITION_BITS) | address.position
    packed = (packed << _LAYER_BITS) | address.layer
    return (packed << 1) | int(address.kind)


def decode_tag(tag: int) -> TokenAddress:
    tag = int(tag)
    if tag < 0:
        raise ValueError(f"etiqueta vacía o inválida: {tag!r}")
    kind = KVKind(tag & 1)
    tag >>= 1
    layer = tag & ((1 << _LAYER_BITS) - 1)
    tag >>= _LAYER_BITS
    position = tag & ((1 << _POSITION_BITS) - 1)
    user = tag >> _POSITION_BITS
    return TokenAddress(user=user, position=position, layer=layer, kind=kind)


def tag_span(user: int, start: int, count: int, layer: int) -> np.ndarray:
    """Tags for ``count`` consecutive positions of one layer, shape [count, 2]."""
    _check_tag_range(user, start, start + count, layer)
    positions = np.arange(start, start + count, dtype=np.int64)
    base = (((np.int64(user) << _POSITION_BITS) | positions) << _LAYER_BITS) | layer
    base = base << 1
    return np.stack([base | int(KVKind.KEY), base | int(KVKind.VALUE)], axis=1)


def decode_tag_array(tags: np.ndarray) -> dict[str, np.ndarray]:
    tags = np.asarray(tags, dtype=np.int64)
    kind = tags & 1
    rest = tags >> 1
    layer = rest & ((1 << _LAYER_BITS) - 1)
    rest = rest >> _LAYER_BITS
    position = rest & ((1 << _POSITION_BITS) - 1)
    user = rest >> _POSITION_BITS
    return {"user": user, "position": position, "layer": layer, "kind": kind}
