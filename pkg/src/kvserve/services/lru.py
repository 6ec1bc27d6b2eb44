from __future__ import annotations

from collections.abc import Container, Iterator


class _Node:
    __slots__ = ("key", "prev", "next")

    def __init__(self, key: int | None) -> None:
        self.key = key
        self.prev: _Node | None = None
        self.next: _Node | None = None


class LruIndex:
    """Recency list over users: head side is most recent, tail side is the victim end."""

    def __init__(self) -> None:
        self._head = _Node(None)
        self._tail = _Node(None)
        self._head.next = self._tail
        self._tail.prev = self._head
        self._nodes: dict[int, _Node] = {}

    def __contains__(self, key: object) -> bool:
        return key in self._nodes

    def __len__(self) -> int:
        return len(self._nodes)

    def _unlink(self, node: _Node) -> None:
        node.prev.next = node.next
        node.next.prev = node.prev

    def _push_front(self, node: _Node) -> None:
        node.next = self._head.next
        node.prev = self._head
        self._head.next.prev = node
        self._head.next = node

    def touch(self, key: int) -> None:
        node = self._nodes.get(key)
        if node is None:
            node = _Node(key)
            self._nodes[key] = node
        else:
            self._unlink(node)
        self._push_front(node)

    insert = touch

    def remove(self, key: int) -> bool:
        node = self._nodes.pop(key, None)
        if node is None:
            return False
        self._unlink(node)
        return True

    def iter_lru(self) -> Iterator[int]:
        node = self._tail.prev
        while node is not self._head:
            yield node.key
            node = node.prev

    def select_victim(self, skip: Container[int] = ()) -> int | None:
        for key in self.iter_lru():
            if key not in skip:
                return key
        return None

    def order(self) -> list[int]:
        """Keys from most to least recent."""
        return list(reversed(list(self.iter_lru())))
