"""Dynamic prefix tree over valid semantic-ID paths.

Children are kept in sorted arrays and located by binary search; leaves hold
an item-id multiset. Snapshot files are sorted ``path<TAB>item_id`` lines,
one line per occurrence.
"""

from __future__ import annotations

import threading
from bisect import bisect_left
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .codebook import format_path, parse_path


class _Node:
    __slots__ = ("codes", "children", "items", "count")

    def __init__(self):
        self.codes: list[int] = []
        self.children: list[_Node] = []
        self.items: dict[int, int] | None = None  # leaf multiset item -> multiplicity
        self.count = 0

    def child(self, code: int) -> "_Node | None":
        i = bisect_left(self.codes, code)
        if i < len(self.codes) and self.codes[i] == code:
            return self.children[i]
        return None

    def __eq__(self, other) -> bool:
        if not isinstance(other, _Node):
            return NotImplemented
        return (self.codes == other.codes and self.count == other.count and self.items == other.items
                and all(a == b for a, b in zip(self.children, other.children)))


class RWLock:
    """Many readers or one writer."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False

    @contextmanager
    def read(self):
        with self._cond:
            while self._writer:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                if not self._readers:
                    self._cond.notify_all()

    @contextmanager
    def write(self):
        with self._cond:
            while self._writer or self._readers:
                self._cond.wait()
            self._writer = True
        try:
            yield
        finally:
            with self._cond:
                self._writer = False
                self._cond.notify_all()


class SidTrie:
    """Prefix tree of depth ``k`` with reference-counted item leaves."""

    def __init__(self, k: int):
        if k < 1:
            raise ValueError("k must be >= 1")
        self.k = k
        self.root = _Node()
        self.version = 0
        self.lock = RWLock()

    def __eq__(self, other) -> bool:
        if not isinstance(other, SidTrie):
            return NotImplemented
        return self.k == other.k and self.root == other.root

    def __len__(self) -> int:
        return self.root.count

    def _check(self, path: Sequence[int]) -> tuple[int, ...]:
        path = tuple(int(s) for s in path)
        if len(path) != self.k:
            raise ValueError(f"path {format_path(path)} has length {len(path)}, expected {self.k}")
        return path

    def insert(self, path: Sequence[int], item_id: int) -> None:
        path = self._check(path)
        node = self.root
        node.count += 1
        for code in path:
            i = bisect_left(node.codes, code)
            if i == len(node.codes) or node.codes[i] != code:
                node.codes.insert(i, code)
                node.children.insert(i, _Node())
            node = node.children[i]
            node.count += 1
        if node.items is None:
            node.items = {}
        node.items[int(item_id)] = node.items.get(int(item_id), 0) + 1
        self.version += 1

    def remove(self, path: Sequence[int], item_id: int) -> None:
        path = self._check(path)
        trail = [self.root]
        for code in path:
            nxt = trail[-1].child(code)
            if nxt is None:
                break
            trail.append(nxt)
        leaf = trail[-1]
        if len(trail) != self.k + 1 or not leaf.items or int(item_id) not in leaf.items:
            raise KeyError(f"item {item_id} is not stored under path {format_path(path)}")
        leaf.items[int(item_id)] -= 1
        if not leaf.items[int(item_id)]:
            del leaf.items[int(item_id)]
        for node in trail:
            node.count -= 1
        # prune empty branches bottom-up
        for depth in range(self.k, 0, -1):
            node = trail[depth]
            if node.count:
                break
            parent = trail[depth - 1]
            i = bisect_left(parent.codes, path[depth - 1])
            del parent.codes[i]
            del parent.children[i]
        self.version += 1

    def update(self, op: str, path: Sequence[int], item_id: int) -> None:
        if op == "insert":
            self.insert(path, item_id)
        elif op == "remove":
            self.remove(path, item_id)
        else:
            raise ValueError(f"unknown trie op {op!r}")

    def _node(self, prefix: Sequence[int]) -> _Node | None:
        node = self.root
        for code in prefix:
            node = node.child(int(code))
            if node is None:
                return None
        return node

    def feasible(self, prefix: Sequence[int] = ()) -> list[int]:
        """Sorted valid next codes after ``prefix``; empty if the prefix is absent."""
        if len(prefix) >= self.k:
            raise ValueError(f"prefix length must be < k = {self.k}")
        node = self._node(prefix)
        return list(node.codes) if node is not None else []

    def resolve(self, path: Sequence[int]) -> list[int]:
        """Items stored under a full path (ascending, with multiplicity); [] if invalid."""
        if len(path) != self.k:
            return []
        node = self._node(path)
        if node is None or not node.items:
            return []
        return [i for i in sorted(node.items) for _ in range(node.items[i])]

    def contains(self, path: Sequence[int]) -> bool:
        return len(path) == self.k and self._node(path) is not None

    def count(self, prefix: Sequence[int] = ()) -> int:
        node = self._node(prefix)
        return node.count if node is not None else 0

    def entries(self) -> Iterator[tuple[tuple[int, ...], int]]:
        """All (path, item) pairs in path order, repeated by multiplicity."""
        stack: list[tuple[_Node, tuple[int, ...]]] = [(self.root, ())]
        while stack:
            node, prefix = stack.pop()
            if len(prefix) == self.k:
                for item in sorted(node.items or {}):
                    for _ in range(node.items[item]):
                        yield prefix, item
                continue
            for code, child in reversed(list(zip(node.codes, node.children))):
                stack.append((child, prefix + (code,)))

    def check_invariants(self) -> None:
        def walk(node: _Node, depth: int) -> int:
            if depth == self.k:
                assert node.items, "empty leaf"
                assert not node.codes
                total = sum(node.items.values())
            else:
                assert node.codes or depth == 0, "dangling internal node"
                assert node.codes == sorted(set(node.codes))
                total = sum(walk(c, depth + 1) for c in node.children)
            assert total == node.count, "subtree count mismatch"
            return total

        walk(self.root, 0)

    @classmethod
    def from_pairs(cls, k: int, pairs: Iterable[tuple[Sequence[int], int]]) -> "SidTrie":
        trie = cls(k)
        for path, item in pairs:
            trie.insert(path, item)
        return trie

    def save(self, path: str | Path) -> None:
        lines = sorted(f"{format_path(p)}\t{item}" for p, item in self.entries())
        Path(path).write_text("".join(line + "\n" for line in lines))

    @classmethod
    def load(cls, path: str | Path, k: int | None = None) -> "SidTrie":
        pairs = []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            if not line.strip():
                continue
            try:
                p, item = line.split("\t")
                pairs.append((parse_path(p), int(item)))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed snapshot line {line!r}") from exc
        if k is None:
            if not pairs:
                raise ValueError(f"{path}: empty snapshot needs an explicit k")
            k = len(pairs[0][0])
        return cls.from_pairs(k, pairs)
