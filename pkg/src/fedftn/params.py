"""Named parameter collections: the unit of federation and serialization."""
from __future__ import annotations

import fnmatch
from collections.abc import MutableMapping
from typing import Callable, Iterable, Iterator

import numpy as np

from .autodiff import Tensor
from .errors import ShapeError


class ParamTree(MutableMapping):
    """Mapping of dotted names to tensors, iterated in lexicographic order.

    Two trees are *congruent* when they hold the same names with the same
    per-name shapes; averaging and proximal terms require congruence.
    """

    def __init__(self, entries=None):
        self._entries: dict = {}
        if entries:
            items = entries.items() if hasattr(entries, "items") else entries
            for name, value in items:
                self[name] = value

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __setitem__(self, name: str, value) -> None:
        if not isinstance(name, str) or not name:
            raise KeyError(f"parameter names must be non-empty strings, got {name!r}")
        self._entries[name] = value if isinstance(value, Tensor) else Tensor(value)

    def __delitem__(self, name: str) -> None:
        del self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._entries))

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        return f"ParamTree({len(self)} entries, {self.numel()} scalars)"

    def shapes(self) -> dict:
        return {name: self[name].shape for name in self}

    def numel(self) -> int:
        return sum(t.size for t in self._entries.values())

    def congruent(self, other: "ParamTree") -> bool:
        return self.shapes() == other.shapes()

    def check_congruent(self, other: "ParamTree", error=ShapeError) -> None:
        if self.congruent(other):
            return
        mine, theirs = self.shapes(), other.shapes()
        missing = sorted(set(mine) ^ set(theirs))
        if missing:
            raise error(f"parameter trees differ in names: {missing[:5]}")
        bad = [n for n in mine if mine[n] != theirs[n]]
        raise error(f"parameter trees differ in shapes for {bad[:5]}")

    def select(self, predicate: Callable[[str], bool]) -> "ParamTree":
        """Sub-tree sharing tensor objects with this one."""
        return ParamTree((n, self._entries[n]) for n in self if predicate(n))

    def with_prefix(self, *prefixes: str) -> "ParamTree":
        return self.select(lambda n: n.startswith(prefixes))

    def matching(self, *patterns: str) -> "ParamTree":
        return self.select(lambda n: any(fnmatch.fnmatchcase(n, p) for p in patterns))

    def snapshot(self) -> "ParamTree":
        """Deep copy of the values with no gradient state."""
        return ParamTree((n, Tensor(self._entries[n].data.copy())) for n in self)

    def assign(self, source: "ParamTree") -> None:
        """Overwrite the values of every name in ``source`` in place."""
        for name in source:
            if name not in self._entries:
                raise ShapeError(f"cannot assign unknown parameter {name!r}")
            dst = self._entries[name]
            src = source[name].data
            if src.shape != dst.shape:
                raise ShapeError(f"shape mismatch assigning {name!r}: {src.shape} vs {dst.shape}")
            dst.data[...] = src

    def arrays(self) -> dict:
        return {n: self._entries[n].data for n in self}

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def equal(self, other: "ParamTree") -> bool:
        """Bit-exact equality of names, shapes, dtypes and values."""
        if list(self) != list(other):
            return False
        for n in self:
            a, b = self[n].data, other[n].data
            if a.shape != b.shape or a.dtype != b.dtype or a.tobytes() != b.tobytes():
                return False
        return True


def merge(trees: Iterable[ParamTree]) -> ParamTree:
    out = ParamTree()
    for tree in trees:
        for name in tree:
            if name in out:
                raise KeyError(f"duplicate parameter {name!r} while merging")
            out[name] = tree[name]
    return out


def tree_from_arrays(arrays: dict, dtype=None) -> ParamTree:
    return ParamTree((n, Tensor(np.array(a), dtype=dtype)) for n, a in arrays.items())
