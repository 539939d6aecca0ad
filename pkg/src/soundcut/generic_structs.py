import collections.abc
import typing as t

import numpy as np
from sortedcontainers import SortedSet


class IndexSet(
    collections.abc.Set,
    collections.abc.Hashable,
):
    """
    Frozen set of feature indices. Iterates in ascending order, so anything
    derived from it (column slices, reports, tie-breaks) is deterministic.
    Hashable.
    """

    def __init__(self, iterable: t.Iterable[int] = ()):
        self._sorted = SortedSet(int(i) for i in iterable)
        self._set = frozenset(self._sorted)

    @classmethod
    def _from_iterable(cls, it):
        return cls(it)

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "IndexSet":
        (indices,) = np.nonzero(np.asarray(mask))
        return cls(indices.tolist())

    @classmethod
    def full(cls, n: int) -> "IndexSet":
        return cls(range(n))

    def mask(self, n: int) -> np.ndarray:
        """Float 0/1 vector of length `n` with ones at member indices."""
        out = np.zeros(n)
        if self._sorted:
            if self._sorted[-1] >= n or self._sorted[0] < 0:
                raise IndexError(f"{self} does not fit into {n} columns")
            out[list(self._sorted)] = 1.0
        return out

    def without(self, index: int) -> "IndexSet":
        return IndexSet(i for i in self._sorted if i != index)

    def as_array(self) -> np.ndarray:
        return np.array(list(self._sorted), dtype=int)

    # -------- Set --------
    def __contains__(self, x):
        return x in self._set

    def __iter__(self):
        return iter(self._sorted)

    def __len__(self):
        return len(self._sorted)

    # -------- Hashable --------
    def __hash__(self):
        return hash(self._set)

    # -------- Sequence-ish --------
    def __getitem__(self, index):
        return self._sorted[index]

    # -------- Object --------
    def __repr__(self):
        return f"{type(self).__name__}({list(self._sorted)})"
