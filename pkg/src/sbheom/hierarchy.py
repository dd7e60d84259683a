"""Enumeration of auxiliary density operator (ADO) indices.

An ADO is labelled by occupation counts over the N_R real and N_I imaginary
basis functions; the hierarchy keeps every label whose total occupation
(order) is at most H. Labels are ordered by order first and, within one
order, descending lexicographically, so the zeroth ADO always sits at 0.
"""
from __future__ import annotations

from math import comb

import numpy as np

from .errors import BudgetExceededError

DEFAULT_BUDGET = 2_000_000


def hierarchy_size(n_slots: int, H: int) -> int:
    return comb(n_slots + H, H)


def _compositions(total: int, parts: int):
    """All non-negative tuples of length ``parts`` summing to ``total``, descending lex."""
    if parts == 0:
        if total == 0:
            yield ()
        return
    if parts == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


class HierarchySpace:
    """Ordered ADO labels with raise/lower neighbor tables.

    ``raise_[i, j]`` is the position of label i with one more unit in slot j
    (or -1 when that would exceed H); ``lower[i, j]`` removes one unit (or -1
    when slot j is empty). Slots 0..N_R-1 are the real basis, the rest the
    imaginary basis.
    """

    def __init__(self, n_R: int, n_I: int, H: int, occupations: np.ndarray):
        self.n_R = n_R
        self.n_I = n_I
        self.H = H
        self.occupations = occupations
        self.order = occupations.sum(axis=1)
        self._build_tables()

    @property
    def n_slots(self) -> int:
        return self.n_R + self.n_I

    def __len__(self) -> int:
        return self.occupations.shape[0]

    def _build_tables(self):
        n, occ = self.n_slots, self.occupations
        size = len(self)
        self.raise_ = np.full((size, n), -1, dtype=np.int64)
        self.lower = np.full((size, n), -1, dtype=np.int64)
        if n == 0:
            return
        base = self.H + 1
        if n * np.log2(base) < 62:
            radix = base ** np.arange(n, dtype=np.int64)
            keys = occ.astype(np.int64) @ radix
            perm = np.argsort(keys, kind="stable")
            sorted_keys = keys[perm]

            def lookup(k):
                pos = np.searchsorted(sorted_keys, k)
                pos = np.minimum(pos, size - 1)
                return np.where(sorted_keys[pos] == k, perm[pos], -1)

            for j in range(n):
                can_raise = self.order < self.H
                self.raise_[can_raise, j] = lookup(keys[can_raise] + radix[j])
                can_lower = occ[:, j] > 0
                self.lower[can_lower, j] = lookup(keys[can_lower] - radix[j])
        else:
            index = {tuple(row): i for i, row in enumerate(occ.tolist())}
            for i, row in enumerate(occ.tolist()):
                for j in range(n):
                    if self.order[i] < self.H:
                        row[j] += 1
                        self.raise_[i, j] = index[tuple(row)]
                        row[j] -= 1
                    if row[j] > 0:
                        row[j] -= 1
                        self.lower[i, j] = index[tuple(row)]
                        row[j] += 1

    def index(self, occ_R, occ_I=()) -> int:
        """Position of the label (occ_R; occ_I)."""
        target = np.array(tuple(occ_R) + tuple(occ_I), dtype=self.occupations.dtype)
        if target.size != self.n_slots or target.sum() > self.H or np.any(target < 0):
            raise KeyError(f"label {tuple(occ_R)};{tuple(occ_I)} is not in the hierarchy")
        hits = np.nonzero((self.occupations == target).all(axis=1))[0]
        return int(hits[0])

    def label(self, i: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
        row = self.occupations[i].tolist()
        return tuple(row[: self.n_R]), tuple(row[self.n_R:])

    def labels(self):
        return [self.label(i) for i in range(len(self))]


def enumerate_space(n_R: int, n_I: int, H: int, budget: int = DEFAULT_BUDGET) -> HierarchySpace:
    """All ADO labels up to order H; the budget is checked before allocating."""
    if H < 0:
        raise ValueError("truncation order H must be >= 0")
    if n_R < 0 or n_I < 0:
        raise ValueError("basis counts must be >= 0")
    n = n_R + n_I
    count = hierarchy_size(n, H)
    if count > budget:
        raise BudgetExceededError(count, budget)
    dtype = np.uint8 if H < 256 else np.int32
    occ = np.zeros((count, n), dtype=dtype)
    k = 0
    for h in range(H + 1):
        if n == 0 and h > 0:
            break
        for row in _compositions(h, n):
            occ[k] = row
            k += 1
    return HierarchySpace(n_R, n_I, H, occ[:k])
