"""Merge coarse masks into instances with the updatable overlap-similarity rule.

Two masks belong together when the dot product of their score-table columns
exceeds ``max(1, |F_n| / tau)`` for either member ``n``. Merged masks carry the
sum of their columns, so a growing instance can absorb masks it initially
barely overlapped.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

DEFAULT_TAU = 0.45


class ColumnNorm(str, Enum):
    L1 = "L1"
    L2 = "L2"
    NONZERO = "nonzero-count"


@dataclass
class MergeConfig:
    tau: float = DEFAULT_TAU
    column_norm: ColumnNorm = ColumnNorm.L1
    max_passes: Optional[int] = None  # None: number of masks

    def __post_init__(self):
        self.column_norm = ColumnNorm(self.column_norm)
        if not 0 < self.tau <= 1:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if self.max_passes is not None and self.max_passes < 1:
            raise ValueError("max_passes must be >= 1")


@dataclass
class Instance:
    id: int
    point_indices: np.ndarray
    composition: list
    label: Optional[str] = None
    confidence: Optional[float] = None
    extras: dict = field(default_factory=dict)


def column_norm(column, norm=ColumnNorm.L1) -> float:
    column = np.asarray(column, dtype=np.float64)
    norm = ColumnNorm(norm)
    if norm is ColumnNorm.L1:
        return float(np.abs(column).sum())
    if norm is ColumnNorm.L2:
        return float(np.sqrt((column**2).sum()))
    return float(np.count_nonzero(column))


def similarity_scores(table, n: int) -> np.ndarray:
    table = np.asarray(table, dtype=np.float64)
    return table.T @ table[:, n]


def merge_threshold(column, tau: float = DEFAULT_TAU, norm=ColumnNorm.L1) -> float:
    if tau <= 0:
        raise ValueError("tau must be positive")
    return max(1.0, column_norm(column, norm) / tau)


def merge_coarse_masks(table, coarse_masks, config: MergeConfig | None = None, columns=None):
    """Fuse coarse masks until no pair of surviving masks passes the similarity test.

    ``table`` holds one column per coarse mask, in the order of ``coarse_masks``
    unless ``columns`` maps each mask to its table column. Each pass visits
    surviving masks by ascending id; the anchor's threshold comes from its
    current (pre-merge) column and every other survivor scoring above it joins,
    into the lowest id of the group. Passes repeat until one merges nothing.
    """
    config = config or MergeConfig()
    table = np.asarray(table, dtype=np.float64)
    if columns is None:
        columns = list(range(len(coarse_masks)))
    if len(columns) != len(coarse_masks):
        raise ValueError("columns must align with coarse masks")

    order = sorted(range(len(coarse_masks)), key=lambda i: coarse_masks[i].id)
    ids = [coarse_masks[i].id for i in order]
    if len(set(ids)) != len(ids):
        raise ValueError("coarse mask ids must be unique")
    cols = table[:, [columns[i] for i in order]].copy() if order else np.zeros((table.shape[0], 0))
    points = [np.asarray(coarse_masks[i].point_indices, dtype=np.int64) for i in order]
    comps = [[coarse_masks[i].id] for i in order]
    alive = np.ones(len(order), dtype=bool)

    max_passes = config.max_passes or max(1, len(order))
    passes = 0
    while passes < max_passes:
        passes += 1
        merged_any = False
        for a in range(len(order)):
            if not alive[a]:
                continue
            anchor = cols[:, a].copy()
            thr = merge_threshold(anchor, config.tau, config.column_norm)
            scores = cols.T @ anchor
            partners = [j for j in np.flatnonzero(alive & (scores > thr)).tolist() if j != a]
            if not partners:
                continue
            group = sorted([a] + partners)
            keep = group[0]
            for j in group[1:]:
                cols[:, keep] += cols[:, j]
                cols[:, j] = 0
                points[keep] = np.union1d(points[keep], points[j])
                comps[keep].extend(comps[j])
                alive[j] = False
            merged_any = True
        if not merged_any:
            break

    survivors = sorted(np.flatnonzero(alive).tolist(), key=lambda i: comps[i][0])
    instances = [Instance(k, points[i], list(comps[i])) for k, i in enumerate(survivors)]
    final_cols = cols[:, survivors]
    return instances, final_cols, passes


def fixpoint_violations(final_columns, tau: float = DEFAULT_TAU, norm=ColumnNorm.L1):
    """Pairs (a, b) of final columns whose similarity beats either member's threshold."""
    cols = np.asarray(final_columns, dtype=np.float64)
    gram = cols.T @ cols
    thr = [merge_threshold(cols[:, i], tau, norm) for i in range(cols.shape[1])]
    bad = []
    for a in range(cols.shape[1]):
        for b in range(a + 1, cols.shape[1]):
            if gram[a, b] > thr[a] or gram[a, b] > thr[b]:
                bad.append((a, b))
    return bad
