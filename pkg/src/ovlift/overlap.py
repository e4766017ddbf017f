"""Overlapping score table between superpoints and 3D prompts, and coarse-mask assembly."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

DEFAULT_THETA = 0.3


@dataclass
class ViewMask:
    """Where a coarse mask's 2D segmentation came from, kept for crop embedding."""

    view_id: int
    bbox: tuple  # (x0, y0, x1, y1), exclusive upper bounds
    pixel_count: int


@dataclass
class CoarseMask:
    id: int  # origin prompt index (table column)
    point_indices: np.ndarray
    member_superpoints: list
    view_masks: list = field(default_factory=list)


def overlap_ratio(s, bp) -> float:
    s = np.unique(np.asarray(s, dtype=np.int64))
    if len(s) == 0:
        raise ValueError("superpoint must be non-empty")
    inter = np.intersect1d(s, np.asarray(bp, dtype=np.int64), assume_unique=False)
    return len(inter) / len(s)


def build_score_table(superpoints, back_projections, num_prompts: int, theta: float = DEFAULT_THETA,
                      num_points: int | None = None) -> np.ndarray:
    """M×N table counting, per (superpoint, prompt), the views where their overlap ratio exceeds ``theta``.

    ``back_projections`` is an iterable of objects with ``prompt_id``, ``view_id`` and
    ``point_indices``. Each (prompt, view) pair may appear at most once.
    """
    if not 0 <= theta < 1:
        raise ValueError("theta must lie in [0, 1)")
    m = len(superpoints)
    table = np.zeros((m, num_prompts), dtype=np.int64)
    if m == 0:
        return table
    if num_points is None:
        num_points = 1 + max(int(sp.point_indices.max()) for sp in superpoints)
    labels = np.full(num_points, -1, dtype=np.int64)
    sizes = np.zeros(m, dtype=np.int64)
    for row, sp in enumerate(superpoints):
        labels[sp.point_indices] = row
        sizes[row] = len(sp.point_indices)

    seen = set()
    for bp in back_projections:
        key = (bp.prompt_id, bp.view_id)
        if key in seen:
            raise ValueError(f"duplicate back-projection for prompt {bp.prompt_id}, view {bp.view_id}")
        seen.add(key)
        if not 0 <= bp.prompt_id < num_prompts:
            raise ValueError(f"prompt id {bp.prompt_id} outside table")
        idx = np.unique(np.asarray(bp.point_indices, dtype=np.int64))
        rows = labels[idx[idx < num_points]]  # points past the table range belong to no superpoint
        inter = np.bincount(rows[rows >= 0], minlength=m)
        table[:, bp.prompt_id] += (inter / sizes) > theta
    return table


def assemble_coarse_masks(table, superpoints, view_masks=None):
    """Assign each superpoint to the prompt column holding its row maximum.

    All-zero rows stay unassigned; ties go to the lower prompt index. Columns no
    superpoint chose are dropped. Returns ``(masks, column_ids)`` where
    ``column_ids[i]`` is the table column of ``masks[i]``.
    """
    table = np.asarray(table)
    if table.shape[0] != len(superpoints):
        raise ValueError("table rows do not match superpoint count")
    view_masks = view_masks or {}
    choice = np.argmax(table, axis=1)
    assigned = table.max(axis=1, initial=0) > 0
    masks = []
    for col in range(table.shape[1]):
        rows = np.flatnonzero(assigned & (choice == col))
        if len(rows) == 0:
            continue
        pts = np.sort(np.concatenate([superpoints[r].point_indices for r in rows]))
        masks.append(CoarseMask(col, pts, [superpoints[r].id for r in rows], list(view_masks.get(col, []))))
    return masks, [m.id for m in masks]


def write_table_csv(path, table):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"prompt_{n}" for n in range(table.shape[1])])
        writer.writerows(table.tolist())
