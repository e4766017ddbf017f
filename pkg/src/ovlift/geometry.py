"""Pinhole projection, depth visibility, view ranking and mask back-projection."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .scene_io import PosedFrame

DEFAULT_EPS_DEPTH = 0.05


class PixelPoint(NamedTuple):
    u: float
    v: float
    z: float


@dataclass(frozen=True)
class BackProjection:
    prompt_id: int
    view_id: int
    point_indices: np.ndarray


def project_points(points, frame: PosedFrame):
    """Vectorised projection: returns (u, v, z, in_image) for an N×3 array."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam = pts @ frame.rotation.T + frame.translation
    z = cam[:, 2]
    k = frame.intrinsics
    front = z > 0
    safe_z = np.where(front, z, 1.0)
    u = k.fx * cam[:, 0] / safe_z + k.cx
    v = k.fy * cam[:, 1] / safe_z + k.cy
    ok = front & (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
    return u, v, z, ok


def project_point(p, frame: PosedFrame) -> Optional[PixelPoint]:
    u, v, z, ok = project_points(p, frame)
    if not ok[0]:
        return None
    return PixelPoint(float(u[0]), float(v[0]), float(z[0]))


def round_pixel(x):
    """Nearest integer, halves rounded up."""
    return np.floor(np.asarray(x) + 0.5).astype(np.int64)


def pixel_lookup(points, frame: PosedFrame, eps_depth: float = DEFAULT_EPS_DEPTH):
    """Flat pixel index of every point that is visible in ``frame``, −1 otherwise.

    Visible means: projects inside the image, the rounded pixel is inside the image
    and holds valid depth, and that depth is within ``eps_depth`` of the point's
    camera depth.
    """
    if eps_depth <= 0:
        raise ValueError("eps_depth must be positive")
    u, v, z, ok = project_points(points, frame)
    ui, vi = round_pixel(u), round_pixel(v)
    ok &= (ui >= 0) & (ui < frame.width) & (vi >= 0) & (vi < frame.height)
    flat = np.full(len(z), -1, dtype=np.int64)
    idx = np.flatnonzero(ok)
    pix = vi[idx] * frame.width + ui[idx]
    d = frame.depth.reshape(-1)[pix]
    good = (d > 0) & (np.abs(z[idx] - d) <= eps_depth)
    flat[idx[good]] = pix[good]
    return flat


def visible_points(point_indices, points, frame: PosedFrame, eps_depth: float = DEFAULT_EPS_DEPTH) -> np.ndarray:
    point_indices = np.asarray(point_indices, dtype=np.int64)
    flat = pixel_lookup(points[point_indices], frame, eps_depth)
    return point_indices[flat >= 0]


def rank_views(prompt_points, frames, T: int, eps_depth: float = DEFAULT_EPS_DEPTH):
    """Top ``T`` frames by number of visible prompt points; frames seeing nothing are dropped."""
    if T < 1:
        raise ValueError("T must be >= 1")
    counts = [int((pixel_lookup(prompt_points, fr, eps_depth) >= 0).sum()) for fr in frames]
    return rank_by_counts(frames, counts, T)


def rank_by_counts(frames, counts, T: int):
    order = sorted((i for i in range(len(frames)) if counts[i] > 0),
                   key=lambda i: (-counts[i], frames[i].frame_id))
    return [(frames[i], int(counts[i])) for i in order[:T]]


def sample_pixel_prompts(pixels, k: int) -> list:
    """Farthest-point sampling in (u, v), seeded at the pixel nearest the centroid.

    Returns indices into ``pixels``; distance ties go to the lower index.
    """
    if len(pixels) == 0:
        raise ValueError("need at least one pixel to sample prompts from")
    if k < 1:
        raise ValueError("k must be >= 1")
    uv = np.array([(p[0], p[1]) for p in pixels], dtype=np.float64)
    centroid = uv.mean(axis=0)
    chosen = [int(np.argmin(((uv - centroid) ** 2).sum(axis=1)))]
    dist = ((uv - uv[chosen[0]]) ** 2).sum(axis=1)
    while len(chosen) < min(k, len(uv)):
        nxt = int(np.argmax(dist))  # argmax returns the first maximum
        chosen.append(nxt)
        dist = np.minimum(dist, ((uv - uv[nxt]) ** 2).sum(axis=1))
    return chosen


def back_project_mask(frame: PosedFrame, mask2d, scene_points, eps_depth: float = DEFAULT_EPS_DEPTH,
                      prompt_id: int = -1, lookup=None) -> BackProjection:
    """Scene points that are visible in ``frame`` and land on a true pixel of ``mask2d``.

    ``lookup`` may carry a precomputed :func:`pixel_lookup` for this frame.
    """
    mask2d = np.asarray(mask2d, dtype=bool)
    if mask2d.shape != (frame.height, frame.width):
        raise ValueError(f"mask is {mask2d.shape}, frame is {(frame.height, frame.width)}")
    if lookup is None:
        lookup = pixel_lookup(scene_points, frame, eps_depth)
    vis = np.flatnonzero(lookup >= 0)
    hit = mask2d.reshape(-1)[lookup[vis]]
    return BackProjection(prompt_id, frame.frame_id, vis[hit])
