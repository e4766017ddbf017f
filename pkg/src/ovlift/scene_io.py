"""Scene containers, the on-disk scene format, frame sampling and box-based ground truth.

On-disk layout of a scene directory::

    points.ply          x/y/z (+ optional red/green/blue, edge/face elements)
    intrinsics.txt      fx fy cx cy width height
    frames.json         {"frames": [{"frame_id": 0, "depth": "depth/0.png",
                                     "pose": "pose/0.txt", "image": "color/0.jpg"}, ...]}
    depth/<id>.png      16-bit single channel, millimetres, 0 = invalid
    pose/<id>.txt       4x4 camera-to-world matrix, row-major
    gt_boxes.json       optional, [{center, half_extents, rotation, label}, ...]
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .ply import PlyError, read_ply, write_ply

logger = logging.getLogger(__name__)

ORTHO_TOL = 1e-6


class SceneLoadError(RuntimeError):
    """A scene file is missing or unreadable."""


class SceneConsistencyError(SceneLoadError):
    """Scene files disagree with each other (counts, sizes)."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def validate(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


def _check_rotation(rotation: np.ndarray, what: str):
    if rotation.shape != (3, 3):
        raise ValueError(f"{what}: rotation must be 3x3")
    if not np.allclose(rotation @ rotation.T, np.eye(3), atol=ORTHO_TOL) or abs(np.linalg.det(rotation) - 1) > ORTHO_TOL:
        raise ValueError(f"{what}: rotation is not orthonormal with det +1")


@dataclass(eq=False)
class PosedFrame:
    frame_id: int
    intrinsics: Intrinsics
    rotation: np.ndarray  # world-to-camera
    translation: np.ndarray
    depth: np.ndarray  # H×W metres, 0 = invalid
    image_ref: str = ""

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.intrinsics.validate()
        _check_rotation(self.rotation, f"frame {self.frame_id}")
        if self.depth.shape != (self.height, self.width):
            raise SceneConsistencyError(
                f"frame {self.frame_id}: depth is {self.depth.shape}, expected {(self.height, self.width)}"
            )
        if not np.all(np.isfinite(self.depth)) or np.any(self.depth < 0):
            raise ValueError(f"frame {self.frame_id}: depth must be finite and non-negative")

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    @classmethod
    def from_cam_to_world(cls, frame_id, intrinsics, cam_to_world, depth, image_ref=""):
        cam_to_world = np.asarray(cam_to_world, dtype=np.float64)
        rot = cam_to_world[:3, :3].T
        trans = -rot @ cam_to_world[:3, 3]
        return cls(frame_id, intrinsics, rot, trans, depth, image_ref)

    @property
    def world_to_cam(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def cam_to_world(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.T
        m[:3, 3] = -self.rotation.T @ self.translation
        return m


@dataclass(eq=False)
class Scene:
    points: np.ndarray
    colors: Optional[np.ndarray] = None
    mesh_edges: Optional[np.ndarray] = None
    frames: list = field(default_factory=list)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) < 1:
            raise ValueError("scene needs at least one point")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")
        if self.mesh_edges is not None:
            e = np.asarray(self.mesh_edges, dtype=np.int64).reshape(-1, 2)
            if e.size and (e.min() < 0 or e.max() >= len(self.points)):
                raise ValueError("mesh edge references an invalid point index")
            if np.any(e[:, 0] == e[:, 1]):
                raise ValueError("mesh edges may not be self-loops")
            self.mesh_edges = e
        self.frames = sorted(self.frames, key=lambda f: f.frame_id)

    @property
    def num_points(self) -> int:
        return len(self.points)


@dataclass
class GroundTruth:
    instance_ids: np.ndarray  # per point, 0 = unannotated
    labels: dict  # instance id -> label
    category_group: Optional[dict] = None  # label -> group tag

    def __post_init__(self):
        self.instance_ids = np.asarray(self.instance_ids, dtype=np.int64)
        self.labels = {int(k): v for k, v in self.labels.items()}
        missing = set(np.unique(self.instance_ids[self.instance_ids != 0]).tolist()) - set(self.labels)
        if missing:
            raise ValueError(f"instance ids without label: {sorted(missing)}")

    def instances(self):
        """(id, point indices, label) for every annotated instance, ascending id."""
        out = []
        for iid in sorted(self.labels):
            idx = np.flatnonzero(self.instance_ids == iid)
            if len(idx):
                out.append((iid, idx, self.labels[iid]))
        return out

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.savetxt(directory / "gt_instance_ids.txt", self.instance_ids, fmt="%d")
        payload = {"labels": {str(k): v for k, v in sorted(self.labels.items())}}
        if self.category_group:
            payload["category_group"] = self.category_group
        (directory / "gt_labels.json").write_text(json.dumps(payload, indent=2))

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        ids_path, labels_path = directory / "gt_instance_ids.txt", directory / "gt_labels.json"
        for p in (ids_path, labels_path):
            if not p.is_file():
                raise SceneLoadError(f"missing ground truth file {p}")
        ids = np.loadtxt(ids_path, dtype=np.int64, ndmin=1)
        payload = json.loads(labels_path.read_text())
        return cls(ids, payload["labels"], payload.get("category_group"))


@dataclass
class OrientedBox:
    center: np.ndarray
    half_extents: np.ndarray
    rotation: np.ndarray  # box-to-world
    label: str

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.half_extents = np.asarray(self.half_extents, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if np.any(self.half_extents <= 0):
            raise ValueError("box half extents must be strictly positive")
        _check_rotation(self.rotation, f"box {self.label!r}")

    @property
    def volume(self) -> float:
        return float(8.0 * np.prod(self.half_extents))

    def contains(self, points) -> np.ndarray:
        local = (np.asarray(points, dtype=np.float64) - self.center) @ self.rotation
        return np.all(np.abs(local) <= self.half_extents, axis=1)


def load_boxes(path) -> list:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SceneLoadError(f"cannot read boxes {path}: {exc}") from exc
    return [OrientedBox(b["center"], b["half_extents"], np.reshape(b["rotation"], (3, 3)), b["label"]) for b in raw]


def save_boxes(path, boxes):
    payload = [
        {"center": b.center.tolist(), "half_extents": b.half_extents.tolist(),
         "rotation": b.rotation.reshape(-1).tolist(), "label": b.label}
        for b in boxes
    ]
    Path(path).write_text(json.dumps(payload, indent=2))


def sample_frames(frames: Sequence, stride: int) -> list:
    if stride < 1:
        raise ValueError(f"frame stride must be >= 1, got {stride}")
    return list(frames[::stride])


def assign_instances_from_boxes(points, boxes: Sequence[OrientedBox], min_points: int = 20) -> GroundTruth:
    """Per-point instance ids from oriented boxes.

    Box ``i`` gets instance id ``i + 1``. A point inside several boxes goes to the
    smallest-volume box (lower index on ties). Boxes ending up with fewer than
    ``min_points`` points are dropped and their points left unannotated.
    """
    if min_points < 1:
        raise ValueError("min_points must be >= 1")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    ids = np.zeros(len(points), dtype=np.int64)
    if not boxes:
        return GroundTruth(ids, {})

    inside = np.stack([b.contains(points) for b in boxes])  # B×P
    order = sorted(range(len(boxes)), key=lambda i: (boxes[i].volume, i))
    best = np.full(len(points), -1, dtype=np.int64)
    for i in reversed(order):
        best[inside[i]] = i
    labels = {}
    for i in range(len(boxes)):
        members = best == i
        if members.sum() >= min_points:
            ids[members] = i + 1
            labels[i + 1] = boxes[i].label
    return GroundTruth(ids, labels)


def read_intrinsics(path) -> Intrinsics:
    try:
        vals = Path(path).read_text().split()
        fx, fy, cx, cy = (float(v) for v in vals[:4])
        width, height = int(float(vals[4])), int(float(vals[5]))
    except (OSError, ValueError, IndexError) as exc:
        raise SceneLoadError(f"cannot read intrinsics {path}: {exc}") from exc
    return Intrinsics(fx, fy, cx, cy, width, height)


def read_pose(path) -> np.ndarray:
    try:
        mat = np.loadtxt(path, dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise SceneLoadError(f"cannot read pose {path}: {exc}") from exc
    if mat.shape != (4, 4) or not np.all(np.isfinite(mat)):
        raise SceneLoadError(f"pose {path} is not a finite 4x4 matrix")
    return mat


def read_depth_png(path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            arr = np.array(img)
    except OSError as exc:
        raise SceneLoadError(f"cannot read depth {path}: {exc}") from exc
    if arr.ndim != 2:
        raise SceneLoadError(f"depth {path} must be single channel")
    return arr.astype(np.float64) / 1000.0


def write_depth_png(path, depth):
    mm = np.clip(np.rint(np.asarray(depth) * 1000.0), 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(path)


def load_scene(path) -> Scene:
    root = Path(path)
    if not root.is_dir():
        raise SceneLoadError(f"scene directory {root} does not exist")
    ply_path = root / "points.ply"
    if not ply_path.is_file():
        raise SceneLoadError(f"missing point file {ply_path}")
    try:
        points, colors, edges = read_ply(ply_path)
    except (OSError, PlyError, KeyError, ValueError) as exc:
        raise SceneLoadError(f"corrupt point file {ply_path}: {exc}") from exc

    manifest_path = root / "frames.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SceneLoadError(f"cannot read frames manifest {manifest_path}: {exc}") from exc
    entries = manifest["frames"] if isinstance(manifest, dict) else manifest
    intrinsics = read_intrinsics(root / "intrinsics.txt")

    pose_dir = root / "pose"
    pose_files = sorted(pose_dir.glob("*.txt")) if pose_dir.is_dir() else []
    if len(pose_files) != len(entries):
        raise SceneConsistencyError(
            f"frames manifest lists {len(entries)} frames but {len(pose_files)} pose files exist in {pose_dir}"
        )

    frames = []
    for entry in entries:
        fid = int(entry["frame_id"])
        depth_path = root / entry.get("depth", f"depth/{fid}.png")
        pose_path = root / entry.get("pose", f"pose/{fid}.txt")
        if not depth_path.is_file():
            raise SceneLoadError(f"frame {fid}: missing depth file {depth_path}")
        if not pose_path.is_file():
            raise SceneConsistencyError(f"frame {fid}: missing pose file {pose_path}")
        depth = read_depth_png(depth_path)
        if depth.shape != (intrinsics.height, intrinsics.width):
            raise SceneConsistencyError(
                f"frame {fid}: depth {depth_path} is {depth.shape[1]}x{depth.shape[0]}, "
                f"intrinsics say {intrinsics.width}x{intrinsics.height}"
            )
        frames.append(PosedFrame.from_cam_to_world(fid, intrinsics, read_pose(pose_path), depth,
                                                   entry.get("image", "")))
    logger.debug("loaded scene %s: %d points, %d frames", root, len(points), len(frames))
    return Scene(points, colors, edges, frames)


def save_scene(scene: Scene, path, boxes=None):
    """Write ``scene`` in the directory layout read by :func:`load_scene`."""
    root = Path(path)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    (root / "pose").mkdir(parents=True, exist_ok=True)
    write_ply(root / "points.ply", scene.points, scene.colors)
    if scene.frames:
        k = scene.frames[0].intrinsics
        (root / "intrinsics.txt").write_text(" ".join(repr(float(x)) for x in (k.fx, k.fy, k.cx, k.cy)) + f" {int(k.width)} {int(k.height)}\n")
    entries = []
    for fr in scene.frames:
        depth_rel, pose_rel = f"depth/{fr.frame_id}.png", f"pose/{fr.frame_id}.txt"
        write_depth_png(root / depth_rel, fr.depth)
        np.savetxt(root / pose_rel, fr.cam_to_world, fmt="%.17g")
        entries.append({"frame_id": fr.frame_id, "depth": depth_rel, "pose": pose_rel, "image": fr.image_ref})
    (root / "frames.json").write_text(json.dumps({"frames": entries}, indent=2))
    if boxes is not None:
        save_boxes(root / "gt_boxes.json", boxes)
