"""Synthetic scenes with known instances, point-splat depth rendering and an oracle backend."""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backends import Backend, DEFAULT_DIM
from .geometry import round_pixel
from .scene_io import GroundTruth, Intrinsics, PosedFrame, Scene

SHAPES = ("box", "sphere", "plane")


@dataclass
class ObjectSpec:
    shape: str
    label: str
    position: tuple = (0.0, 0.0, 0.0)
    rotation: tuple = (1, 0, 0, 0, 1, 0, 0, 0, 1)  # row-major, object-to-world
    size: tuple = (1.0, 1.0, 1.0)  # box: full extents; sphere: (radius,); plane: (width, height)
    points: int = 1000

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.points < 1:
            raise ValueError("points_per_object must be >= 1")


@dataclass
class SceneSpec:
    objects: list
    camera_path: list  # 4x4 camera-to-world matrices (OpenCV axes)
    intrinsics: Intrinsics
    sigma: float = 0.0  # point jitter, metres
    sigma_e: float = 0.0  # embedding jitter
    distractor_tags: list = field(default_factory=list)
    embedding_dim: int = DEFAULT_DIM
    px_radius: int = 1

    def __post_init__(self):
        if not self.objects:
            raise ValueError("scene spec needs at least one object")
        if not self.camera_path:
            raise ValueError("scene spec needs at least one camera pose")
        if self.sigma < 0 or self.sigma_e < 0:
            raise ValueError("noise levels must be non-negative")
        self.intrinsics.validate()

    @classmethod
    def from_dict(cls, d):
        k = d["intrinsics"]
        intr = Intrinsics(float(k["fx"]), float(k["fy"]), float(k["cx"]), float(k["cy"]),
                          int(k["width"]), int(k["height"]))
        objects = [
            ObjectSpec(o["shape"], o["label"], tuple(o.get("position", (0, 0, 0))),
                       tuple(o.get("rotation", (1, 0, 0, 0, 1, 0, 0, 0, 1))),
                       tuple(np.atleast_1d(o.get("size", 1.0)).tolist()), int(o.get("points", 1000)))
            for o in d["objects"]
        ]
        cams = d["camera_path"]
        if isinstance(cams, dict):  # {"orbit": {...}}
            cams = orbit_poses(**cams["orbit"])
        else:
            cams = [np.asarray(c, dtype=np.float64).reshape(4, 4) for c in cams]
        return cls(objects, cams, intr, float(d.get("sigma", 0.0)), float(d.get("sigma_e", 0.0)),
                   list(d.get("distractor_tags", [])), int(d.get("embedding_dim", DEFAULT_DIM)),
                   int(d.get("px_radius", 1)))

    def to_dict(self):
        k = self.intrinsics
        return {
            "objects": [{"shape": o.shape, "label": o.label, "position": list(o.position),
                         "rotation": list(o.rotation), "size": list(o.size), "points": o.points}
                        for o in self.objects],
            "camera_path": [np.asarray(c).reshape(-1).tolist() for c in self.camera_path],
            "intrinsics": {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy, "width": k.width, "height": k.height},
            "sigma": self.sigma, "sigma_e": self.sigma_e, "distractor_tags": list(self.distractor_tags),
            "embedding_dim": self.embedding_dim, "px_radius": self.px_radius,
        }


def load_spec(path) -> SceneSpec:
    return SceneSpec.from_dict(json.loads(Path(path).read_text()))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world matrix with OpenCV axes (x right, y down, z forward)."""
    eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        raise ValueError("viewing direction is parallel to the up vector")
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    m = np.eye(4)
    m[:3, :3] = np.stack([x, y, z], axis=1)
    m[:3, 3] = eye
    return m


def orbit_poses(count=20, radius=3.5, center=(0.0, 0.0, 0.0), elevations=(35.0, -35.0)):
    """``count`` cameras circling ``center``, cycling through the given elevation angles (degrees)."""
    center = np.asarray(center, dtype=np.float64)
    poses = []
    for i in range(count):
        az = 2 * np.pi * i / count
        el = np.deg2rad(elevations[i % len(elevations)])
        eye = center + radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        poses.append(look_at(eye, center))
    return poses


def default_intrinsics(width=320, height=240, fov_deg=60.0) -> Intrinsics:
    f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2)
    return Intrinsics(f, f, width / 2 - 0.5, height / 2 - 0.5, width, height)


def make_spec(num_objects=4, total_points=50_000, num_frames=20, distractors=("blue", "wall", "lamp"),
              embedding_dim=DEFAULT_DIM, width=320, height=240, seed=0) -> SceneSpec:
    """Separated boxes and spheres on a ring, viewed by an orbit from above and below."""
    rng = np.random.default_rng(seed)
    labels = ["chair", "table", "cabinet", "ball", "box", "sofa", "bed", "desk"]
    objects = []
    per = total_points // num_objects
    for i in range(num_objects):
        ang = 2 * np.pi * i / num_objects
        pos = (1.3 * np.cos(ang), 1.3 * np.sin(ang), 0.0)
        yaw = rng.uniform(0, np.pi / 2)
        c, s = np.cos(yaw), np.sin(yaw)
        rot = (c, -s, 0, s, c, 0, 0, 0, 1)
        pts = per if i < num_objects - 1 else total_points - per * (num_objects - 1)
        if labels[i % len(labels)] == "ball":
            objects.append(ObjectSpec("sphere", "ball", pos, rot, (0.35,), pts))
        else:
            size = tuple(rng.uniform(0.45, 0.7, size=3).round(3).tolist())
            objects.append(ObjectSpec("box", labels[i % len(labels)], pos, rot, size, pts))
    return SceneSpec(objects, orbit_poses(num_frames, radius=4.0), default_intrinsics(width, height),
                     distractor_tags=list(distractors), embedding_dim=embedding_dim)


def _sample_surface(obj: ObjectSpec, rng) -> np.ndarray:
    n = obj.points
    if obj.shape == "box":
        ext = np.asarray(obj.size, dtype=np.float64).reshape(3)
        half = ext / 2
        areas = np.array([ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]]).repeat(2)
        face = rng.choice(6, size=n, p=areas / areas.sum())
        local = rng.uniform(-1, 1, size=(n, 3)) * half
        axis, sign = face // 2, np.where(face % 2 == 0, 1.0, -1.0)
        local[np.arange(n), axis] = sign * half[axis]
    elif obj.shape == "sphere":
        d = rng.normal(size=(n, 3))
        local = float(obj.size[0]) * d / np.linalg.norm(d, axis=1, keepdims=True)
    else:
        w, h = float(obj.size[0]), float(obj.size[1] if len(obj.size) > 1 else obj.size[0])
        local = np.zeros((n, 3))
        local[:, 0] = rng.uniform(-w / 2, w / 2, n)
        local[:, 1] = rng.uniform(-h / 2, h / 2, n)
    rot = np.asarray(obj.rotation, dtype=np.float64).reshape(3, 3)
    return local @ rot.T + np.asarray(obj.position, dtype=np.float64)


def splat(points, rotation, translation, intrinsics: Intrinsics, px_radius: int = 1):
    """Z-buffer point splatting. Returns (depth, winner) where winner holds the index of
    the nearest point per pixel (lowest index on exact ties) or −1."""
    if px_radius < 0:
        raise ValueError("px_radius must be >= 0")
    w, h = intrinsics.width, intrinsics.height
    depth = np.full(h * w, np.inf)
    winner = np.full(h * w, -1, dtype=np.int64)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return np.zeros((h, w)), winner.reshape(h, w)
    cam = points @ np.asarray(rotation).T + np.asarray(translation)
    z = cam[:, 2]
    front = z > 0
    safe = np.where(front, z, 1.0)
    u = intrinsics.fx * cam[:, 0] / safe + intrinsics.cx
    v = intrinsics.fy * cam[:, 1] / safe + intrinsics.cy
    ok = front & (u >= 0) & (u < w) & (v >= 0) & (v < h)
    idx = np.flatnonzero(ok)
    ui, vi, zi = round_pixel(u[idx]), round_pixel(v[idx]), z[idx]

    pix_all, z_all, id_all = [], [], []
    r = range(-px_radius, px_radius + 1)
    for dy in r:
        for dx in r:
            x, y = ui + dx, vi + dy
            keep = (x >= 0) & (x < w) & (y >= 0) & (y < h)
            pix_all.append(y[keep] * w + x[keep])
            z_all.append(zi[keep])
            id_all.append(idx[keep])
    pix, zz, ids = np.concatenate(pix_all), np.concatenate(z_all), np.concatenate(id_all)
    np.minimum.at(depth, pix, zz)
    win = zz == depth[pix]
    winner[:] = np.iinfo(np.int64).max
    np.minimum.at(winner, pix[win], ids[win])
    empty = ~np.isfinite(depth)
    depth[empty] = 0.0
    winner[empty] = -1
    return depth.reshape(h, w), winner.reshape(h, w)


def render_depth(points, frame_or_pose, intrinsics: Intrinsics | None = None, px_radius: int = 1) -> np.ndarray:
    """Depth map of ``points`` seen from a PosedFrame or a 4x4 camera-to-world pose."""
    if isinstance(frame_or_pose, PosedFrame):
        rot, trans, intrinsics = frame_or_pose.rotation, frame_or_pose.translation, frame_or_pose.intrinsics
    else:
        c2w = np.asarray(frame_or_pose, dtype=np.float64)
        rot = c2w[:3, :3].T
        trans = -rot @ c2w[:3, 3]
    return splat(points, rot, trans, intrinsics, px_radius)[0]


def generate_scene(spec: SceneSpec, seed: int = 0):
    """Sample the spec's objects and render one depth frame per camera pose."""
    rng = np.random.default_rng(seed)
    chunks, ids = [], []
    labels = {}
    for k, obj in enumerate(spec.objects, start=1):
        pts = _sample_surface(obj, rng)
        if spec.sigma > 0:
            pts = pts + rng.normal(0.0, spec.sigma, size=pts.shape)
        chunks.append(pts)
        ids.append(np.full(len(pts), k, dtype=np.int64))
        labels[k] = obj.label
    points = np.concatenate(chunks)
    gt = GroundTruth(np.concatenate(ids), labels)

    frames = []
    for fid, c2w in enumerate(spec.camera_path):
        c2w = np.asarray(c2w, dtype=np.float64)
        rot = c2w[:3, :3].T
        trans = -rot @ c2w[:3, 3]
        depth, _ = splat(points, rot, trans, spec.intrinsics, spec.px_radius)
        frames.append(PosedFrame(fid, spec.intrinsics, rot, trans, depth, f"synth://frame_{fid}"))
    return Scene(points, None, None, frames), gt


def _orthonormal_rows(count, dim, seed):
    if count > dim:
        raise ValueError(f"need {count} orthonormal vectors but embedding_dim is {dim}")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(dim, count)))
    return q.T


class OracleBackend(Backend):
    """Ground-truth-driven stand-in for the segmenter, tagger and embedder.

    * segment: silhouette of the GT instance holding most of the prompt pixels;
    * tag: labels of the GT instances visible in the frame plus distractors;
    * embed: one orthonormal vector per tag; crops get their instance's label
      vector plus ``sigma_e`` jitter, renormalised.
    """

    def __init__(self, scene: Scene, gt: GroundTruth, spec: SceneSpec, seed: int = 0):
        self.seed = seed
        self.sigma_e = spec.sigma_e
        self.distractors = [t.casefold() for t in spec.distractor_tags]
        self.labels = {k: v for k, v in gt.labels.items()}
        vocab = []
        for t in [v.casefold() for _, v in sorted(self.labels.items())] + self.distractors:
            if t not in vocab:
                vocab.append(t)
        self.vocab = vocab
        self.dim = spec.embedding_dim
        self.basis = _orthonormal_rows(min(self.dim, len(vocab) + 64), self.dim, seed)
        self.instance_maps = {}
        for fr in scene.frames:
            _, winner = splat(scene.points, fr.rotation, fr.translation, fr.intrinsics, spec.px_radius)
            inst = np.where(winner >= 0, gt.instance_ids[np.maximum(winner, 0)], -1)
            self.instance_maps[fr.frame_id] = inst
        self._seg_owner = {}

    def _text_vector(self, text):
        t = text.casefold()
        if t in self.vocab:
            return self.basis[self.vocab.index(t)]
        spare = len(self.basis) - len(self.vocab)
        if spare <= 0:
            raise ValueError("embedding dimension too small for unknown tags")
        return self.basis[len(self.vocab) + zlib.crc32(t.encode()) % spare]

    def _majority(self, values):
        values = values[values > 0]
        if len(values) == 0:
            return None
        ids, counts = np.unique(values, return_counts=True)
        return int(ids[np.argmax(counts)])

    def segment(self, frame, prompt_id, pixels):
        inst_map = self.instance_maps[frame.frame_id]
        h, w = inst_map.shape
        uv = np.asarray([(p[0], p[1]) for p in pixels], dtype=np.float64).reshape(-1, 2)
        ui = np.clip(round_pixel(uv[:, 0]), 0, w - 1)
        vi = np.clip(round_pixel(uv[:, 1]), 0, h - 1)
        owner = self._majority(inst_map[vi, ui])
        if owner is None:
            return None
        self._seg_owner[(frame.frame_id, prompt_id)] = owner
        return inst_map == owner

    def tag(self, frame):
        present = np.unique(self.instance_maps[frame.frame_id])
        return [self.labels[int(i)] for i in present if i > 0] + list(self.distractors)

    def embed_image(self, frame, box, prompt_id):
        owner = self._seg_owner.get((frame.frame_id, prompt_id))
        if owner is None and box is not None:
            x0, y0, x1, y1 = box
            owner = self._majority(self.instance_maps[frame.frame_id][y0:y1, x0:x1].reshape(-1))
        if owner is None:
            return None
        vec = self._text_vector(self.labels[owner]).copy()
        if self.sigma_e > 0:
            rng = np.random.default_rng([self.seed, int(frame.frame_id), int(prompt_id)])
            vec = vec + rng.normal(0.0, self.sigma_e, size=vec.shape)
        return vec / np.linalg.norm(vec)

    def embed_texts(self, texts):
        return np.stack([self._text_vector(t) for t in texts])
