"""External perception backends: segmentation, image tagging and embeddings.

Three realisations share the :class:`Backend` interface:

* :class:`FixtureBackend` replays a recorded fixture store from disk;
* :class:`SubprocessBackend` talks newline-delimited JSON to a child process;
* the synthetic oracle in :mod:`ovlift.synthbench`.

:class:`BackendBundle` wraps any of them and enforces the output contract
(mask shape, unit-norm embeddings). :class:`RecordingBackend` captures calls into
a fixture store.

Fixture store layout::

    masks/frame_<f>/prompt_<p>.rle   line 1 "H W", line 2 run-length tokens
    tags/frame_<f>.json              ["tag", ...]
    embeds/manifest.json             {"dim": D, "offsets": {key: record}}
    embeds/vectors.f32               little-endian float32, D per record

Embedding keys are ``text:<tag>`` and ``crop:<frame>:<prompt>``.
"""

from __future__ import annotations

import json
import logging
import queue
import shlex
import subprocess
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_DIM = 768
SUBPROCESS_TIMEOUT = 60.0


class BackendError(RuntimeError):
    pass


class RLEError(ValueError):
    pass


def encode_rle(mask) -> str:
    """Row-major runs, led by the value of the first run (always written as 0)."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    if flat.size == 0:
        return "0"
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return " ".join(["0"] + [str(r) for r in runs])


def decode_rle(text: str, height: int, width: int) -> np.ndarray:
    """Inverse of :func:`encode_rle`: first token is the first run's value (0/1), then run lengths."""
    try:
        tokens = [int(t) for t in text.split()]
    except ValueError as exc:
        raise RLEError(f"non-integer RLE token: {exc}") from exc
    if not tokens or tokens[0] not in (0, 1):
        raise RLEError("RLE must start with the first run's value, 0 or 1")
    runs = tokens[1:]
    if any(r < 0 for r in runs):
        raise RLEError("negative run length")
    if sum(runs) != height * width:
        raise RLEError(f"runs sum to {sum(runs)}, expected {height}x{width}={height * width}")
    values = (np.arange(len(runs)) + tokens[0]) % 2
    return np.repeat(values.astype(bool), runs).reshape(height, width)


@dataclass
class MaskRecord:
    frame_id: int
    prompt_id: int
    mask: np.ndarray

    def to_text(self) -> str:
        h, w = self.mask.shape
        return f"{h} {w}\n{encode_rle(self.mask)}\n"

    @classmethod
    def from_text(cls, text, frame_id, prompt_id):
        lines = text.strip().splitlines()
        if len(lines) < 2:
            raise RLEError("mask record needs a size line and a run line")
        h, w = (int(v) for v in lines[0].split())
        return cls(frame_id, prompt_id, decode_rle(lines[1], h, w))


def crop_box(mask, pad: float = 0.1):
    """Axis-aligned box of the true pixels, padded by ``pad`` of its size per side, clamped.

    Returns (x0, y0, x1, y1) with exclusive upper bounds, or None for an empty mask.
    """
    mask = np.asarray(mask, dtype=bool)
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None
    h, w = mask.shape
    x0, x1, y0, y1 = xs.min(), xs.max() + 1, ys.min(), ys.max() + 1
    px, py = int(np.ceil(pad * (x1 - x0))), int(np.ceil(pad * (y1 - y0)))
    return (int(max(0, x0 - px)), int(max(0, y0 - py)), int(min(w, x1 + px)), int(min(h, y1 + py)))


def normalize_rows(mat) -> np.ndarray:
    mat = np.atleast_2d(np.asarray(mat, dtype=np.float64))
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise BackendError("backend returned a zero embedding")
    return mat / norms


class Backend:
    """Interface of the perception trio. Frames are :class:`PosedFrame`-like objects."""

    def segment(self, frame, prompt_id, pixels):
        """Boolean H×W mask for the pixel prompts, or None when unavailable."""
        raise NotImplementedError

    def tag(self, frame):
        raise NotImplementedError

    def embed_image(self, frame, box, prompt_id):
        """Embedding of the crop ``box`` of ``frame`` (or None when unavailable)."""
        raise NotImplementedError

    def embed_texts(self, texts):
        raise NotImplementedError

    def close(self):
        pass


class BackendBundle(Backend):
    """Contract-enforcing wrapper around a raw backend."""

    def __init__(self, backend: Backend):
        self.backend = backend

    def segment(self, frame, prompt_id, pixels):
        mask = self.backend.segment(frame, prompt_id, pixels)
        if mask is None:
            return None
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (frame.height, frame.width):
            raise BackendError(
                f"mask for frame {frame.frame_id} prompt {prompt_id} is {mask.shape}, "
                f"frame is {(frame.height, frame.width)}"
            )
        return mask

    def tag(self, frame):
        return [str(t) for t in self.backend.tag(frame)]

    def embed_image(self, frame, box, prompt_id):
        vec = self.backend.embed_image(frame, box, prompt_id)
        if vec is None:
            return None
        return normalize_rows(vec)[0]

    def embed_texts(self, texts):
        if not texts:
            return np.zeros((0, 0))
        mat = normalize_rows(self.backend.embed_texts(list(texts)))
        if mat.shape[0] != len(texts):
            raise BackendError(f"asked for {len(texts)} text embeddings, got {mat.shape[0]}")
        return mat

    def close(self):
        self.backend.close()


class FixtureStore:
    """Read-only view of a recorded fixture directory."""

    def __init__(self, root):
        self.root = Path(root)
        if not self.root.is_dir():
            raise BackendError(f"fixture store {self.root} does not exist")
        manifest_path = self.root / "embeds" / "manifest.json"
        if manifest_path.is_file():
            manifest = json.loads(manifest_path.read_text())
            self.dim = int(manifest["dim"])
            self.offsets = {k: int(v) for k, v in manifest["offsets"].items()}
            raw = np.fromfile(self.root / "embeds" / "vectors.f32", dtype="<f4")
            if raw.size % self.dim:
                raise BackendError("embedding file size is not a multiple of dim")
            self.vectors = raw.reshape(-1, self.dim)
            self.vectors.setflags(write=False)
        else:
            self.dim, self.offsets, self.vectors = DEFAULT_DIM, {}, np.zeros((0, DEFAULT_DIM), np.float32)

    def mask(self, frame_id, prompt_id):
        path = self.root / "masks" / f"frame_{frame_id}" / f"prompt_{prompt_id}.rle"
        if not path.is_file():
            return None
        return MaskRecord.from_text(path.read_text(), frame_id, prompt_id).mask

    def tags(self, frame_id):
        path = self.root / "tags" / f"frame_{frame_id}.json"
        if not path.is_file():
            return []
        return list(json.loads(path.read_text()))

    def vector(self, key):
        off = self.offsets.get(key)
        if off is None:
            return None
        return self.vectors[off].astype(np.float64)


def fixture_segment(store: FixtureStore, frame_id, prompt_id):
    return store.mask(frame_id, prompt_id)


def fixture_embed_texts(store: FixtureStore, tags) -> np.ndarray:
    missing = [t for t in tags if f"text:{t}" not in store.offsets]
    if missing:
        raise BackendError(f"no recorded text embedding for tags: {', '.join(missing)}")
    return normalize_rows(np.stack([store.vector(f"text:{t}") for t in tags]))


class FixtureBackend(Backend):
    """Replays a fixture store. Pixel prompts are ignored: records are keyed by (frame, prompt)."""

    def __init__(self, store):
        self.store = store if isinstance(store, FixtureStore) else FixtureStore(store)

    def segment(self, frame, prompt_id, pixels):
        return fixture_segment(self.store, frame.frame_id, prompt_id)

    def tag(self, frame):
        return self.store.tags(frame.frame_id)

    def embed_image(self, frame, box, prompt_id):
        return self.store.vector(f"crop:{frame.frame_id}:{prompt_id}")

    def embed_texts(self, texts):
        return fixture_embed_texts(self.store, texts)


class RecordingBackend(Backend):
    """Forwards to ``inner`` and remembers every answer so it can be saved as a fixture store."""

    def __init__(self, inner: Backend):
        self.inner = inner
        self.masks = {}
        self.tags = {}
        self.vectors = {}
        self._lock = threading.Lock()

    def segment(self, frame, prompt_id, pixels):
        mask = self.inner.segment(frame, prompt_id, pixels)
        if mask is not None:
            with self._lock:
                self.masks[(frame.frame_id, prompt_id)] = np.asarray(mask, dtype=bool)
        return mask

    def tag(self, frame):
        tags = list(self.inner.tag(frame))
        with self._lock:
            self.tags[frame.frame_id] = tags
        return tags

    def embed_image(self, frame, box, prompt_id):
        vec = self.inner.embed_image(frame, box, prompt_id)
        if vec is not None:
            with self._lock:
                self.vectors[f"crop:{frame.frame_id}:{prompt_id}"] = np.asarray(vec, dtype=np.float64)
        return vec

    def embed_texts(self, texts):
        mat = np.atleast_2d(self.inner.embed_texts(texts))
        with self._lock:
            for t, row in zip(texts, mat):
                self.vectors[f"text:{t}"] = np.asarray(row, dtype=np.float64)
        return mat

    def record_texts(self, texts):
        """Pre-record text embeddings, e.g. for tags filtered out during the capture run."""
        if texts:
            self.embed_texts(list(texts))

    def save(self, root):
        root = Path(root)
        for (fid, pid), mask in sorted(self.masks.items()):
            d = root / "masks" / f"frame_{fid}"
            d.mkdir(parents=True, exist_ok=True)
            (d / f"prompt_{pid}.rle").write_text(MaskRecord(fid, pid, mask).to_text())
        (root / "tags").mkdir(parents=True, exist_ok=True)
        for fid, tags in sorted(self.tags.items()):
            (root / "tags" / f"frame_{fid}.json").write_text(json.dumps(tags))
        (root / "embeds").mkdir(parents=True, exist_ok=True)
        keys = sorted(self.vectors)
        dim = len(self.vectors[keys[0]]) if keys else DEFAULT_DIM
        mat = np.stack([self.vectors[k] for k in keys]).astype("<f4") if keys else np.zeros((0, dim), "<f4")
        mat.tofile(root / "embeds" / "vectors.f32")
        manifest = {"dim": dim, "offsets": {k: i for i, k in enumerate(keys)}}
        (root / "embeds" / "manifest.json").write_text(json.dumps(manifest, indent=1))


class SubprocessBackend(Backend):
    """Newline-delimited JSON client for a backend child process.

    One request is in flight at a time; every request carries an ``id`` that the
    child must echo.
    """

    def __init__(self, command, timeout: float = SUBPROCESS_TIMEOUT, cwd=None):
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout
        self._next_id = 0
        self._lock = threading.Lock()
        self._lines = queue.Queue()
        self._stderr = []
        try:
            self.proc = subprocess.Popen(
                argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE, stderr=subprocess.PIPE,
                text=True, bufsize=1, cwd=cwd,
            )
        except OSError as exc:
            raise BackendError(f"cannot start backend {argv!r}: {exc}") from exc
        threading.Thread(target=self._pump, args=(self.proc.stdout, self._lines), daemon=True).start()
        threading.Thread(target=self._drain_stderr, daemon=True).start()

    @staticmethod
    def _pump(stream, sink):
        for line in stream:
            sink.put(line)
        sink.put(None)

    def _drain_stderr(self):
        for line in self.proc.stderr:
            self._stderr.append(line.rstrip("\n"))
            del self._stderr[:-50]

    def _diagnostics(self):
        code = self.proc.poll()
        tail = "\n".join(self._stderr[-10:])
        return f"exit code {code}; stderr tail:\n{tail}" if tail else f"exit code {code}"

    def call(self, request: dict) -> dict:
        with self._lock:
            req_id = self._next_id
            self._next_id += 1
            msg = dict(request, id=req_id)
            try:
                self.proc.stdin.write(json.dumps(msg) + "\n")
                self.proc.stdin.flush()
            except (BrokenPipeError, OSError, ValueError) as exc:
                raise BackendError(f"backend pipe closed during {request.get('op')!r}: {self._diagnostics()}") from exc
            try:
                line = self._lines.get(timeout=self.timeout)
            except queue.Empty:
                raise BackendError(f"backend timed out after {self.timeout}s on {request.get('op')!r}") from None
            if line is None:
                self.proc.wait(timeout=5)
                raise BackendError(f"backend exited during {request.get('op')!r}: {self._diagnostics()}")
            try:
                resp = json.loads(line)
            except json.JSONDecodeError as exc:
                raise BackendError(f"malformed backend response {line[:200]!r}") from exc
            if not isinstance(resp, dict) or resp.get("id") != req_id:
                raise BackendError(f"backend response id mismatch: sent {req_id}, got {resp!r:.200}")
            if resp.get("error"):
                raise BackendError(f"backend error on {request.get('op')!r}: {resp['error']}")
            return resp

    def segment(self, frame, prompt_id, pixels):
        resp = self.call({"op": "segment", "frame": frame.frame_id, "image": frame.image_ref,
                          "prompt": prompt_id, "points": [[float(u), float(v)] for u, v in pixels]})
        if resp.get("mask_rle") is None:
            return None
        return decode_rle(resp["mask_rle"], int(resp["height"]), int(resp["width"]))

    def tag(self, frame):
        return self.call({"op": "tag", "frame": frame.frame_id, "image": frame.image_ref})["tags"]

    def embed_image(self, frame, box, prompt_id):
        resp = self.call({"op": "embed_image", "frame": frame.frame_id, "image": frame.image_ref,
                          "prompt": prompt_id, "box": list(box)})
        vec = resp.get("vector")
        return None if vec is None else np.asarray(vec, dtype=np.float64)

    def embed_texts(self, texts):
        return np.asarray(self.call({"op": "embed_text", "texts": list(texts)})["vectors"], dtype=np.float64)

    def close(self):
        if self.proc.poll() is None:
            try:
                self.proc.stdin.close()
            except OSError:
                pass
            try:
                self.proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()
