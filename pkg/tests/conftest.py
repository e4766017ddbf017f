import json

import numpy as np
import pytest

from ovlift.scene_io import write_depth_png
from ovlift.ply import write_ply
from ovlift.synthbench import OracleBackend, generate_scene, make_spec


def write_minimal_scene(root, n_frames=1, n_poses=None, skip_depth=()):
    """3 points, ``n_frames`` 2x2 frames looking down +z from the origin."""
    root.mkdir(parents=True, exist_ok=True)
    write_ply(root / "points.ply", np.array([[0.0, 0, 2], [0.1, 0, 2], [0, 0.1, 2]]))
    (root / "intrinsics.txt").write_text("2 2 1 1 2 2\n")
    (root / "depth").mkdir(exist_ok=True)
    (root / "pose").mkdir(exist_ok=True)
    entries = []
    for fid in range(n_frames):
        entries.append({"frame_id": fid, "depth": f"depth/{fid}.png", "pose": f"pose/{fid}.txt"})
        if fid not in skip_depth:
            write_depth_png(root / f"depth/{fid}.png", np.full((2, 2), 2.0))
    for fid in range(n_frames if n_poses is None else n_poses):
        np.savetxt(root / f"pose/{fid}.txt", np.eye(4))
    (root / "frames.json").write_text(json.dumps({"frames": entries}))
    return root


@pytest.fixture
def minimal_scene_dir(tmp_path):
    return write_minimal_scene(tmp_path / "scene")


@pytest.fixture(scope="session")
def small_synth():
    """Three separated objects, 6k points, 12-view orbit, 64-d embeddings."""
    spec = make_spec(num_objects=3, total_points=6000, num_frames=12, embedding_dim=64)
    scene, gt = generate_scene(spec, seed=0)
    return spec, scene, gt


@pytest.fixture
def oracle(small_synth):
    spec, scene, gt = small_synth
    return OracleBackend(scene, gt, spec)


ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[k])
