import numpy as np
import pytest

from ovlift.superpoints import (
    Superpoint,
    WeightedGraph,
    build_graph,
    estimate_normals,
    knn_indices,
    segment_superpoints,
    select_prompts,
    superpoint_labels,
)
from ovlift.synthbench import ObjectSpec, SceneSpec, default_intrinsics, generate_scene, orbit_poses


def _grid(n=10):
    g = np.linspace(0, 1, n)
    a, b = np.meshgrid(g, g)
    return a.ravel(), b.ravel()


def _eig_normal(points):
    """Smallest-eigenvalue eigenvector via the general solver, sign fixed by hand."""
    c = np.cov(points.T)
    vals, vecs = np.linalg.eig(c)
    n = np.real(vecs[:, np.argmin(np.real(vals))])
    n = n / np.linalg.norm(n)
    lead = int(np.argmax(np.round(np.abs(n), 9)))
    return n if n[lead] > 0 else -n


def test_plane_z0_normals():
    a, b = _grid()
    pts = np.column_stack([a, b, np.zeros_like(a)])
    normals, degenerate = estimate_normals(pts, 10)
    np.testing.assert_allclose(normals, np.tile([0, 0, 1.0], (len(pts), 1)), atol=1e-9)
    assert not degenerate.any()


def test_plane_x_equals_y_normals():
    a, b = _grid()
    pts = np.column_stack([a, a, b])
    expected = _eig_normal(pts)
    np.testing.assert_allclose(expected, np.array([1, -1, 0]) / np.sqrt(2), atol=1e-12)
    normals, _ = estimate_normals(pts, 10)
    np.testing.assert_allclose(normals, np.tile(expected, (len(pts), 1)), atol=1e-9)


def test_normals_unit_length():
    pts = np.random.default_rng(0).normal(size=(300, 3))
    normals, _ = estimate_normals(pts, 8)
    np.testing.assert_allclose(np.linalg.norm(normals, axis=1), 1.0, atol=1e-6)
    mag = np.abs(normals)
    assert np.all(normals[np.arange(300), mag.argmax(axis=1)] > 0)


def test_collinear_points_fall_back():
    pts = np.column_stack([np.arange(10.0), np.zeros(10), np.zeros(10)])
    normals, degenerate = estimate_normals(pts, 5)
    assert degenerate.all()
    np.testing.assert_allclose(normals, np.tile([0, 0, 1.0], (10, 1)))


def test_normals_preconditions():
    with pytest.raises(ValueError):
        estimate_normals(np.zeros((10, 3)), 2)
    with pytest.raises(ValueError):
        estimate_normals(np.zeros((4, 3)), 5)


def test_knn_excludes_self_with_duplicates():
    pts = np.array([[0.0, 0, 0], [0, 0, 0], [1, 0, 0]])
    nn = knn_indices(pts, 1)
    assert nn[:, 0].tolist() == [1, 0, 1]


def test_chain_knn1_three_edges():
    # nearest neighbours: 0->1, 1->0, 2->1, 3->2
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [3, 0, 0], [6, 0, 0]])
    g = build_graph(pts, k_nn=1)
    assert g.edges.tolist() == [[0, 1], [1, 2], [2, 3]]


def test_weights_from_normals():
    pts = np.array([[0.0, 0, 0], [0.1, 0, 0], [0.2, 0, 0]])
    normals = np.array([[0, 0, 1.0], [0, 0, 1.0], [1.0, 0, 0]])
    g = build_graph(pts, k_nn=2, normals=normals)
    w = dict(zip(map(tuple, g.edges.tolist()), g.weights.tolist()))
    assert w[(0, 1)] == pytest.approx(0.0, abs=1e-12)
    assert w[(1, 2)] == pytest.approx(1.0, abs=1e-12)


def test_mesh_edges_preferred():
    pts = np.random.default_rng(0).normal(size=(5, 3))
    g = build_graph(pts, k_nn=3, mesh_edges=np.array([[1, 0], [0, 1], [3, 4]]))
    assert g.edges.tolist() == [[0, 1], [3, 4]]
    assert np.all((g.weights >= 0) & (g.weights <= 1))


def test_disjoint_clusters():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(60, 3)) * 0.05
    b = rng.normal(size=(60, 3)) * 0.05 + 10
    g = build_graph(np.vstack([a, b]), k_nn=5)
    sps = segment_superpoints(g, k_fh=1e6, min_size=10)
    assert len(sps) == 2
    assert sorted(tuple(sorted(s.point_indices.tolist())) for s in sps) == [
        tuple(range(60)), tuple(range(60, 120))]


def _two_planes():
    wall_rot = (1, 0, 0, 0, 0, -1, 0, 1, 0)
    objs = [ObjectSpec("plane", "floor", (0, 0, 0), (1, 0, 0, 0, 1, 0, 0, 0, 1), (1.0, 1.0), 3000),
            ObjectSpec("plane", "wall", (0, 0.5, 0.5), wall_rot, (1.0, 1.0), 3000)]
    return generate_scene(SceneSpec(objs, orbit_poses(1), default_intrinsics()), seed=0)


def test_perpendicular_planes_two_superpoints():
    scene, gt = _two_planes()
    sps = segment_superpoints(build_graph(scene.points, 10), k_fh=0.05, min_size=50)
    assert len(sps) == 2
    for plane_id in (1, 2):
        members = set(np.flatnonzero(gt.instance_ids == plane_id).tolist())
        best = max(len(members & set(s.point_indices.tolist())) for s in sps)
        assert best >= 0.95 * len(members)


def test_single_plane_one_superpoint():
    a, b = _grid(30)
    pts = np.column_stack([a, b, np.zeros_like(a)])
    sps = segment_superpoints(build_graph(pts, 10), k_fh=0.05, min_size=50)
    assert len(sps) == 1
    assert sps[0].size == len(pts)


def _random_graph(n=40, seed=0):
    rng = np.random.default_rng(seed)
    pairs = np.unique(np.sort(rng.integers(0, n, size=(120, 2)), axis=1), axis=0)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    return WeightedGraph(n, pairs, rng.uniform(0.1, 1.0, len(pairs)))


def test_k_fh_limits():
    g = _random_graph()
    tiny = segment_superpoints(g, k_fh=1e-9, min_size=1)
    assert len(tiny) == g.num_nodes
    huge = segment_superpoints(g, k_fh=1e9, min_size=1)
    # one superpoint per connected component
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components

    adj = coo_matrix((np.ones(len(g.edges)), (g.edges[:, 0], g.edges[:, 1])), shape=(40, 40))
    n_comp, _ = connected_components(adj, directed=False)
    assert len(huge) == n_comp


def test_partition_and_determinism():
    g = _random_graph(seed=4)
    a = segment_superpoints(g, 0.3, 3)
    b = segment_superpoints(g, 0.3, 3)
    assert [s.point_indices.tolist() for s in a] == [s.point_indices.tolist() for s in b]
    seen = np.concatenate([s.point_indices for s in a])
    assert len(seen) == len(set(seen.tolist()))
    sizes = [s.size for s in a]
    assert sizes == sorted(sizes, reverse=True)
    assert all(s.size >= 3 for s in a)


def test_segment_argument_checks():
    g = _random_graph()
    with pytest.raises(ValueError):
        segment_superpoints(g, 0.0, 1)
    with pytest.raises(ValueError):
        segment_superpoints(g, 0.1, 0)


def _sps(sizes):
    out, start = [], 0
    for i, s in enumerate(sizes):
        out.append(Superpoint(i, np.arange(start, start + s)))
        start += s
    return out


def test_select_prompts_top_k():
    chosen = select_prompts(_sps([10, 5, 8]), 2)
    assert [s.size for s in chosen] == [10, 8]


def test_select_prompts_saturates():
    assert len(select_prompts(_sps([3, 2, 1]), 10)) == 3


def test_select_prompts_tie_lower_id():
    assert [s.id for s in select_prompts(_sps([4, 4, 4]), 2)] == [0, 1]


def test_two_hundred_prompts():
    # 260 disjoint triangles -> 260 superpoints; the default prompt count is 200
    n_tri = 260
    base = np.arange(n_tri) * 3
    edges = np.concatenate([np.column_stack([base, base + 1]), np.column_stack([base + 1, base + 2]),
                            np.column_stack([base, base + 2])])
    g = WeightedGraph(3 * n_tri, edges, np.zeros(len(edges)))
    sps = segment_superpoints(g, 0.05, 1)
    assert len(sps) == n_tri
    prompts = select_prompts(sps, 200)
    assert len(prompts) == 200
    assert {s.id for s in prompts} <= {s.id for s in sps}


def test_superpoint_labels():
    labels = superpoint_labels(_sps([2, 1]), 5)
    assert labels.tolist() == [0, 0, 1, -1, -1]
