import numpy as np
import pytest

from p2nf.meshing import TriangleMeshWithColors
from p2nf.metrics import (EvalConfig, NearestNeighborIndex,
                          brute_force_nearest_distances, chamfer,
                          chamfer_brute_force, fscore, fscore_brute_force,
                          sample_mesh_surface)


# -- nearest-neighbor index ----------------------------------------------------

def test_index_matches_brute_force_on_1000_queries(rng):
    pts = rng.normal(size=(700, 3))
    idx = NearestNeighborIndex(pts, cell_size=0.2)
    queries = rng.normal(size=(1000, 3)) * 1.4
    np.testing.assert_array_equal(idx.nearest_distances(queries),
                                  brute_force_nearest_distances(queries, pts))


def test_index_radius_queries_exact(rng):
    pts = rng.normal(size=(300, 3))
    t = 0.15
    idx = NearestNeighborIndex(pts, cell_size=t)
    for q in rng.normal(size=(300, 3)):
        exact = bool(np.min(np.linalg.norm(pts - q, axis=1)) <= t)
        assert idx.has_within(q, t) == exact


def test_index_rejects_empty():
    with pytest.raises(ValueError):
        NearestNeighborIndex(np.zeros((0, 3)), 0.1)


# -- chamfer -------------------------------------------------------------------

def test_chamfer_identical_clouds_zero(rng):
    p = rng.normal(size=(50, 3))
    assert chamfer(p, p) == 0.0


def test_chamfer_single_pair():
    assert chamfer([[0, 0, 0]], [[1, 0, 0]]) == pytest.approx(1.0)


def test_chamfer_grid_equals_brute_force(rng):
    for _ in range(100):
        n, m = int(rng.integers(2, 500)), int(rng.integers(2, 500))
        p1 = rng.normal(size=(n, 3)) * rng.uniform(0.05, 2.0)
        p2 = rng.normal(size=(m, 3)) * rng.uniform(0.05, 2.0) + rng.normal(size=3)
        assert abs(chamfer(p1, p2) - chamfer_brute_force(p1, p2)) < 1e-12


def test_chamfer_symmetric_exactly(rng):
    p1 = rng.normal(size=(40, 3))
    p2 = rng.normal(size=(60, 3))
    assert chamfer(p1, p2) == chamfer(p2, p1)


def test_chamfer_translation_bound(rng):
    p1 = rng.normal(size=(100, 3))
    for s in (0.01, 0.1, 0.5):
        v = rng.normal(size=3)
        v *= s / np.linalg.norm(v)
        assert chamfer(p1, p1 + v) <= s + 1e-12


def test_chamfer_empty_raises():
    with pytest.raises(ValueError):
        chamfer(np.zeros((0, 3)), np.zeros((4, 3)))


# -- f-score -------------------------------------------------------------------

def test_fscore_identical_clouds(rng):
    p = rng.normal(size=(30, 3))
    assert fscore(p, p, 0.01) == (1.0, 1.0, 1.0)


def test_fscore_separated_clouds(rng):
    p1 = rng.normal(size=(30, 3)) * 0.01
    p2 = p1 + np.array([10 * 0.05, 0, 0])
    assert fscore(p1, p2, 0.05) == (0.0, 0.0, 0.0)


def test_fscore_hand_case_exact():
    t = 0.01
    p1 = np.array([[0, 0, 0], [t / 2, 0, 0], [10 * t, 0, 0]])
    p2 = np.array([[0, 0, 0]])
    f, precision, recall = fscore(p1, p2, t)
    assert precision == 1.0
    assert recall == pytest.approx(2.0 / 3.0)
    assert f == pytest.approx(0.8)


def test_fscore_matches_brute_force(rng):
    for _ in range(50):
        p1 = rng.normal(size=(int(rng.integers(2, 300)), 3))
        p2 = rng.normal(size=(int(rng.integers(2, 300)), 3))
        t = float(rng.uniform(0.05, 1.5))
        assert fscore(p1, p2, t) == fscore_brute_force(p1, p2, t)


def test_fscore_monotone_in_threshold(rng):
    p1 = rng.normal(size=(80, 3))
    p2 = rng.normal(size=(80, 3))
    values = [fscore(p1, p2, t)[0] for t in (0.05, 0.1, 0.2, 0.5, 1.0, 3.0)]
    assert all(a <= b + 1e-12 for a, b in zip(values, values[1:]))
    assert all(0.0 <= v <= 1.0 for v in values)


def test_fscore_requires_positive_threshold(rng):
    p = rng.normal(size=(4, 3))
    with pytest.raises(ValueError):
        fscore(p, p, 0.0)


# -- mesh surface sampling -----------------------------------------------------

def test_single_triangle_barycentric(rng):
    mesh = TriangleMeshWithColors(np.array([[0., 0, 0], [1, 0, 0], [0, 1, 0]]),
                                  np.array([[0, 1, 2]]))
    pts = sample_mesh_surface(mesh, 5000, rng)
    assert np.all(pts[:, 0] >= -1e-12)
    assert np.all(pts[:, 1] >= -1e-12)
    assert np.all(pts[:, 0] + pts[:, 1] <= 1 + 1e-12)
    assert np.all(np.abs(pts[:, 2]) < 1e-12)


def test_area_proportional_face_choice(rng):
    # two parallel triangles with areas 0.5 and 1.5 (ratio 1:3), separated in z
    verts = np.array([[0., 0, 0], [1, 0, 0], [0, 1, 0],
                      [0, 0, 1], [np.sqrt(3), 0, 1], [0, np.sqrt(3), 1]])
    mesh = TriangleMeshWithColors(verts, np.array([[0, 1, 2], [3, 4, 5]]))
    pts = sample_mesh_surface(mesh, 100_000, rng)
    big = float(np.mean(pts[:, 2] > 0.5))
    assert big == pytest.approx(0.75, rel=0.05)


def test_degenerate_mesh_raises(rng):
    mesh = TriangleMeshWithColors(np.zeros((3, 3)), np.array([[0, 1, 2]]))
    with pytest.raises(ValueError):
        sample_mesh_surface(mesh, 10, rng)


def test_eval_config_validation():
    assert EvalConfig().n_sample == 3000
    assert EvalConfig().threshold == 0.01
    with pytest.raises(ValueError):
        EvalConfig(threshold=0.0)
