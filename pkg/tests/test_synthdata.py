import json
import math
import os

import numpy as np
import pytest

from p2nf.cameras import hemisphere_pose
from p2nf.synthdata import (AnalyticShape, box_shape, load_mesh_dataset,
                            make_dataset, make_object, random_shape,
                            read_dataset, reference_render,
                            sample_colored_points, shape_from_params,
                            sphere_shape, torus_shape, union_shape)


# -- surface sampling ---------------------------------------------------------

def test_sphere_samples_on_surface(rng):
    cloud = sample_colored_points(sphere_shape(0.8), 2048, rng)
    radii = np.linalg.norm(cloud.points[:, :3], axis=1)
    assert np.all(np.abs(radii - 0.8) < 1e-3)


def test_two_tone_colors_exact(rng):
    shape = sphere_shape(0.7, (0.9, 0.1, 0.2), (0.1, 0.2, 0.9), (0, 0, 1))
    cloud = sample_colored_points(shape, 512, rng)
    up = cloud.points[:, 2] >= 0
    np.testing.assert_allclose(cloud.points[up][:, 3:],
                               np.tile([0.9, 0.1, 0.2], (up.sum(), 1)), atol=1e-6)
    np.testing.assert_allclose(cloud.points[~up][:, 3:],
                               np.tile([0.1, 0.2, 0.9], ((~up).sum(), 1)), atol=1e-6)


def test_sphere_sample_centroid_near_origin(rng):
    cloud = sample_colored_points(sphere_shape(0.8), 2048, rng)
    assert np.linalg.norm(cloud.points[:, :3].mean(axis=0)) < 0.02


def test_empty_shape_raises(rng):
    empty = AnalyticShape("sphere", {}, lambda x: np.ones(len(x)),
                          lambda x: np.zeros((len(x), 3)))
    with pytest.raises(RuntimeError):
        sample_colored_points(empty, 16, rng)


@pytest.mark.parametrize("family", ["sphere", "box", "torus", "union"])
def test_all_families_sample_within_unit_sphere(family, rng):
    shape = random_shape(family, rng)
    cloud = sample_colored_points(shape, 256, rng)
    assert np.linalg.norm(cloud.points[:, :3], axis=1).max() <= 1.0
    assert np.abs(shape.sdf(cloud.points[:, :3].astype(np.float64))).max() < 1e-4


# -- reference renderer -------------------------------------------------------

def test_silhouette_area_matches_projection(rng):
    radius, dist = 0.8, 2.5
    shape = sphere_shape(radius)
    pose = hemisphere_pose(rng, dist, focal_px=96.0, width_px=96, height_px=96)
    img = reference_render(shape, pose)
    hits = int((img[..., 3] > 0).sum())
    expected = math.pi * (96.0 * math.tan(math.asin(radius / dist))) ** 2
    assert hits == pytest.approx(expected, rel=0.02)


def test_empty_scene_fully_transparent(rng):
    empty = AnalyticShape("sphere", {}, lambda x: np.ones(len(x)),
                          lambda x: np.zeros((len(x), 3)))
    pose = hemisphere_pose(rng, 2.5)
    img = reference_render(empty, pose)
    assert img[..., 3].max() == 0


def test_hit_pixels_use_exact_palette(rng):
    shape = sphere_shape(0.8, (1.0, 0.0, 0.0), (0.0, 0.0, 1.0))
    pose = hemisphere_pose(rng, 2.5)
    img = reference_render(shape, pose)
    hit = img[img[..., 3] > 0][:, :3]
    palette = {(255, 0, 0), (0, 0, 255)}
    assert {tuple(px) for px in hit} <= palette


def test_alpha_matches_analytic_sphere_intersection(rng):
    """Away from the silhouette (>1px), hit/miss equals the exact ray-sphere test."""
    from p2nf.cameras import rays_for_image

    radius = 0.8
    pose = hemisphere_pose(rng, 2.5, focal_px=64.0, width_px=64, height_px=64)
    img = reference_render(sphere_shape(radius), pose)
    origins, dirs = rays_for_image(pose)
    # analytic intersection: |o + t d| = r has a real root
    b = np.einsum("ij,ij->i", origins, dirs)
    c = np.einsum("ij,ij->i", origins, origins) - radius * radius
    analytic = (b * b - c) >= 0
    alpha = (img[..., 3].reshape(-1) > 0)
    # distance in pixels from the silhouette: zero-crossing of the discriminant
    disc = (b * b - c).reshape(64, 64)
    inner = np.abs(np.sqrt(np.abs(disc)))
    mismatch = alpha != analytic
    # every mismatching pixel must hug the silhouette
    grad = np.max(np.abs(np.gradient(disc)), axis=0)
    near_edge = np.abs(disc) <= 2.0 * grad
    assert np.all(near_edge.reshape(-1)[mismatch])


# -- shape (de)serialization ----------------------------------------------------

@pytest.mark.parametrize("family", ["sphere", "box", "torus", "union"])
def test_shape_params_round_trip(family, rng):
    shape = random_shape(family, rng)
    rebuilt = shape_from_params(shape.family, shape.params)
    x = rng.uniform(-1, 1, size=(64, 3))
    np.testing.assert_allclose(rebuilt.sdf(x), shape.sdf(x), atol=1e-12)
    np.testing.assert_allclose(rebuilt.color(x), shape.color(x), atol=1e-12)


# -- dataset IO ---------------------------------------------------------------

def test_dataset_round_trip_bit_exact(tmp_path, rng):
    objects = make_dataset(tmp_path / "ds", families=("sphere", "box"),
                           objects_per_family=2, n_views=3, resolution=24,
                           n_points=128, seed=3, test_per_family=1)
    back = read_dataset(tmp_path / "ds")
    assert [o.object_id for o in back] == [o.object_id for o in objects]
    assert [o.split for o in back] == ["train", "test"] * 2
    for a, b in zip(objects, back):
        assert a.cloud.points.tobytes() == b.cloud.points.tobytes()
        for va, vb in zip(a.views, b.views):
            assert va.image.tobytes() == vb.image.tobytes()
            assert np.array_equal(va.pose.camera_to_world, vb.pose.camera_to_world)
            assert va.pose.focal_px == vb.pose.focal_px


def test_cloud_magic_rejected(tmp_path, rng):
    make_dataset(tmp_path / "ds", objects_per_family=1, n_views=1,
                 resolution=16, n_points=64, seed=0)
    cloud_path = tmp_path / "ds" / "sphere_000" / "cloud.bin"
    raw = bytearray(cloud_path.read_bytes())
    raw[:4] = b"XXXX"
    cloud_path.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="magic"):
        read_dataset(tmp_path / "ds")


def test_missing_manifest_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_dataset(tmp_path / "nope")


def test_view_size_mismatch_detected(tmp_path, rng):
    make_dataset(tmp_path / "ds", objects_per_family=1, n_views=1,
                 resolution=16, n_points=64, seed=0)
    view = tmp_path / "ds" / "sphere_000" / "view_0.rgba"
    view.write_bytes(view.read_bytes()[:-4])
    with pytest.raises(ValueError, match="bytes"):
        read_dataset(tmp_path / "ds")


def test_rebuild_shape_from_manifest(tmp_path, rng):
    objects = make_dataset(tmp_path / "ds", families=("torus",),
                           objects_per_family=1, n_views=1, resolution=16,
                           n_points=64, seed=2)
    back = read_dataset(tmp_path / "ds")[0]
    shape = back.rebuild_shape()
    pts = back.cloud.points[:, :3].astype(np.float64)
    assert np.abs(shape.sdf(pts)).max() < 1e-3


def test_mesh_loader_is_a_stub():
    with pytest.raises(NotImplementedError):
        load_mesh_dataset("/nonexistent")
