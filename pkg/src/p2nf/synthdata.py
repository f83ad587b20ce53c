"""Procedural stand-in for a scanned-object dataset, at desk scale.

Objects are analytic signed-distance shapes with piecewise-constant two-tone
coloring (so color checks downstream have an exact oracle).  Each dataset
object carries a colored surface point cloud plus posed transparent-background
images rendered by an exact sphere tracer; the tracer is the training-target
oracle, entirely independent of the learned rendering path.

Dataset directory layout (bit-exact, zero-dependency formats):

    <dir>/manifest.json            ids, splits, image dims, poses, shape params
    <dir>/<id>/cloud.bin           16-byte header (magic "P2C6", u32 N, 8 reserved
                                   bytes) + little-endian f32 N x 6 row-major
    <dir>/<id>/view_<k>.rgba       raw 8-bit RGBA, row-major
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .cameras import CameraPose, SCENE_CAMERA_RADIUS, SCENE_T_FAR, SCENE_T_NEAR, \
    hemisphere_pose, rays_for_image

CLOUD_MAGIC = b"P2C6"
MANIFEST_NAME = "manifest.json"
DEFAULT_POINTS = 2048
FAMILIES = ("sphere", "box", "torus", "union")

_SURFACE_TOL = 1e-4


@dataclass
class AnalyticShape:
    """Signed-distance shape with a color function; both vectorized over (n, 3)."""

    family: str
    params: dict
    sdf: object
    color: object


def _two_tone(color_a, color_b, split_normal):
    ca = np.asarray(color_a, dtype=np.float64)
    cb = np.asarray(color_b, dtype=np.float64)
    n = np.asarray(split_normal, dtype=np.float64)
    n = n / np.linalg.norm(n)

    def color(x):
        side = x @ n >= 0.0
        return np.where(side[:, None], ca[None, :], cb[None, :])

    return color


def sphere_shape(radius, color_a=(0.8, 0.2, 0.2), color_b=(0.2, 0.3, 0.8),
                 split_normal=(0.0, 0.0, 1.0)):
    params = {"radius": float(radius), "color_a": list(color_a), "color_b": list(color_b),
              "split_normal": list(split_normal)}

    def sdf(x):
        return np.linalg.norm(x, axis=-1) - radius

    return AnalyticShape("sphere", params, sdf, _two_tone(color_a, color_b, split_normal))


def box_shape(half_extents, color_a=(0.9, 0.7, 0.1), color_b=(0.1, 0.5, 0.2),
              split_normal=(1.0, 0.0, 0.0)):
    e = np.asarray(half_extents, dtype=np.float64)
    params = {"half_extents": list(map(float, e)), "color_a": list(color_a),
              "color_b": list(color_b), "split_normal": list(split_normal)}

    def sdf(x):
        q = np.abs(x) - e[None, :]
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside

    return AnalyticShape("box", params, sdf, _two_tone(color_a, color_b, split_normal))


def torus_shape(major, minor, color_a=(0.7, 0.2, 0.7), color_b=(0.9, 0.9, 0.3),
                split_normal=(0.0, 1.0, 0.0)):
    params = {"major": float(major), "minor": float(minor), "color_a": list(color_a),
              "color_b": list(color_b), "split_normal": list(split_normal)}

    def sdf(x):
        ring = np.hypot(np.linalg.norm(x[:, :2], axis=-1) - major, x[:, 2])
        return ring - minor

    return AnalyticShape("torus", params, sdf, _two_tone(color_a, color_b, split_normal))


def translate_shape(shape, offset):
    off = np.asarray(offset, dtype=np.float64)
    params = {"base_family": shape.family, "base_params": shape.params,
              "offset": list(map(float, off))}
    return AnalyticShape(shape.family, params,
                         lambda x: shape.sdf(x - off),
                         lambda x: shape.color(x - off))


def union_shape(members, offsets=None):
    """Union of primitives: min of member distances, color of the nearest member."""
    members = list(members)
    if not members:
        raise ValueError("union needs at least one member")
    if offsets is not None:
        members = [translate_shape(m, o) for m, o in zip(members, offsets)]
    params = {"members": [{"family": m.family, "params": m.params} for m in members]}

    def sdf(x):
        return np.min(np.stack([m.sdf(x) for m in members], axis=0), axis=0)

    def color(x):
        dists = np.stack([np.abs(m.sdf(x)) for m in members], axis=0)
        pick = np.argmin(dists, axis=0)
        cols = np.stack([m.color(x) for m in members], axis=0)
        return cols[pick, np.arange(x.shape[0])]

    return AnalyticShape("union", params, sdf, color)


def shape_from_params(family, params):
    if "offset" in params:  # translated member inside a union
        base = shape_from_params(params["base_family"], params["base_params"])
        return translate_shape(base, params["offset"])
    if family == "sphere":
        return sphere_shape(params["radius"], params["color_a"], params["color_b"],
                            params["split_normal"])
    if family == "box":
        return box_shape(params["half_extents"], params["color_a"], params["color_b"],
                         params["split_normal"])
    if family == "torus":
        return torus_shape(params["major"], params["minor"], params["color_a"],
                           params["color_b"], params["split_normal"])
    if family == "union":
        return union_shape([shape_from_params(m["family"], m["params"])
                            for m in params["members"]])
    raise ValueError(f"unknown shape family '{family}'")


def _random_color_pair(rng):
    # saturated, well-separated two-tone palette
    a = rng.random(3) * 0.7 + 0.2
    b = rng.random(3) * 0.7 + 0.2
    b[np.argmax(a)] = 0.1
    return a, b


def random_shape(family, rng):
    ca, cb = _random_color_pair(rng)
    n = rng.normal(size=3)
    n /= np.linalg.norm(n)
    if family == "sphere":
        return sphere_shape(rng.uniform(0.5, 0.9), ca, cb, n)
    if family == "box":
        return box_shape(rng.uniform(0.3, 0.55, size=3), ca, cb, n)
    if family == "torus":
        return torus_shape(rng.uniform(0.45, 0.65), rng.uniform(0.15, 0.28), ca, cb, n)
    if family == "union":
        off = rng.uniform(0.25, 0.4)
        return union_shape(
            [sphere_shape(rng.uniform(0.3, 0.45), ca, cb, n),
             box_shape(rng.uniform(0.2, 0.35, size=3), cb, ca, -n)],
            offsets=[(off, 0.0, 0.0), (-off, 0.0, 0.0)])
    raise ValueError(f"unknown shape family '{family}'")


# ---------------------------------------------------------------------------
# Surface sampling and the exact reference renderer.
# ---------------------------------------------------------------------------

def _sdf_gradient(shape, x, eps=1e-5):
    g = np.empty_like(x)
    for k in range(3):
        h = np.zeros(3)
        h[k] = eps
        g[:, k] = shape.sdf(x + h) - shape.sdf(x - h)
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return g / norms


def sample_colored_points(shape, n, rng):
    """n surface points (|sdf| < 1e-4) with their analytic colors; (n, 6)."""
    from .hypernet import ColoredPointCloud

    collected = []
    have = 0
    for _ in range(64):
        m = max(4 * (n - have), 1024)
        x = rng.uniform(-1.0, 1.0, size=(m, 3))
        for _ in range(12):  # Newton projection along the numeric gradient
            d = shape.sdf(x)
            x = x - d[:, None] * _sdf_gradient(shape, x)
        d = shape.sdf(x)
        ok = (np.abs(d) < _SURFACE_TOL) & (np.linalg.norm(x, axis=1) <= 1.0)
        x = x[ok]
        if x.shape[0]:
            collected.append(np.hstack([x, np.clip(shape.color(x), 0.0, 1.0)]))
            have += x.shape[0]
        if have >= n:
            break
    if have < n:
        raise RuntimeError(f"could not sample {n} surface points "
                           f"(shape '{shape.family}' may be empty)")
    pts = np.vstack(collected)[:n]
    return ColoredPointCloud(pts.astype(np.float32))


def reference_render(shape, pose: CameraPose, width=None, height=None,
                     max_steps=256, hit_tol=1e-5):
    """Sphere-traced exact silhouette render; RGBA uint8, alpha 255 on hit.

    Flat albedo (no shading): a hit pixel takes the shape's color at the hit
    point.  Deterministic.
    """
    if width is not None or height is not None:
        pose = CameraPose(pose.camera_to_world,
                          pose.focal_px * (width or pose.width_px) / pose.width_px,
                          width or pose.width_px, height or pose.height_px)
    origins, dirs = rays_for_image(pose)
    n = origins.shape[0]
    t = np.full(n, SCENE_T_NEAR)
    active = np.ones(n, dtype=bool)
    hit = np.zeros(n, dtype=bool)
    for _ in range(max_steps):
        if not active.any():
            break
        x = origins[active] + t[active, None] * dirs[active]
        d = shape.sdf(x)
        newly_hit = d < hit_tol
        idx = np.flatnonzero(active)
        hit[idx[newly_hit]] = True
        t[idx] += np.maximum(d, 0.0)
        escaped = t[idx] > SCENE_T_FAR
        active[idx[newly_hit | escaped]] = False

    img = np.zeros((n, 4), dtype=np.uint8)
    if hit.any():
        points = origins[hit] + t[hit, None] * dirs[hit]
        colors = np.clip(shape.color(points), 0.0, 1.0)
        img[hit, :3] = np.round(colors * 255.0).astype(np.uint8)
        img[hit, 3] = 255
    return img.reshape(pose.height_px, pose.width_px, 4)


# ---------------------------------------------------------------------------
# Dataset objects and bit-exact (de)serialization.
# ---------------------------------------------------------------------------

@dataclass
class View:
    image: np.ndarray      # (H, W, 4) uint8 RGBA
    pose: CameraPose


@dataclass
class DatasetObject:
    object_id: str
    cloud: object          # ColoredPointCloud
    views: list            # list[View]
    split: str = "train"   # train | test
    shape_family: str = None
    shape_params: dict = None

    def rebuild_shape(self):
        if self.shape_family is None:
            return None
        return shape_from_params(self.shape_family, self.shape_params)


def make_object(object_id, shape, rng, n_points=DEFAULT_POINTS, n_views=16,
                resolution=64, split="train"):
    cloud = sample_colored_points(shape, n_points, rng)
    views = []
    for _ in range(n_views):
        pose = hemisphere_pose(rng, SCENE_CAMERA_RADIUS,
                               focal_px=float(resolution),
                               width_px=resolution, height_px=resolution)
        views.append(View(reference_render(shape, pose), pose))
    return DatasetObject(object_id, cloud, views, split, shape.family, shape.params)


def make_dataset(out_dir, families=("sphere",), objects_per_family=8, n_views=16,
                 resolution=64, n_points=DEFAULT_POINTS, seed=0, test_per_family=0):
    """Generate and write a dataset; returns the objects."""
    rng = np.random.default_rng(seed)
    objects = []
    for family in families:
        for i in range(objects_per_family):
            split = "test" if i >= objects_per_family - test_per_family else "train"
            shape = random_shape(family, rng)
            objects.append(make_object(f"{family}_{i:03d}", shape, rng,
                                       n_points, n_views, resolution, split))
    write_dataset(objects, out_dir)
    return objects


def _atomic_write(path, data: bytes):
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def _cloud_bytes(cloud):
    pts = np.ascontiguousarray(cloud.points, dtype="<f4")
    header = CLOUD_MAGIC + np.uint32(pts.shape[0]).tobytes() + b"\x00" * 8
    return header + pts.tobytes()


def _cloud_from_bytes(raw, path):
    from .hypernet import ColoredPointCloud

    if raw[:4] != CLOUD_MAGIC:
        raise ValueError(f"{path}: bad cloud magic {raw[:4]!r}")
    n = int(np.frombuffer(raw[4:8], dtype="<u4")[0])
    body = np.frombuffer(raw[16:], dtype="<f4")
    if body.size != n * 6:
        raise ValueError(f"{path}: expected {n * 6} floats, found {body.size}")
    return ColoredPointCloud(body.reshape(n, 6).copy())


def write_dataset(objects, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    if not objects:
        raise ValueError("cannot write an empty dataset")
    width = objects[0].views[0].image.shape[1]
    height = objects[0].views[0].image.shape[0]
    focal = objects[0].views[0].pose.focal_px
    manifest = {"format": "p2nf-dataset", "version": 1,
                "width": width, "height": height, "focal": focal, "objects": []}
    for obj in objects:
        entry = {"id": obj.object_id, "split": obj.split,
                 "n_points": obj.cloud.n_points, "n_views": len(obj.views),
                 "poses": [v.pose.camera_to_world.tolist() for v in obj.views]}
        if obj.shape_family is not None:
            entry["shape"] = {"family": obj.shape_family, "params": obj.shape_params}
        manifest["objects"].append(entry)
        obj_dir = os.path.join(out_dir, obj.object_id)
        os.makedirs(obj_dir, exist_ok=True)
        _atomic_write(os.path.join(obj_dir, "cloud.bin"), _cloud_bytes(obj.cloud))
        for k, view in enumerate(obj.views):
            if view.image.shape != (height, width, 4):
                raise ValueError(f"object {obj.object_id} view {k}: image dims "
                                 f"{view.image.shape} do not match manifest")
            _atomic_write(os.path.join(obj_dir, f"view_{k}.rgba"),
                          np.ascontiguousarray(view.image, dtype=np.uint8).tobytes())
    _atomic_write(os.path.join(out_dir, MANIFEST_NAME),
                  json.dumps(manifest, indent=1, sort_keys=True).encode())


def read_dataset(in_dir):
    manifest_path = os.path.join(in_dir, MANIFEST_NAME)
    try:
        with open(manifest_path, "rb") as f:
            manifest = json.loads(f.read())
    except OSError as e:
        raise FileNotFoundError(f"cannot read dataset manifest: {manifest_path}") from e
    if manifest.get("format") != "p2nf-dataset":
        raise ValueError(f"{manifest_path}: not a p2nf dataset manifest")
    w, h, focal = manifest["width"], manifest["height"], manifest["focal"]
    objects = []
    for entry in manifest["objects"]:
        obj_dir = os.path.join(in_dir, entry["id"])
        with open(os.path.join(obj_dir, "cloud.bin"), "rb") as f:
            cloud = _cloud_from_bytes(f.read(), os.path.join(obj_dir, "cloud.bin"))
        if cloud.n_points != entry["n_points"]:
            raise ValueError(f"{entry['id']}: manifest says {entry['n_points']} points, "
                             f"cloud.bin holds {cloud.n_points}")
        views = []
        for k in range(entry["n_views"]):
            path = os.path.join(obj_dir, f"view_{k}.rgba")
            raw = np.fromfile(path, dtype=np.uint8)
            if raw.size != h * w * 4:
                raise ValueError(f"{path}: expected {h * w * 4} bytes, found {raw.size}")
            pose = CameraPose(np.array(entry["poses"][k], dtype=np.float64), focal, w, h)
            views.append(View(raw.reshape(h, w, 4), pose))
        shape = entry.get("shape") or {}
        objects.append(DatasetObject(entry["id"], cloud, views, entry.get("split", "train"),
                                     shape.get("family"), shape.get("params")))
    return objects


def load_mesh_dataset(in_dir):
    """Extension point for ingesting scanned/modeled mesh collections.

    A loader would sample colored surface points from each mesh, render posed
    views, and emit the directory format written by `write_dataset`.  Not
    implemented at desk scale.
    """
    raise NotImplementedError("mesh-collection ingestion is not implemented; "
                              "generate data with make_dataset / the gen-data command")


def save_png(image, path):
    """Optional PNG export for human inspection (uint8 RGBA/RGB or float RGB)."""
    from PIL import Image

    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path)
