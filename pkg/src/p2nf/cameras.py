"""Camera poses, pixel-to-ray generation, and upper-hemisphere pose sampling.

Conventions (documented to avoid flipped renders):
  * image pixels: +x right, +y down, pixel (0, 0) top-left;
  * camera frame: x right, y down, z forward (optical axis), so the
    camera-to-world rotation columns are [right, down, forward];
  * scene: objects normalized to the origin-centered unit sphere, cameras
    on a radius-2.5 sphere, rays bounded by t_near=1.0, t_far=4.0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SCENE_CAMERA_RADIUS = 2.5
SCENE_T_NEAR = 1.0
SCENE_T_FAR = 4.0

_ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class CameraPose:
    """Rigid camera-to-world transform plus pinhole intrinsics."""

    camera_to_world: np.ndarray  # 4x4, rotation block orthonormal, det +1
    focal_px: float
    width_px: int
    height_px: int

    def __post_init__(self):
        m = np.asarray(self.camera_to_world, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"camera_to_world must be 4x4, got {m.shape}")
        r = m[:3, :3]
        if not np.allclose(r.T @ r, np.eye(3), atol=_ORTHO_TOL):
            raise ValueError("camera_to_world rotation block is not orthonormal")
        if np.linalg.det(r) < 0:
            raise ValueError("camera_to_world rotation has negative determinant")
        if not (self.focal_px > 0 and self.width_px > 0 and self.height_px > 0):
            raise ValueError("focal length and image dimensions must be positive")
        object.__setattr__(self, "camera_to_world", m)

    @property
    def position(self):
        return self.camera_to_world[:3, 3]

    @property
    def forward(self):
        return self.camera_to_world[:3, 2]


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray  # unit norm
    t_near: float = SCENE_T_NEAR
    t_far: float = SCENE_T_FAR

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64)
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > _ORTHO_TOL:
            raise ValueError("ray direction must be unit length")
        if not (0 < self.t_near < self.t_far):
            raise ValueError("require 0 < t_near < t_far")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)


def look_at(position, target, up):
    """Camera-to-world matrix for a camera at `position` looking at `target`.

    `up` is a hint fixing the roll; if the view direction is (nearly)
    parallel to it, the hint is perturbed and the look-at retried.
    """
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    if np.linalg.norm(up) == 0:
        raise ValueError("up vector must be nonzero")

    fwd = target - position
    n = np.linalg.norm(fwd)
    if n == 0:
        raise ValueError("camera position coincides with target")
    fwd = fwd / n

    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-8:
        # view parallel to up: nudge the hint off-axis and retry
        up = up + np.array([1e-3, 2e-3, 3e-3])
        right = np.cross(fwd, up)
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)

    m = np.eye(4)
    m[:3, 0] = right
    m[:3, 1] = down
    m[:3, 2] = fwd
    m[:3, 3] = position
    return m


def ray_for_pixel(pose: CameraPose, px: int, py: int, jitter=None,
                  t_near=SCENE_T_NEAR, t_far=SCENE_T_FAR) -> Ray:
    """Ray through pixel (px, py); jitter=(0.5, 0.5) is the pixel center."""
    if not (0 <= px < pose.width_px and 0 <= py < pose.height_px):
        raise ValueError(f"pixel ({px}, {py}) outside {pose.width_px}x{pose.height_px} image")
    jx, jy = (0.5, 0.5) if jitter is None else (float(jitter[0]), float(jitter[1]))
    u = (px + jx - 0.5 * pose.width_px) / pose.focal_px
    v = (py + jy - 0.5 * pose.height_px) / pose.focal_px
    d_cam = np.array([u, v, 1.0])
    d_world = pose.camera_to_world[:3, :3] @ d_cam
    d_world = d_world / np.linalg.norm(d_world)
    return Ray(pose.camera_to_world[:3, 3].copy(), d_world, t_near, t_far)


def rays_for_image(pose: CameraPose, t_near=SCENE_T_NEAR, t_far=SCENE_T_FAR):
    """All pixel-center rays of a pose as arrays.

    Returns (origins (H*W, 3), directions (H*W, 3)) in row-major pixel order,
    matching the layout of stored view images.
    """
    w, h = pose.width_px, pose.height_px
    xs = (np.arange(w) + 0.5 - 0.5 * w) / pose.focal_px
    ys = (np.arange(h) + 0.5 - 0.5 * h) / pose.focal_px
    u, v = np.meshgrid(xs, ys)  # (h, w)
    d_cam = np.stack([u, v, np.ones_like(u)], axis=-1).reshape(-1, 3)
    d_world = d_cam @ pose.camera_to_world[:3, :3].T
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(pose.camera_to_world[:3, 3], d_world.shape).copy()
    return origins, d_world


def hemisphere_pose(rng, radius, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0),
                    focal_px=64.0, width_px=64, height_px=64) -> CameraPose:
    """Pose at a uniform random point of the upper (z >= 0) hemisphere.

    Uniformity over the hemisphere surface comes from z ~ U[0,1] and
    azimuth ~ U[0, 2pi); the camera looks at `target` with roll fixed by
    the `up` hint.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    z = rng.uniform(0.0, 1.0)
    phi = rng.uniform(0.0, 2.0 * np.pi)
    s = np.sqrt(max(0.0, 1.0 - z * z))
    offset = radius * np.array([s * np.cos(phi), s * np.sin(phi), z])
    position = np.asarray(target, dtype=np.float64) + offset
    return CameraPose(look_at(position, target, up), focal_px, width_px, height_px)
