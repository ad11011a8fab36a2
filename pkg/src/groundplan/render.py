"""Deterministic depth + instance-id rendering via analytic ray casting.

Rays are parametrized so that the intersection parameter t equals depth
along the camera z axis, which is exactly the value stored in the depth map.
Each object is pruned to the pixel rectangle covered by its projected
bounding sphere before per-ray intersection, so cost scales with covered
pixels rather than image area.
"""

from __future__ import annotations

import math

import numpy as np

from .scene import (
    Box,
    CameraModel,
    CameraRig,
    Cylinder,
    Prismatic,
    Scene,
    Sphere,
    View,
    ViewSet,
    yaw_matrix,
)

_EPS = 1e-9

# Pixel-center ray directions per (fx, fy, cx, cy, w, h), camera frame, z=1.
_RAY_CACHE: dict[tuple, np.ndarray] = {}


def _camera_dirs(cam: CameraModel) -> np.ndarray:
    key = (cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height)
    dirs = _RAY_CACHE.get(key)
    if dirs is None:
        u = (np.arange(cam.width) - cam.cx) / cam.fx
        v = (np.arange(cam.height) - cam.cy) / cam.fy
        dirs = np.empty((cam.height, cam.width, 3))
        dirs[:, :, 0] = u[None, :]
        dirs[:, :, 1] = v[:, None]
        dirs[:, :, 2] = 1.0
        _RAY_CACHE[key] = dirs
    return dirs


def _box_t(origin: np.ndarray, dirs: np.ndarray, center: np.ndarray,
           half: np.ndarray, yaw: float) -> np.ndarray:
    rot = yaw_matrix(-yaw)
    o = rot @ (origin - center)
    d = dirs @ rot.T
    d = np.where(np.abs(d) < 1e-300, 1e-300, d)
    t1 = (-half - o) / d
    t2 = (half - o) / d
    t_near = np.minimum(t1, t2).max(axis=-1)
    t_far = np.maximum(t1, t2).min(axis=-1)
    hit = (t_far >= t_near) & (t_near > _EPS)
    return np.where(hit, t_near, np.inf)


def _sphere_t(origin: np.ndarray, dirs: np.ndarray, center: np.ndarray,
              radius: float) -> np.ndarray:
    oc = origin - center
    a = np.einsum("...i,...i->...", dirs, dirs)
    b = 2.0 * dirs @ oc
    c = oc @ oc - radius * radius
    disc = b * b - 4.0 * a * c
    ok = disc >= 0.0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t = (-b - sq) / (2.0 * a)
    hit = ok & (t > _EPS)
    return np.where(hit, t, np.inf)


def _cylinder_t(origin: np.ndarray, dirs: np.ndarray, center: np.ndarray,
                radius: float, height: float) -> np.ndarray:
    o = origin - center
    dx, dy, dz = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    a = dx * dx + dy * dy
    b = 2.0 * (o[0] * dx + o[1] * dy)
    c = o[0] * o[0] + o[1] * o[1] - radius * radius

    a_safe = np.where(a < 1e-300, 1e-300, a)
    disc = b * b - 4.0 * a * c
    radial_ok = disc >= 0.0
    sq = np.sqrt(np.where(radial_ok, disc, 0.0))
    r0 = (-b - sq) / (2.0 * a_safe)
    r1 = (-b + sq) / (2.0 * a_safe)
    # A near-vertical ray is inside or outside the infinite cylinder for all t.
    vertical = a < 1e-12
    inside = c <= 0.0
    r0 = np.where(vertical, np.where(inside, -np.inf, np.inf), r0)
    r1 = np.where(vertical, np.where(inside, np.inf, -np.inf), r1)
    radial_ok = radial_ok | (vertical & inside)

    dz_safe = np.where(np.abs(dz) < 1e-300, 1e-300, dz)
    z0 = (-height / 2.0 - o[2]) / dz_safe
    z1 = (height / 2.0 - o[2]) / dz_safe
    zlo = np.minimum(z0, z1)
    zhi = np.maximum(z0, z1)

    t_near = np.maximum(r0, zlo)
    t_far = np.minimum(r1, zhi)
    hit = radial_ok & (t_far >= t_near) & (t_near > _EPS)
    return np.where(hit, t_near, np.inf)


def _primitives(scene: Scene) -> list[tuple[int, object]]:
    """Flatten objects into (id, primitive description) render parts."""
    parts = []
    for obj in scene.objects:
        s = obj.shape
        if isinstance(s, Box):
            parts.append((obj.id, ("box", obj.position, s.half_extents, obj.yaw)))
        elif isinstance(s, Sphere):
            parts.append((obj.id, ("sphere", obj.position, s.radius)))
        elif isinstance(s, Cylinder):
            parts.append((obj.id, ("cylinder", obj.position, s.radius, s.height)))
        elif isinstance(s, Prismatic):
            parts.append((obj.id, ("box", obj.position, s.body_half, obj.yaw)))
            parts.append((obj.id, ("box", obj.slider_center(), s.slider_half, obj.yaw)))
    return parts


def _bounding_sphere(prim) -> tuple[np.ndarray, float]:
    kind = prim[0]
    if kind == "sphere":
        return prim[1], prim[2]
    if kind == "cylinder":
        _, center, radius, height = prim
        return center, math.hypot(radius, height / 2.0)
    _, center, half, _yaw = prim
    return center, float(np.linalg.norm(half))


def _pixel_rect(cam: CameraModel, center: np.ndarray, radius: float):
    """Conservative pixel rectangle covering a bounding sphere, or None."""
    c_cam = cam.rotation @ center + cam.translation
    z = c_cam[2]
    if z <= -radius:
        return None  # fully behind the camera
    if z <= radius + 1e-6:
        return 0, cam.width, 0, cam.height  # too close to prune safely
    # Project all corners of the sphere's enclosing box; X/Z is extremal there.
    zs = (z - radius, z + radius)
    us = [(c_cam[0] + sx * radius) / zz for sx in (-1.0, 1.0) for zz in zs]
    vs = [(c_cam[1] + sy * radius) / zz for sy in (-1.0, 1.0) for zz in zs]
    u0 = max(0, int(math.floor(min(us) * cam.fx + cam.cx)) - 1)
    u1 = min(cam.width, int(math.ceil(max(us) * cam.fx + cam.cx)) + 2)
    v0 = max(0, int(math.floor(min(vs) * cam.fy + cam.cy)) - 1)
    v1 = min(cam.height, int(math.ceil(max(vs) * cam.fy + cam.cy)) + 2)
    if u0 >= u1 or v0 >= v1:
        return None
    return u0, u1, v0, v1


def render_camera(scene: Scene, cam: CameraModel) -> View:
    depth = np.full((cam.height, cam.width), np.inf)
    ids = np.zeros((cam.height, cam.width), dtype=np.int32)
    prims = _primitives(scene)
    if prims:
        origin = cam.center
        dirs_world = _camera_dirs(cam) @ cam.rotation  # R^T applied row-wise
        for oid, prim in prims:
            sphere_c, sphere_r = _bounding_sphere(prim)
            rect = _pixel_rect(cam, sphere_c, sphere_r)
            if rect is None:
                continue
            u0, u1, v0, v1 = rect
            d = dirs_world[v0:v1, u0:u1]
            kind = prim[0]
            if kind == "box":
                t = _box_t(origin, d, prim[1], prim[2], prim[3])
            elif kind == "sphere":
                t = _sphere_t(origin, d, prim[1], prim[2])
            else:
                t = _cylinder_t(origin, d, prim[1], prim[2], prim[3])
            window_d = depth[v0:v1, u0:u1]
            window_i = ids[v0:v1, u0:u1]
            closer = t < window_d
            window_d[closer] = t[closer]
            window_i[closer] = oid
    background = ~np.isfinite(depth)
    depth[background] = 0.0
    return View(depth=depth.astype(np.float32), ids=ids)


def render_views(scene: Scene, rig: CameraRig) -> ViewSet:
    """Render every rig camera. Pure function of (scene, rig)."""
    return ViewSet([render_camera(scene, cam) for cam in rig.cameras])
