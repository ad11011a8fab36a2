"""World-state types for the tabletop simulator.

Everything lives in a right-handed world frame with z up and the table
surface at z = 0. Cameras follow the usual pinhole convention: x right,
y down, z forward; the extrinsic (R, t) maps world points into the camera
frame as p_cam = R @ p_world + t.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .colors import display_name


def _vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=float).reshape(3)
    return a.copy()


def yaw_matrix(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class Box:
    half_extents: np.ndarray

    def __post_init__(self):
        self.half_extents = _vec3(self.half_extents)
        if not np.all(self.half_extents > 0):
            raise ValueError("box half extents must be positive")


@dataclass
class Cylinder:
    radius: float
    height: float

    def __post_init__(self):
        if self.radius <= 0 or self.height <= 0:
            raise ValueError("cylinder radius and height must be positive")


@dataclass
class Sphere:
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")


@dataclass
class Prismatic:
    """A fixed body with a slider that travels along an axis.

    The slider center sits at body position + slider_offset +
    axis * travel * fraction (all in the object frame before yaw).
    A ratcheting joint (e.g. a latching button) only advances when pushed;
    slide_joint steps can still move it both ways.
    """

    body_half: np.ndarray
    slider_half: np.ndarray
    slider_offset: np.ndarray
    axis: np.ndarray
    travel: float
    fraction: float = 0.0
    ratchet: bool = False

    def __post_init__(self):
        self.body_half = _vec3(self.body_half)
        self.slider_half = _vec3(self.slider_half)
        self.slider_offset = _vec3(self.slider_offset)
        axis = _vec3(self.axis)
        n = np.linalg.norm(axis)
        if n == 0:
            raise ValueError("prismatic axis must be nonzero")
        self.axis = axis / n
        if self.travel <= 0:
            raise ValueError("prismatic travel must be positive")
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("fraction must be in [0, 1]")


Shape = Box | Cylinder | Sphere | Prismatic


@dataclass
class SceneObject:
    id: int
    raw_name: str
    color: tuple[int, int, int]
    shape: Shape
    position: np.ndarray
    yaw: float = 0.0
    graspable: bool = False
    is_location: bool = False
    color_varies: bool = False

    def __post_init__(self):
        if self.id <= 0:
            raise ValueError("object ids must be positive (0 is background)")
        self.position = _vec3(self.position)
        self.color = tuple(int(c) for c in self.color)

    def copy(self) -> "SceneObject":
        shape = replace(self.shape)
        return replace(self, shape=shape, position=self.position.copy())

    def display_name(self) -> str:
        return display_name(self.raw_name, self.color, self.color_varies)

    # -- geometric queries -------------------------------------------------

    def height(self) -> float:
        s = self.shape
        if isinstance(s, Box):
            return 2.0 * s.half_extents[2]
        if isinstance(s, Cylinder):
            return s.height
        if isinstance(s, Sphere):
            return 2.0 * s.radius
        lo, hi = self.aabb()
        return hi[2] - lo[2]

    def slider_center(self) -> np.ndarray:
        s = self.shape
        if not isinstance(s, Prismatic):
            raise TypeError("slider_center only applies to prismatic objects")
        local = s.slider_offset + s.axis * s.travel * s.fraction
        return self.position + yaw_matrix(self.yaw) @ local

    def _parts(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(center, half_extents-equivalent) pairs used for AABB bounds."""
        s = self.shape
        if isinstance(s, Box):
            return [(self.position, s.half_extents)]
        if isinstance(s, Cylinder):
            h = np.array([s.radius, s.radius, s.height / 2.0])
            return [(self.position, h)]
        if isinstance(s, Sphere):
            h = np.full(3, s.radius)
            return [(self.position, h)]
        return [
            (self.position, s.body_half),
            (self.slider_center(), s.slider_half),
        ]

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        """World axis-aligned bounds, yaw-aware."""
        rot = yaw_matrix(self.yaw)
        los, his = [], []
        for center, half in self._parts():
            # Extent of a rotated box along world axes.
            ext = np.abs(rot) @ half
            los.append(center - ext)
            his.append(center + ext)
        return np.min(los, axis=0), np.max(his, axis=0)

    def top_z(self) -> float:
        return float(self.aabb()[1][2])

    def bottom_z(self) -> float:
        return float(self.aabb()[0][2])

    def bounding_radius(self) -> float:
        lo, hi = self.aabb()
        return float(np.linalg.norm(hi - lo) / 2.0)

    def horizontal_radius(self) -> float:
        lo, hi = self.aabb()
        return float(np.linalg.norm((hi - lo)[:2]) / 2.0)


@dataclass
class Scene:
    objects: list[SceneObject]
    roles: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        ids = [o.id for o in self.objects]
        if len(ids) != len(set(ids)):
            raise ValueError("object ids must be unique within a scene")

    def copy(self) -> "Scene":
        return Scene(objects=[o.copy() for o in self.objects], roles=dict(self.roles))

    def object_by_id(self, oid: int) -> SceneObject:
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(f"no object with id {oid}")

    def role_object(self, role: str) -> SceneObject:
        return self.object_by_id(self.roles[role])

    def inventory(self) -> list[tuple[int, str]]:
        """(id, display name) for every object with a displayable name."""
        out = []
        for o in self.objects:
            try:
                out.append((o.id, o.display_name()))
            except ValueError:
                continue
        return out


@dataclass
class GripperState:
    position: np.ndarray
    open: bool = True
    held: int | None = None
    held_offset: np.ndarray | None = None

    def __post_init__(self):
        self.position = _vec3(self.position)
        if self.held is not None and self.open:
            raise ValueError("a held object implies a closed gripper")
        if self.held_offset is not None:
            self.held_offset = _vec3(self.held_offset)

    def copy(self) -> "GripperState":
        return GripperState(
            position=self.position.copy(),
            open=self.open,
            held=self.held,
            held_offset=None if self.held_offset is None else self.held_offset.copy(),
        )


# -- cameras ----------------------------------------------------------------

DEFAULT_RESOLUTION = 256


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray
    translation: np.ndarray
    role: str = ""

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        self.translation = _vec3(self.translation)
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-9:
            raise ValueError(f"rotation not orthonormal (max error {err:g})")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera extrinsic for a camera at `eye` looking at `target`."""
    eye = _vec3(eye)
    forward = _vec3(target) - eye
    n = np.linalg.norm(forward)
    if n == 0:
        raise ValueError("eye and target coincide")
    z = forward / n
    up = _vec3(up)
    if np.linalg.norm(np.cross(z, up)) < 1e-9:
        up = np.array([1.0, 0.0, 0.0])
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    rot = np.stack([x, y, z])
    return rot, -rot @ eye


def _pinhole(eye, target, role: str, resolution: int, up=(0.0, 0.0, 1.0)) -> CameraModel:
    rot, t = look_at(eye, target, up)
    f = float(resolution)
    c = resolution / 2.0
    return CameraModel(
        fx=f, fy=f, cx=c, cy=c,
        width=resolution, height=resolution,
        rotation=rot, translation=t, role=role,
    )


WRIST_OFFSET = np.array([0.0, 0.0, 0.30])


@dataclass
class CameraRig:
    cameras: list[CameraModel]

    def __post_init__(self):
        if len(self.cameras) < 1:
            raise ValueError("a rig needs at least one camera")

    @property
    def num_views(self) -> int:
        return len(self.cameras)

    def roles(self) -> list[str]:
        return [c.role for c in self.cameras]

    def posed(self, gripper_position) -> "CameraRig":
        """Rig with any wrist camera re-aimed at the current gripper pose.

        The wrist camera hovers a fixed offset above the gripper looking
        straight down; other cameras are static.
        """
        gp = _vec3(gripper_position)
        cams = []
        for cam in self.cameras:
            if cam.role == "wrist":
                rot, t = look_at(gp + WRIST_OFFSET, gp)
                cams.append(replace(cam, rotation=rot, translation=t))
            else:
                cams.append(cam)
        return CameraRig(cams)


def default_rig(resolution: int = DEFAULT_RESOLUTION) -> CameraRig:
    """Four-camera rig: front, both shoulders, and a gripper-tracking wrist."""
    center = (0.0, 0.0, 0.05)
    cams = [
        _pinhole((0.85, 0.0, 0.55), center, "front", resolution),
        _pinhole((0.35, 0.65, 0.65), center, "left_shoulder", resolution),
        _pinhole((0.35, -0.65, 0.65), center, "right_shoulder", resolution),
        _pinhole((0.0, 0.0, 0.45), (0.0, 0.0, 0.15), "wrist", resolution),
    ]
    return CameraRig(cams)


# -- rendered views -----------------------------------------------------------


@dataclass
class View:
    """One camera's depth map plus per-pixel instance ids (0 = background)."""

    depth: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        if self.depth.shape != self.ids.shape:
            raise ValueError("depth and id maps must share a resolution")

    def mask_for(self, oid: int) -> np.ndarray:
        return self.ids == oid


@dataclass
class ViewSet:
    views: list[View]

    def __len__(self) -> int:
        return len(self.views)

    def __iter__(self):
        return iter(self.views)

    def __getitem__(self, i: int) -> View:
        return self.views[i]

    def masks_for(self, oid: int) -> list[np.ndarray]:
        return [v.mask_for(oid) for v in self.views]

    def visible_ids(self) -> set[int]:
        ids: set[int] = set()
        for v in self.views:
            ids.update(int(i) for i in np.unique(v.ids) if i != 0)
        return ids

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for v in self.views:
            h.update(np.ascontiguousarray(v.depth).tobytes())
            h.update(np.ascontiguousarray(v.ids).tobytes())
        return h.hexdigest()


# -- debug serialization ------------------------------------------------------


def _shape_to_json(s: Shape) -> dict:
    if isinstance(s, Box):
        return {"kind": "box", "half_extents": s.half_extents.tolist()}
    if isinstance(s, Cylinder):
        return {"kind": "cylinder", "radius": s.radius, "height": s.height}
    if isinstance(s, Sphere):
        return {"kind": "sphere", "radius": s.radius}
    return {
        "kind": "prismatic",
        "body_half": s.body_half.tolist(),
        "slider_half": s.slider_half.tolist(),
        "slider_offset": s.slider_offset.tolist(),
        "axis": s.axis.tolist(),
        "travel": s.travel,
        "fraction": s.fraction,
        "ratchet": s.ratchet,
    }


def shape_from_json(d: dict) -> Shape:
    kind = d["kind"]
    if kind == "box":
        return Box(half_extents=np.asarray(d["half_extents"]))
    if kind == "cylinder":
        return Cylinder(radius=d["radius"], height=d["height"])
    if kind == "sphere":
        return Sphere(radius=d["radius"])
    if kind == "prismatic":
        return Prismatic(
            body_half=np.asarray(d["body_half"]),
            slider_half=np.asarray(d["slider_half"]),
            slider_offset=np.asarray(d["slider_offset"]),
            axis=np.asarray(d["axis"]),
            travel=d["travel"],
            fraction=d.get("fraction", 0.0),
            ratchet=d.get("ratchet", False),
        )
    raise ValueError(f"unknown shape kind {kind!r}")


def scene_to_json(scene: Scene) -> str:
    objs = [
        {
            "id": o.id,
            "raw_name": o.raw_name,
            "color": list(o.color),
            "shape": _shape_to_json(o.shape),
            "position": o.position.tolist(),
            "yaw": o.yaw,
            "graspable": o.graspable,
            "is_location": o.is_location,
            "color_varies": o.color_varies,
        }
        for o in scene.objects
    ]
    return json.dumps({"objects": objs, "roles": scene.roles}, indent=2, sort_keys=True)


def scene_from_json(text: str) -> Scene:
    d = json.loads(text)
    objects = [
        SceneObject(
            id=o["id"],
            raw_name=o["raw_name"],
            color=tuple(o["color"]),
            shape=shape_from_json(o["shape"]),
            position=np.asarray(o["position"]),
            yaw=o["yaw"],
            graspable=o["graspable"],
            is_location=o["is_location"],
            color_varies=o["color_varies"],
        )
        for o in d["objects"]
    ]
    return Scene(objects=objects, roles={k: int(v) for k, v in d["roles"].items()})
