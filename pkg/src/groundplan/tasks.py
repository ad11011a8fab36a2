"""Task scripts: per-task object roles, plan annotations and success predicates.

A task script is the one-time annotation that makes a scripted task
generatable: which objects must exist, the subplan sequence over their
roles, and a success predicate decidable from scene + gripper state alone.
Suites are plain JSON so new tasks are data, not code.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .planlang import ACTIONS
from .scene import GripperState, Scene, SceneObject, Shape, shape_from_json

GROUPS = ("L1", "L2", "L3", "L4")


class PredicateError(KeyError):
    """A success predicate referenced a role or id missing from the scene."""


@dataclass(frozen=True)
class ObjectSpec:
    """One required object role in a task."""

    role: str
    raw_name: str
    shape: dict
    color: tuple[int, int, int]
    color_varies: bool = False
    graspable: bool = False
    is_location: bool = False
    height: float | None = None  # fixed center z; default rests on the table
    fixed_yaw: float | None = None

    def build_shape(self) -> Shape:
        return shape_from_json(self.shape)


@dataclass(frozen=True)
class PlanSlot:
    action: str
    object_role: str | None = None
    location_role: str | None = None

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise ValueError(f"unknown action {self.action!r}")


@dataclass(frozen=True)
class DistractorConfig:
    min_count: int = 0
    max_count: int = 2

    def __post_init__(self):
        if not 0 <= self.min_count <= self.max_count <= 3:
            raise ValueError("distractor counts must satisfy 0 <= min <= max <= 3")


@dataclass(frozen=True)
class TaskScript:
    name: str
    variation: int
    group: str
    instruction: str
    objects: tuple[ObjectSpec, ...]
    plan: tuple[PlanSlot, ...]
    success: dict
    distractors: DistractorConfig = DistractorConfig()
    tags: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.plan:
            raise ValueError("plan sequence must be non-empty")
        if self.group not in GROUPS:
            raise ValueError(f"group must be one of {GROUPS}")
        roles = {o.role for o in self.objects}
        for slot in self.plan:
            for role in (slot.object_role, slot.location_role):
                if role is not None and role not in roles:
                    raise ValueError(f"plan references unknown role {role!r}")

    @property
    def key(self) -> str:
        return f"{self.name}+{self.variation}"

    def digest(self) -> str:
        return hashlib.sha256(
            json.dumps(task_to_json(self), sort_keys=True).encode()
        ).hexdigest()


# -- success predicates -------------------------------------------------------


def _resolve(scene: Scene, role: str) -> SceneObject:
    oid = scene.roles.get(role)
    if oid is None:
        raise PredicateError(f"predicate references unbound role {role!r}")
    try:
        return scene.object_by_id(oid)
    except KeyError as e:
        raise PredicateError(str(e)) from e


def _eval_predicate(pred: dict, scene: Scene, gripper: GripperState) -> bool:
    kind = pred["kind"]
    if kind == "all_of":
        return all(_eval_predicate(p, scene, gripper) for p in pred["terms"])
    if kind == "object_within":
        obj = _resolve(scene, pred["object"])
        loc = _resolve(scene, pred["location"])
        if gripper.held == obj.id:
            return False  # a held object does not rest anywhere
        horiz = float(np.linalg.norm((obj.position - loc.position)[:2]))
        if horiz > pred["tol"]:
            return False
        # Resting on top of the location, or inside its volume.
        resting = abs(obj.bottom_z() - loc.top_z()) <= 0.015
        lo, hi = loc.aabb()
        inside = bool(np.all(obj.position >= lo) and np.all(obj.position <= hi))
        return resting or inside
    if kind == "object_near":
        obj = _resolve(scene, pred["object"])
        loc = _resolve(scene, pred["location"])
        if pred.get("require_held", False) and gripper.held != obj.id:
            return False
        return float(np.linalg.norm(obj.position - loc.position)) <= pred["tol"]
    if kind == "joint_at_least":
        obj = _resolve(scene, pred["object"])
        if not hasattr(obj.shape, "fraction"):
            raise PredicateError(f"role {pred['object']!r} is not articulated")
        return obj.shape.fraction >= pred["threshold"]
    if kind == "joint_at_most":
        obj = _resolve(scene, pred["object"])
        if not hasattr(obj.shape, "fraction"):
            raise PredicateError(f"role {pred['object']!r} is not articulated")
        return obj.shape.fraction <= pred["threshold"]
    raise ValueError(f"unknown predicate kind {kind!r}")


def check_success(scene: Scene, gripper: GripperState, task: TaskScript) -> bool:
    """Evaluate the task's success predicate against the current state."""
    return _eval_predicate(task.success, scene, gripper)


# -- suite (de)serialization ---------------------------------------------------


def task_to_json(task: TaskScript) -> dict:
    return {
        "name": task.name,
        "variation": task.variation,
        "group": task.group,
        "tags": list(task.tags),
        "instruction": task.instruction,
        "objects": [
            {
                "role": o.role,
                "raw_name": o.raw_name,
                "shape": o.shape,
                "color": list(o.color),
                "color_varies": o.color_varies,
                "graspable": o.graspable,
                "is_location": o.is_location,
                "height": o.height,
                "fixed_yaw": o.fixed_yaw,
            }
            for o in task.objects
        ],
        "plan": [
            {
                "action": s.action,
                "object": s.object_role,
                "location": s.location_role,
            }
            for s in task.plan
        ],
        "success": task.success,
        "distractors": {
            "min": task.distractors.min_count,
            "max": task.distractors.max_count,
        },
    }


def task_from_json(d: dict) -> TaskScript:
    objects = tuple(
        ObjectSpec(
            role=o["role"],
            raw_name=o["raw_name"],
            shape=o["shape"],
            color=tuple(o["color"]),
            color_varies=o.get("color_varies", False),
            graspable=o.get("graspable", False),
            is_location=o.get("is_location", False),
            height=o.get("height"),
            fixed_yaw=o.get("fixed_yaw"),
        )
        for o in d["objects"]
    )
    plan = tuple(
        PlanSlot(
            action=s["action"],
            object_role=s.get("object"),
            location_role=s.get("location"),
        )
        for s in d["plan"]
    )
    dis = d.get("distractors", {})
    return TaskScript(
        name=d["name"],
        variation=int(d["variation"]),
        group=d["group"],
        instruction=d["instruction"],
        objects=objects,
        plan=plan,
        success=d["success"],
        distractors=DistractorConfig(
            min_count=dis.get("min", 0), max_count=dis.get("max", 2)
        ),
        tags=tuple(d.get("tags", ())),
    )


def load_suite(path: str) -> list[TaskScript]:
    with open(path) as f:
        d = json.load(f)
    return [task_from_json(t) for t in d["tasks"]]


def save_suite(tasks: list[TaskScript], path: str) -> None:
    with open(path, "w") as f:
        json.dump({"tasks": [task_to_json(t) for t in tasks]}, f, indent=2, sort_keys=True)
        f.write("\n")


def builtin_suite() -> list[TaskScript]:
    """The suite shipped with the package (all four generalization groups)."""
    raw = resources.files("groundplan.data").joinpath("suite.json").read_text()
    return [task_from_json(t) for t in json.loads(raw)["tasks"]]


def suite_digest(tasks: list[TaskScript]) -> str:
    payload = json.dumps([task_to_json(t) for t in tasks], sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()
