"""Grounded task planning for tabletop manipulation, end to end.

Subpackages cover the deterministic multi-camera simulator, the interleaved
plan language, dataset synthesis, the grounding-to-3D geometry pipeline,
verified training objectives, the closed plan-execute loop, and the offline
and online evaluation protocols.
"""

from .colors import COLOR_TABLE, display_name, nearest_color, refine_name
from .geometry import DbscanParams, LabeledPointCloud, categorize, dbscan_filter, fuse_views, unproject
from .objectives import SoftMask, TokenDistributionSequence, bce_mask, cross_entropy, dice_loss, iou, joint_grounding_loss
from .planlang import (
    ACTIONS,
    GroundedPlan,
    GroundedReference,
    PromptSpec,
    build_prompt,
    history_text,
    normalize_text,
    parse_plan,
    serialize_plan,
)
from .scene import CameraModel, CameraRig, GripperState, Scene, SceneObject, ViewSet, default_rig
from .simulate import Simulation, sample_scene, step_motion
from .tasks import TaskScript, builtin_suite, check_success, load_suite

__version__ = "0.1.0"
