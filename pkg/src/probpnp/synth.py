"""Seeded synthetic PnP scenes and their JSON representation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import jsonschema
import numpy as np

from . import geometry as geo
from .errors import SchemaError


@dataclass(frozen=True)
class SceneParams:
    pose_type: str = "6dof"
    n_points: int = 16
    noise_sigma: float = 0.0
    symmetry_order: int = 1
    extent: float = 0.5
    depth_range: tuple = (2.0, 6.0)
    weight: float = 1.0
    n_anchors: int = 0
    anchor_weight: float = 100.0
    fx: float = 500.0
    fy: float = 500.0
    cx: float = 320.0
    cy: float = 240.0

    def __post_init__(self):
        if self.pose_type not in geo.POSE_TYPES:
            raise ValueError(f"pose_type must be one of {geo.POSE_TYPES}")
        if self.n_points < 4:
            raise ValueError("n_points must be at least 4")
        if self.symmetry_order < 1 or self.n_points % self.symmetry_order:
            raise ValueError("n_points must be a multiple of symmetry_order")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")


@dataclass(frozen=True, eq=False)
class Scene:
    camera: geo.CameraIntrinsics
    y_gt: geo.Pose
    corr: geo.CorrespondenceSet
    noise_sigma: float = 0.0
    symmetry_order: int = 1
    seed: int = 0

    @property
    def pose_type(self) -> str:
        return self.y_gt.pose_type

    def __eq__(self, other):
        return (isinstance(other, Scene) and self.camera == other.camera and self.y_gt == other.y_gt
                and np.array_equal(self.corr.x3d, other.corr.x3d)
                and np.array_equal(self.corr.x2d, other.corr.x2d)
                and np.array_equal(self.corr.w2d, other.corr.w2d)
                and self.noise_sigma == other.noise_sigma
                and self.symmetry_order == other.symmetry_order and self.seed == other.seed)


def random_pose(pose_type: str, rng: np.random.Generator, depth_range=(2.0, 6.0)) -> geo.Pose:
    z = rng.uniform(*depth_range)
    t = np.array([rng.uniform(-0.3, 0.3) * z, rng.uniform(-0.2, 0.2) * z, z])
    if pose_type == "4dof":
        return geo.Pose4(t, rng.uniform(-np.pi, np.pi))
    return geo.Pose6(t, rng.normal(size=4))


def yaw_matrix(angle: float) -> np.ndarray:
    return geo.rotations("4dof", np.array([[0.0, 0.0, 0.0, angle]]))[0]


def observe(camera, pose: geo.Pose, x3d, noise_sigma=0.0, rng=None) -> np.ndarray:
    """Project object points under ``pose`` and add Gaussian pixel noise."""
    p = geo.transform_points(pose.pose_type, pose.vector[None], x3d)[0]
    x2d = np.stack([camera.fx * p[:, 0] / p[:, 2] + camera.cx,
                    camera.fy * p[:, 1] / p[:, 2] + camera.cy], -1)
    if noise_sigma > 0:
        x2d = x2d + rng.normal(scale=noise_sigma, size=x2d.shape)
    return x2d


def gen_scene(params: SceneParams = SceneParams(), seed: int = 0) -> Scene:
    """Generate a scene deterministically from ``(params, seed)``.

    With ``symmetry_order = s > 1`` every observed 2D point is paired with all ``s`` yaw-rotated
    copies of its 3D point, so the correspondence set (and the robust energy) is exactly
    invariant under a yaw rotation of the object by ``2 pi / s``. Only the first copy of each
    pair is geometrically correct.
    """
    rng = np.random.default_rng(seed)
    camera = geo.CameraIntrinsics(params.fx, params.fy, params.cx, params.cy)
    y_gt = random_pose(params.pose_type, rng, params.depth_range)
    s = params.symmetry_order
    base = rng.uniform(-params.extent, params.extent, size=(params.n_points // s, 3))
    x2_base = observe(camera, y_gt, base, params.noise_sigma, rng)
    x3d = np.concatenate([base @ yaw_matrix(2.0 * np.pi * k / s).T for k in range(s)])
    x2d = np.concatenate([x2_base] * s)
    w2d = np.full((len(x3d), 2), float(params.weight))
    if params.n_anchors:
        heights = np.linspace(-params.extent, params.extent, params.n_anchors)
        anchors = np.stack([np.zeros_like(heights), heights, np.zeros_like(heights)], -1)
        x3d = np.concatenate([x3d, anchors])
        x2d = np.concatenate([x2d, observe(camera, y_gt, anchors, params.noise_sigma, rng)])
        w2d = np.concatenate([w2d, np.full((len(anchors), 2), float(params.anchor_weight))])
    corr = geo.CorrespondenceSet(x3d, x2d, w2d)
    return Scene(camera, y_gt, corr, float(params.noise_sigma), int(s), int(seed))


def gen_object_views(params: SceneParams, n_views: int, seed: int = 0) -> list:
    """Several views of one rigid object: shared 3D points, independent random poses."""
    rng = np.random.default_rng(seed)
    camera = geo.CameraIntrinsics(params.fx, params.fy, params.cx, params.cy)
    x3d = rng.uniform(-params.extent, params.extent, size=(params.n_points, 3))
    w2d = np.full((params.n_points, 2), float(params.weight))
    scenes = []
    for _ in range(n_views):
        y_gt = random_pose(params.pose_type, rng, params.depth_range)
        x2d = observe(camera, y_gt, x3d, params.noise_sigma, rng)
        scenes.append(Scene(camera, y_gt, geo.CorrespondenceSet(x3d, x2d, w2d),
                            float(params.noise_sigma), 1, int(seed)))
    return scenes


# ---------------------------------------------------------------------------
# JSON

_VEC = {"type": "array", "items": {"type": "number"}}

SCENE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["camera", "pose_type", "y_gt", "points", "noise_sigma", "symmetry_order", "seed"],
    "properties": {
        "camera": {
            "type": "object",
            "additionalProperties": False,
            "required": ["fx", "fy", "cx", "cy"],
            "properties": {k: {"type": "number"} for k in ("fx", "fy", "cx", "cy")},
        },
        "pose_type": {"enum": list(geo.POSE_TYPES)},
        "y_gt": {
            "type": "object",
            "additionalProperties": False,
            "required": ["t"],
            "properties": {
                "t": dict(_VEC, minItems=3, maxItems=3),
                "theta": {"type": "number"},
                "q": dict(_VEC, minItems=4, maxItems=4),
            },
        },
        "points": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["x3d", "x2d", "w2d"],
                "properties": {
                    "x3d": dict(_VEC, minItems=3, maxItems=3),
                    "x2d": dict(_VEC, minItems=2, maxItems=2),
                    "w2d": dict(_VEC, minItems=2, maxItems=2),
                },
            },
        },
        "noise_sigma": {"type": "number", "minimum": 0},
        "symmetry_order": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
        # provenance block written by the command-line tool; ignored on load
        "meta": {"type": "object"},
    },
}


def pose_to_dict(pose: geo.Pose) -> dict:
    if pose.pose_type == "4dof":
        return {"t": pose.t.tolist(), "theta": float(pose.theta)}
    return {"t": pose.t.tolist(), "q": pose.l.tolist()}


def pose_from_dict(pose_type: str, d: dict) -> geo.Pose:
    key = "theta" if pose_type == "4dof" else "q"
    if key not in d:
        raise SchemaError(f"missing key {key!r} for pose_type {pose_type}", field=f"y_gt.{key}")
    if pose_type == "4dof":
        return geo.Pose4(d["t"], d["theta"])
    return geo.Pose6(d["t"], d["q"])


def scene_to_dict(scene: Scene) -> dict:
    c = scene.camera
    return {
        "camera": {"fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy},
        "pose_type": scene.pose_type,
        "y_gt": pose_to_dict(scene.y_gt),
        "points": [
            {"x3d": a.tolist(), "x2d": b.tolist(), "w2d": w.tolist()}
            for a, b, w in zip(scene.corr.x3d, scene.corr.x2d, scene.corr.w2d)
        ],
        "noise_sigma": scene.noise_sigma,
        "symmetry_order": scene.symmetry_order,
        "seed": scene.seed,
    }


def _field_path(err: jsonschema.ValidationError) -> str:
    path = ".".join(str(p) for p in err.absolute_path)
    if err.validator == "required":
        missing = err.message.split("'")[1] if "'" in err.message else ""
        path = f"{path}.{missing}" if path else missing
    return path or "<root>"


def scene_from_dict(doc) -> Scene:
    validator = jsonschema.Draft7Validator(SCENE_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise SchemaError(err.message, field=_field_path(err))
    try:
        c = doc["camera"]
        camera = geo.CameraIntrinsics(c["fx"], c["fy"], c["cx"], c["cy"])
        pts = doc["points"]
        corr = geo.CorrespondenceSet([p["x3d"] for p in pts], [p["x2d"] for p in pts],
                                     [p["w2d"] for p in pts])
        y_gt = pose_from_dict(doc["pose_type"], doc["y_gt"])
    except ValueError as exc:
        raise SchemaError(str(exc)) from exc
    return Scene(camera, y_gt, corr, float(doc["noise_sigma"]), int(doc["symmetry_order"]),
                 int(doc["seed"]))


def dumps_scene(scene: Scene) -> str:
    # repr-based float formatting round-trips binary64 exactly
    return json.dumps(scene_to_dict(scene), indent=1, sort_keys=True, allow_nan=False)


def _reject_constant(name):
    raise SchemaError(f"non-finite literal {name} is not allowed")


def loads_scene(text: str) -> Scene:
    try:
        doc = json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc.msg}", line=exc.lineno) from exc
    return scene_from_dict(doc)


def write_scene(scene: Scene, path: Union[str, Path]) -> None:
    Path(path).write_text(dumps_scene(scene) + "\n", encoding="utf-8")


def read_scene(path: Union[str, Path]) -> Scene:
    return loads_scene(Path(path).read_text(encoding="utf-8"))
