"""Deterministic synthetic scenes with analytically exact geometry.

Scenes consist of a far background plane, a near stuff panel, static
cuboids and (optionally) one rigid moving cuboid riding in front, all
textured procedurally. Depth, panoptic labels, poses and ground-truth flow
come from per-pixel ray casting under the camera and object motion, so they
are exact up to float64 rounding. Identical configs produce bit-identical
scenes.

Object depth bands are kept disjoint so that every label boundary is also a
depth discontinuity; co-visibility checks can then separate occlusions from
genuine correspondences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraModel, DepthMap, Pose, se3_exp
from .odometry import DynamicMask, FrameState
from .tracking import PanopticMap
from .warpfusion import FlowField

BACKGROUND_CLASS = 1
PANEL_CLASS = 2
STATIC_BOX_CLASS = 10
MOVING_BOX_CLASS = 11

MIN_MOVING_COVERAGE = 0.155


class SyntheticError(ValueError):
    pass


@dataclass
class SynthConfig:
    frames: int = 8
    width: int = 64
    height: int = 64
    seed: int = 0
    moving: bool = True

    def __post_init__(self):
        if self.frames < 1:
            raise SyntheticError("scene needs at least one frame")
        if self.width < 16 or self.height < 16:
            raise SyntheticError("scene needs at least 16x16 pixels")


@dataclass
class _Object:
    kind: str  # plane | rect | box
    class_id: int
    instance_id: int
    params: dict
    velocity: np.ndarray  # world units per frame

    def offset(self, t: float) -> np.ndarray:
        return self.velocity * t


@dataclass
class Scene:
    config: SynthConfig
    cam: CameraModel
    poses: list  # world-from-camera Pose per frame
    objects: list
    texture_coeffs: dict  # instance key -> (3, 4) sine coefficients
    dynamic_noise: np.ndarray  # (frames, H, W, 2)


def _camera(config: SynthConfig) -> CameraModel:
    return CameraModel(
        fx=float(config.width),
        fy=float(config.width),
        cx=(config.width - 1) / 2.0,
        cy=(config.height - 1) / 2.0,
        width=config.width,
        height=config.height,
    )


def _camera_trajectory(rng, frames: int):
    poses = [Pose.identity()]
    for _ in range(frames - 1):
        step = np.concatenate(
            [
                rng.normal(0.0, 0.0020, size=3),  # gentle rotation, radians
                [
                    rng.normal(0.0, 0.010),
                    rng.normal(0.0, 0.008),
                    rng.uniform(0.03, 0.06),  # forward motion toward the scene
                ],
            ]
        )
        poses.append(poses[-1].compose(se3_exp(step)))
    return poses


def build_scene(config: SynthConfig) -> Scene:
    """Lay out the scene and per-frame camera poses for a config."""
    rng = np.random.default_rng(config.seed)
    cam = _camera(config)
    poses = _camera_trajectory(rng, config.frames)

    objects = [
        _Object(
            "plane",
            BACKGROUND_CLASS,
            0,
            dict(z=float(rng.uniform(10.5, 14.0))),
            np.zeros(3),
        )
    ]
    # near stuff panel occupying one side, clearly in front of the background
    panel_z = float(rng.uniform(8.0, 9.5))
    side = rng.integers(0, 2)
    half_w = panel_z * 0.55
    x0, x1 = (-half_w * 1.6, -half_w * 0.35) if side == 0 else (half_w * 0.35, half_w * 1.6)
    objects.append(
        _Object(
            "rect",
            PANEL_CLASS,
            0,
            dict(z=panel_z, x0=x0, x1=x1, y0=-half_w * 1.3, y1=half_w * 1.3),
            np.zeros(3),
        )
    )
    for k in range(2):
        z = float(rng.uniform(4.5, 7.0))
        cx = float(rng.uniform(-0.45, 0.45)) * z + (0.8 if k == 0 else -0.8)
        cy = float(rng.uniform(-0.30, 0.30)) * z
        half = float(rng.uniform(0.35, 0.6))
        objects.append(
            _Object(
                "box",
                STATIC_BOX_CLASS,
                k + 1,
                dict(center=np.array([cx, cy, z]), half=np.array([half, half, half * 0.8])),
                np.zeros(3),
            )
        )
    if config.moving:
        z = float(rng.uniform(2.8, 4.0))
        direction = 1.0 if rng.random() < 0.5 else -1.0
        speed = float(rng.uniform(0.05, 0.09))
        travel = speed * max(config.frames - 1, 1)
        start_x = -direction * travel / 2.0
        half = float(rng.uniform(0.5, 0.7))
        velocity = np.array([direction * speed, float(rng.uniform(-0.015, 0.015)), 0.0])
        objects.append(
            _Object(
                "box",
                MOVING_BOX_CLASS,
                3,
                dict(
                    center=np.array([start_x, float(rng.uniform(-0.2, 0.2)), z]),
                    half=np.array([half, half, half * 0.7]),
                ),
                velocity,
            )
        )

    coeffs = {}
    for obj in objects:
        key = (obj.class_id, obj.instance_id)
        coeffs[key] = np.stack(
            [
                np.concatenate([rng.uniform(1.5, 4.5, size=3), rng.uniform(0, 2 * np.pi, size=1)])
                for _ in range(3)
            ]
        )
    noise = rng.normal(0.0, 0.3, size=(config.frames, config.height, config.width, 2))

    scene = Scene(config, cam, poses, objects, coeffs, noise)
    if config.moving:
        _ensure_moving_coverage(scene, rng)
    return scene


def _ensure_moving_coverage(scene: Scene, rng):
    """Grow the moving cuboid until it covers enough of the image."""
    moving = scene.objects[-1]
    for _ in range(12):
        frac = min(_moving_fraction(scene, t) for t in range(scene.config.frames))
        if frac >= MIN_MOVING_COVERAGE:
            return
        moving.params["half"] = moving.params["half"] * 1.15
    raise SyntheticError("could not reach the required moving-object coverage")


def _moving_fraction(scene: Scene, t: int) -> float:
    _, _, hit = _cast_frame(scene, t)
    return float(np.mean(hit == len(scene.objects) - 1))


def _rays_world(scene: Scene, t: int):
    cam = scene.cam
    xs, ys = np.meshgrid(
        np.arange(cam.width, dtype=np.float64), np.arange(cam.height, dtype=np.float64)
    )
    d = np.stack([(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy, np.ones_like(xs)], axis=-1)
    pose = scene.poses[t]
    R = pose.rotation_matrix()
    return pose.t, d @ R.T  # origin, world direction scaled so s equals camera depth


def _cast_frame(scene: Scene, t: int):
    """Ray-cast frame t; returns (depth s, world hit points, winning object)."""
    origin, dirs = _rays_world(scene, t)
    h, w = dirs.shape[:2]
    best_s = np.full((h, w), np.inf)
    winner = np.full((h, w), -1, dtype=np.int64)
    for k, obj in enumerate(scene.objects):
        s = _intersect(obj, origin, dirs, t)
        better = s < best_s
        best_s = np.where(better, s, best_s)
        winner = np.where(better, k, winner)
    if np.any(winner < 0):
        raise SyntheticError("a ray escaped the scene; background must cover every pixel")
    points = origin + best_s[..., None] * dirs
    return best_s, points, winner


def _intersect(obj: _Object, origin, dirs, t: float):
    """Ray parameter of the first hit, inf where the ray misses."""
    off = obj.offset(t)
    o = origin - off
    with np.errstate(divide="ignore", invalid="ignore"):
        if obj.kind in ("plane", "rect"):
            s = (obj.params["z"] - o[2]) / dirs[..., 2]
            s = np.where((dirs[..., 2] > 1e-12) & (s > 1e-6), s, np.inf)
            if obj.kind == "rect":
                x = o[0] + s * dirs[..., 0]
                y = o[1] + s * dirs[..., 1]
                inside = (
                    (x >= obj.params["x0"])
                    & (x <= obj.params["x1"])
                    & (y >= obj.params["y0"])
                    & (y <= obj.params["y1"])
                )
                s = np.where(inside, s, np.inf)
            return s
        lo = obj.params["center"] - obj.params["half"]
        hi = obj.params["center"] + obj.params["half"]
        t_lo = (lo - o) / dirs
        t_hi = (hi - o) / dirs
        t_near = np.minimum(t_lo, t_hi).max(axis=-1)
        t_far = np.maximum(t_lo, t_hi).min(axis=-1)
        hit = (t_near <= t_far) & (t_near > 1e-6)
        return np.where(hit, t_near, np.inf)


def _texture(scene: Scene, obj: _Object, local_points):
    co = scene.texture_coeffs[(obj.class_id, obj.instance_id)]
    rgb = np.empty(local_points.shape[:-1] + (3,))
    for c in range(3):
        a0, a1, a2, phase = co[c]
        rgb[..., c] = 0.5 + 0.35 * np.sin(
            a0 * local_points[..., 0] + a1 * local_points[..., 1] + a2 * local_points[..., 2] + phase
        )
    return np.clip(rgb, 0.0, 1.0)


def render_frame(scene: Scene, t: int):
    """Exact depth, labels, color and flow toward frame t + 1 (if any)."""
    s, points, winner = _cast_frame(scene, t)
    h, w = s.shape
    depth = DepthMap(s.copy(), np.ones((h, w), dtype=bool))

    sem = np.zeros((h, w), dtype=np.uint16)
    inst = np.zeros((h, w), dtype=np.uint16)
    rgb = np.zeros((h, w, 3))
    dyn_scores = np.empty((h, w, 2))
    for k, obj in enumerate(scene.objects):
        m = winner == k
        if not np.any(m):
            continue
        sem[m] = obj.class_id
        inst[m] = obj.instance_id
        local = points[m] - obj.offset(t)
        rgb[m] = _texture(scene, obj, local)
        is_moving = bool(np.any(obj.velocity))
        dyn_scores[m] = [-2.5, 2.5] if is_moving else [2.5, -2.5]
    dyn_scores = dyn_scores + scene.dynamic_noise[t]

    flow = None
    if t + 1 < scene.config.frames:
        moved = points.copy()
        for k, obj in enumerate(scene.objects):
            if np.any(obj.velocity):
                moved[winner == k] += obj.offset(t + 1) - obj.offset(t)
        nxt = scene.poses[t + 1].inverse()
        cam_pts = moved @ nxt.rotation_matrix().T + nxt.t
        z = cam_pts[..., 2]
        ok = z > 1e-6
        zs = np.where(ok, z, 1.0)
        u = scene.cam.fx * cam_pts[..., 0] / zs + scene.cam.cx
        v = scene.cam.fy * cam_pts[..., 1] / zs + scene.cam.cy
        grid_x, grid_y = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
        values = np.stack([u - grid_x, v - grid_y], axis=-1)
        values[~ok] = 1e10
        flow = FlowField(values, ok)

    pan = PanopticMap(sem, inst)
    # Raw correlation scores are pessimistic on their own; the panoptic
    # confidence boost is what promotes trustworthy static pixels.
    conf = np.full((h, w, 2), -4.0)
    return FrameState(
        index=t,
        depth=depth,
        image=np.floor(np.clip(rgb, 0, 1) * 255.0 + 0.5).astype(np.uint8),
        panoptic=pan,
        flow_to_next=flow,
        confidence=conf,
        dynamic=DynamicMask(dyn_scores),
        pose=scene.poses[t],
    )


def generate_frames(config: SynthConfig):
    """All frame states plus the camera and ground-truth trajectory."""
    scene = build_scene(config)
    frames = [render_frame(scene, t) for t in range(config.frames)]
    trajectory = [(float(t), scene.poses[t]) for t in range(config.frames)]
    return frames, scene.cam, trajectory
