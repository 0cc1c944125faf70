"""Synthetic 2D driving world.

A scene is a smooth random road plus scattered landmarks. The ego follows the
road with pure-pursuit steering on unicycle dynamics. A frame's latent is the
ego-frame position of k fixed anchor landmarks plus speed and road curvature,
so pose can be recovered from any latent in closed form by rigid registration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, DegenerateGeometryError
from .rng import Rng


@dataclass(frozen=True)
class WorldConfig:
    n_landmarks: int = 12
    n_anchors: int = 3
    track_length: float = 30.0
    track_step: float = 0.05
    curvature_max: float = 0.35
    curvature_knot_spacing: float = 2.0
    landmark_box: tuple[float, float, float, float] = (-1.0, 4.0, -2.0, 2.0)
    min_landmark_separation: float = 0.3
    speed_range: tuple[float, float] = (0.05, 0.09)
    speed_variation: float = 0.015
    max_accel: float = 0.002
    max_turn: float = 0.06
    lookahead: float = 0.6
    layout_lookahead: tuple[float, ...] = (0.4, 0.8)
    layout: str = "bearings"

    def __post_init__(self):
        if self.layout not in LAYOUT_MODES:
            raise ContractViolation(f"layout must be one of {LAYOUT_MODES}, got {self.layout!r}")

    @property
    def latent_dim(self) -> int:
        return 2 * self.n_anchors + 2

    @property
    def layout_dim(self) -> int:
        road = 2 * len(self.layout_lookahead)
        bearings = 2 * self.n_anchors
        return {"road": road, "bearings": bearings, "road+bearings": road + bearings}[self.layout]


LAYOUT_MODES = ("road", "bearings", "road+bearings")


@dataclass
class Scene:
    landmarks: np.ndarray          # (n, 2) world
    track: np.ndarray              # (m, 2) dense road samples
    track_s: np.ndarray            # (m,) arc length
    track_heading: np.ndarray      # (m,)
    track_curvature: np.ndarray    # (m,)
    anchor_ids: np.ndarray         # (k,)
    cruise_speed: float
    speed_variation: float = 0.0
    seed: int = 0

    @property
    def waypoints(self) -> np.ndarray:
        stride = max(1, int(round(1.0 / max(self.track_s[1] - self.track_s[0], 1e-9))))
        return self.track[::stride]

    @property
    def anchors(self) -> np.ndarray:
        return self.landmarks[self.anchor_ids]


@dataclass
class EgoState:
    x: float
    y: float
    yaw: float
    v: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.yaw, self.v])


@dataclass
class Clip:
    latents: np.ndarray     # (F, d_z) float32
    actions: np.ndarray     # (F-1, 3) float32, pose i -> i+1
    layout: np.ndarray      # (F, layout_dim) float32
    poses: np.ndarray       # (F, 4) float32: x, y, yaw, v
    anchor_ids: np.ndarray  # (k,) uint32
    seed: int = 0

    @property
    def frames(self) -> int:
        return self.latents.shape[0]

    @property
    def frame_actions(self) -> np.ndarray:
        """Action aligned to each frame: the motion that produced it (zeros for frame 0)."""
        return np.concatenate([np.zeros((1, 3), np.float32), self.actions], axis=0)


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64)
    w = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if w.ndim == 0 else w


def rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


# ---------------------------------------------------------------------------
# scenes


def make_track(curvatures: np.ndarray, step: float):
    """Integrate a per-sample curvature profile into a road starting at the origin, heading 0."""
    m = len(curvatures)
    heading = np.concatenate([[0.0], np.cumsum(curvatures[:-1] * step)])
    pts = np.zeros((m, 2))
    pts[1:, 0] = np.cumsum(np.cos(heading[:-1]) * step)
    pts[1:, 1] = np.cumsum(np.sin(heading[:-1]) * step)
    s = np.arange(m) * step
    return pts, s, heading


def scene_from_track(track, track_s, heading, curvature, landmarks, n_anchors, cruise_speed,
                     speed_variation=0.0, seed=0) -> Scene:
    d = np.linalg.norm(landmarks - track[0], axis=1)
    anchor_ids = np.argsort(d, kind="stable")[:n_anchors].astype(np.uint32)
    return Scene(landmarks=np.asarray(landmarks, float), track=track, track_s=track_s,
                 track_heading=heading, track_curvature=curvature, anchor_ids=anchor_ids,
                 cruise_speed=float(cruise_speed), speed_variation=float(speed_variation), seed=seed)


def generate_scene(seed: int, config: WorldConfig = WorldConfig()) -> Scene:
    rng = Rng(seed).child("scene")
    m = int(round(config.track_length / config.track_step)) + 1
    n_knots = int(config.track_length / config.curvature_knot_spacing) + 2
    knots = rng.uniform(-config.curvature_max, config.curvature_max, n_knots)
    knot_s = np.arange(n_knots) * config.curvature_knot_spacing
    s = np.arange(m) * config.track_step
    curvature = np.interp(s, knot_s, knots)
    track, s, heading = make_track(curvature, config.track_step)

    x0, x1, y0, y1 = config.landmark_box
    landmarks: list[np.ndarray] = []
    while len(landmarks) < config.n_landmarks:
        p = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
        if all(np.linalg.norm(p - q) >= config.min_landmark_separation for q in landmarks):
            landmarks.append(p)
    cruise = rng.uniform(*config.speed_range)
    return scene_from_track(track, s, heading, curvature, np.array(landmarks), config.n_anchors,
                            cruise, config.speed_variation, seed)


def nearest_track_index(scene: Scene, x: float, y: float) -> int:
    d = (scene.track[:, 0] - x) ** 2 + (scene.track[:, 1] - y) ** 2
    return int(np.argmin(d))


def _track_point_at(scene: Scene, s: float) -> np.ndarray:
    s = min(max(s, 0.0), float(scene.track_s[-1]))
    return np.array([np.interp(s, scene.track_s, scene.track[:, 0]),
                     np.interp(s, scene.track_s, scene.track[:, 1])])


# ---------------------------------------------------------------------------
# dynamics


def target_speed(scene: Scene, s: float) -> float:
    return scene.cruise_speed + scene.speed_variation * math.sin(0.7 * s + scene.seed % 7)


def pure_pursuit(state: EgoState, scene: Scene, config: WorldConfig) -> tuple[float, float]:
    """(turn, accel) commands steering toward the road point one lookahead ahead."""
    i = nearest_track_index(scene, state.x, state.y)
    s_here = float(scene.track_s[i])
    target = _track_point_at(scene, s_here + config.lookahead)
    local = rot(-state.yaw) @ (target - np.array([state.x, state.y]))
    alpha = math.atan2(local[1], local[0])
    curvature = 2.0 * math.sin(alpha) / config.lookahead
    turn = float(np.clip(state.v * curvature, -config.max_turn, config.max_turn))
    accel = float(np.clip(target_speed(scene, s_here) - state.v, -config.max_accel, config.max_accel))
    return turn, accel


def step_unicycle(state: EgoState, turn: float, accel: float) -> EgoState:
    yaw = wrap_angle(state.yaw + turn)
    return EgoState(state.x + state.v * math.cos(yaw), state.y + state.v * math.sin(yaw), yaw,
                    state.v + accel)


def drive(scene: Scene, steps: int, config: WorldConfig = WorldConfig(),
          start: EgoState | None = None, controller=None) -> list[EgoState]:
    """Roll the ego forward for ``steps`` frames (including the start pose)."""
    if steps < 2:
        raise ContractViolation(f"drive needs at least 2 frames, got {steps}")
    state = start or EgoState(0.0, 0.0, 0.0, target_speed(scene, 0.0))
    poses = [state]
    for _ in range(steps - 1):
        turn, accel = (controller or pure_pursuit)(state, scene, config)
        state = step_unicycle(state, turn, accel)
        poses.append(state)
    return poses


# ---------------------------------------------------------------------------
# latents and layout


def encode_latent(pose: EgoState, scene: Scene, anchor_ids=None) -> np.ndarray:
    """[anchor ego-frame xy ..., speed, road curvature at the nearest road point]."""
    ids = scene.anchor_ids if anchor_ids is None else np.asarray(anchor_ids)
    anchors = scene.landmarks[ids]
    local = (anchors - np.array([pose.x, pose.y])) @ rot(-pose.yaw).T
    i = nearest_track_index(scene, pose.x, pose.y)
    return np.concatenate([local.reshape(-1), [pose.v, scene.track_curvature[i]]]).astype(np.float32)


def layout_tokens(pose: EgoState, scene: Scene, config: WorldConfig = WorldConfig()) -> np.ndarray:
    """Per-frame scene-structure tokens.

    ``road``: ego-frame positions of road points at fixed arc distances ahead.
    ``bearings``: unit direction (cos, sin) from the ego to each anchor in the
    ego frame, the 2D analogue of where a box lands in the image.
    """
    parts = []
    if "road" in config.layout:
        parts.append(_road_tokens(pose, scene, config))
    if "bearings" in config.layout:
        parts.append(_bearing_tokens(pose, scene))
    return np.concatenate(parts).astype(np.float32)


def _bearing_tokens(pose: EgoState, scene: Scene) -> np.ndarray:
    local = (scene.landmarks[scene.anchor_ids] - np.array([pose.x, pose.y])) @ rot(-pose.yaw).T
    norms = np.linalg.norm(local, axis=1, keepdims=True)
    return (local / np.maximum(norms, 1e-9)).reshape(-1)


def _road_tokens(pose: EgoState, scene: Scene, config: WorldConfig) -> np.ndarray:
    i = nearest_track_index(scene, pose.x, pose.y)
    s_here = float(scene.track_s[i])
    R = rot(-pose.yaw)
    pts = [R @ (_track_point_at(scene, s_here + d) - np.array([pose.x, pose.y]))
           for d in config.layout_lookahead]
    return np.concatenate(pts).astype(np.float32)


def recover_pose(latent, scene: Scene, anchor_ids=None, tol: float = 1e-9) -> EgoState:
    """Closed-form 2D rigid registration of the latent's anchor block onto the map."""
    ids = scene.anchor_ids if anchor_ids is None else np.asarray(anchor_ids)
    k = len(ids)
    if k < 2:
        raise DegenerateGeometryError("need at least two anchors")
    latent = np.asarray(latent, dtype=np.float64)
    if not np.isfinite(latent).all():
        raise DegenerateGeometryError("non-finite latent")
    q = latent[:2 * k].reshape(k, 2)
    p = scene.landmarks[ids]
    pc, qc = p.mean(axis=0), q.mean(axis=0)
    pd, qd = p - pc, q - qc
    if np.sum(pd * pd) < tol:
        raise DegenerateGeometryError("coincident anchors")
    s_cross = float(np.sum(qd[:, 0] * pd[:, 1] - qd[:, 1] * pd[:, 0]))
    s_dot = float(np.sum(qd * pd))
    if math.hypot(s_cross, s_dot) < tol * max(1.0, float(np.sum(pd * pd))):
        raise DegenerateGeometryError("latent anchor block collapsed")
    theta = math.atan2(s_cross, s_dot)
    t = pc - rot(theta) @ qc
    return EgoState(float(t[0]), float(t[1]), wrap_angle(theta), float(latent[2 * k]))


# ---------------------------------------------------------------------------
# actions


def actions_from_poses(poses) -> np.ndarray:
    """Relative motion (dx, dy, dyaw) of pose i+1 expressed in the frame of pose i."""
    arr = _pose_array(poses)
    if len(arr) < 2:
        raise ContractViolation("need at least two poses")
    out = np.zeros((len(arr) - 1, 3))
    for i in range(len(arr) - 1):
        x, y, yaw = arr[i, :3]
        d = rot(-yaw) @ (arr[i + 1, :2] - np.array([x, y]))
        out[i] = (d[0], d[1], wrap_angle(arr[i + 1, 2] - yaw))
    return out


def integrate_actions(start, actions) -> np.ndarray:
    """Inverse of :func:`actions_from_poses`: (n+1, 3) poses x, y, yaw."""
    s = _pose_array([start])[0]
    out = [s[:3].copy()]
    x, y, yaw = s[:3]
    for dx, dy, dyaw in np.asarray(actions, dtype=np.float64):
        d = rot(yaw) @ np.array([dx, dy])
        x, y, yaw = x + d[0], y + d[1], wrap_angle(yaw + dyaw)
        out.append(np.array([x, y, yaw]))
    return np.array(out)


def _pose_array(poses) -> np.ndarray:
    if isinstance(poses, np.ndarray):
        return poses.astype(np.float64)
    return np.array([p.as_array() if isinstance(p, EgoState) else p for p in poses], dtype=np.float64)


# ---------------------------------------------------------------------------
# clips and datasets


def make_clip(scene: Scene, frames: int, config: WorldConfig = WorldConfig()) -> Clip:
    poses = drive(scene, frames, config)
    return clip_from_poses(poses, scene, config)


def clip_from_poses(poses, scene: Scene, config: WorldConfig = WorldConfig()) -> Clip:
    # round first so everything stored is re-derivable from the stored poses
    arr = _pose_array(poses).astype(np.float32).astype(np.float64)
    poses = [EgoState(*row) for row in arr]
    return Clip(
        latents=np.stack([encode_latent(p, scene) for p in poses]),
        actions=actions_from_poses(poses).astype(np.float32),
        layout=np.stack([layout_tokens(p, scene, config) for p in poses]),
        poses=_pose_array(poses).astype(np.float32),
        anchor_ids=scene.anchor_ids.astype(np.uint32),
        seed=scene.seed,
    )


def clip_seed(dataset_seed: int, index: int) -> int:
    return Rng(dataset_seed).child("clip", index).seed


def make_dataset(seed: int, n_clips: int, frames: int, config: WorldConfig = WorldConfig()) -> list[Clip]:
    """Deterministic list of clips; each clip's scene is regenerated from its stored seed."""
    return [make_clip(generate_scene(clip_seed(seed, i), config), frames, config) for i in range(n_clips)]


def scene_for(clip: Clip, config: WorldConfig = WorldConfig()) -> Scene:
    return generate_scene(clip.seed, config)
