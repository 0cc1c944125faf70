"""Sliding-window autoregressive rollout, the SRR rollout cache and the closed-loop harness.

Frame indices in this module are 1-based and absolute: a rollout starts from
ground-truth frames 1..T and chunk n covers frames s_n+1 .. s_n+K with
s_n = T + (n-1) K.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as tn
from . import worldsim as ws
from .diffusion import SamplerConfig, euler_sample
from .errors import ContractViolation, DegenerateGeometryError
from .rng import Rng


def chunk_boundary(n: int, T: int, K: int) -> int:
    """s_n = T + (n - 1) K."""
    return T + (n - 1) * K


class HistoryBuffer:
    """Fixed-capacity window of the most recent T frames and their controls."""

    def __init__(self, frames, layout, actions, newest_index: int | None = None):
        frames = np.asarray(frames)
        if frames.ndim == 2:
            frames, layout, actions = frames[None], np.asarray(layout)[None], np.asarray(actions)[None]
        self.capacity = frames.shape[1]
        self.frames = frames
        self.layout = np.asarray(layout)
        self.actions = np.asarray(actions)
        self.newest_index = self.capacity if newest_index is None else newest_index

    def __len__(self) -> int:
        return self.frames.shape[1]

    def window_controls(self, layout, actions):
        return (np.concatenate([self.layout, layout], axis=1),
                np.concatenate([self.actions, actions], axis=1))

    def append(self, chunk, layout, actions) -> None:
        k = chunk.shape[1]
        self.frames = np.concatenate([self.frames, chunk], axis=1)[:, k:]
        self.layout = np.concatenate([self.layout, layout], axis=1)[:, k:]
        self.actions = np.concatenate([self.actions, actions], axis=1)[:, k:]
        self.newest_index += k


@dataclass
class RolloutTrajectory:
    latents: np.ndarray          # (B, N*K, d_z)
    T: int
    K: int
    seed: int = 0
    fingerprint: str = ""

    @property
    def n_chunks(self) -> int:
        return self.latents.shape[1] // self.K if self.K else 0

    @property
    def boundaries(self) -> list[int]:
        return [chunk_boundary(n, self.T, self.K) for n in range(1, self.n_chunks + 1)]


def ar_step(model, buffer: HistoryBuffer, layout, actions, sampler: SamplerConfig, rng: Rng,
            drop_conditions: bool = False) -> np.ndarray:
    """Generate the next chunk from the buffer, then slide the buffer forward."""
    if len(buffer) != buffer.capacity or buffer.capacity < 1:
        raise ContractViolation("history buffer is not full")
    layout = np.asarray(layout)
    actions = np.asarray(actions)
    k = layout.shape[1]
    if actions.shape[1] != k:
        raise ContractViolation(f"controls disagree on chunk length: {layout.shape} vs {actions.shape}")
    lay, act = buffer.window_controls(layout, actions)
    with tn.no_grad():
        chunk = euler_sample(model, buffer.frames, lay, act, k, sampler, rng,
                             drop_conditions=drop_conditions)
    chunk = np.asarray(chunk)
    buffer.append(chunk, layout, actions)
    return chunk


def rollout(model, history, layout_track, action_track, n_chunks: int, k: int,
            sampler: SamplerConfig, rng: Rng) -> RolloutTrajectory:
    """Chain ``n_chunks`` AR steps from a ground-truth history.

    ``layout_track``/``action_track`` are frame-aligned over all T + N K frames
    (the first T rows belong to the history).
    """
    history = np.asarray(history)
    if history.ndim == 2:
        history = history[None]
        layout_track = np.asarray(layout_track)[None]
        action_track = np.asarray(action_track)[None]
    b, T, dz = history.shape
    need = T + n_chunks * k
    if layout_track.shape[1] < need or action_track.shape[1] < need:
        raise ContractViolation(f"control track covers {layout_track.shape[1]} frames, need {need}")
    buf = HistoryBuffer(history, layout_track[:, :T], action_track[:, :T])
    chunks = []
    for n in range(1, n_chunks + 1):
        s = chunk_boundary(n, T, k)
        chunks.append(ar_step(model, buf, layout_track[:, s:s + k], action_track[:, s:s + k],
                              sampler, rng.child("chunk", n)))
    latents = np.concatenate(chunks, axis=1) if chunks else np.zeros((b, 0, dz), history.dtype)
    fp = model.fingerprint() if hasattr(model, "fingerprint") else ""
    return RolloutTrajectory(latents, T, k, seed=rng.seed, fingerprint=fp)


def rollout_clips(model, clips, T: int, n_chunks: int, k: int, sampler: SamplerConfig,
                  rng: Rng, start: int = 0) -> RolloutTrajectory:
    """Open-loop rollout of a batch of clips with ground-truth controls."""
    end = start + T + n_chunks * k
    history = np.stack([c.latents[start:start + T] for c in clips])
    layout = np.stack([c.layout[start:end] for c in clips])
    actions = np.stack([c.frame_actions[start:end] for c in clips])
    return rollout(model, history, layout, actions, n_chunks, k, sampler, rng)


# ---------------------------------------------------------------------------
# SRR cache


@dataclass
class RolloutCache:
    """Per-clip rollout trajectories, regenerated every R optimizer steps."""

    T: int
    K: int
    depth: int
    trajectories: np.ndarray | None = None     # (n_clips, depth*K, d_z)
    last_refresh: int | None = None
    fingerprint: str = ""
    refreshes: int = 0

    def is_stale(self, model) -> bool:
        return self.trajectories is None or self.fingerprint != model.fingerprint()

    def sequence(self, index: int, clip: ws.Clip) -> np.ndarray:
        """Rollout-corrupted sequence for one clip: GT frames 1..T followed by the cache."""
        return np.concatenate([clip.latents[:self.T], self.trajectories[index]], axis=0)


def refresh_cache(cache: RolloutCache, model, clips, R: int, step: int, sampler: SamplerConfig,
                  rng: Rng, batch: int = 64) -> RolloutCache:
    """Regenerate every trajectory if R steps have passed since the last refresh."""
    due = cache.trajectories is None or cache.last_refresh is None or step - cache.last_refresh >= R
    if not due:
        return cache
    parts = []
    for lo in range(0, len(clips), batch):
        traj = rollout_clips(model, clips[lo:lo + batch], cache.T, cache.depth, cache.K, sampler,
                             rng.child("refresh", step, lo))
        parts.append(traj.latents)
    cache.trajectories = np.concatenate(parts, axis=0)
    cache.last_refresh = step
    cache.fingerprint = model.fingerprint()
    cache.refreshes += 1
    return cache


# ---------------------------------------------------------------------------
# closed loop


class PursuitController:
    """Scripted planner: re-plans K frames of pure pursuit from a recovered pose."""

    def __init__(self, world: ws.WorldConfig = ws.WorldConfig()):
        self.world = world

    def __call__(self, pose: ws.EgoState, scene: ws.Scene, step: int, k: int):
        lo, hi = self.world.speed_range
        state = ws.EgoState(pose.x, pose.y, pose.yaw,
                            float(np.clip(pose.v, lo - self.world.speed_variation,
                                          hi + self.world.speed_variation)))
        poses = ws.drive(scene, k + 1, self.world, start=state)
        actions = ws.actions_from_poses(poses).astype(np.float32)
        layout = np.stack([ws.layout_tokens(p, scene, self.world) for p in poses[1:]])
        return actions, layout


class ZeroActionController:
    """Commands no motion: zero actions, layout held at the current pose."""

    def __init__(self, world: ws.WorldConfig = ws.WorldConfig()):
        self.world = world

    def __call__(self, pose: ws.EgoState, scene: ws.Scene, step: int, k: int):
        lay = ws.layout_tokens(pose, scene, self.world)
        return np.zeros((k, 3), np.float32), np.repeat(lay[None], k, axis=0)


@dataclass
class ClosedLoopResult:
    latents: np.ndarray                   # (N*K, d_z)
    actions: list[np.ndarray] = field(default_factory=list)
    layouts: list[np.ndarray] = field(default_factory=list)
    poses: list[ws.EgoState] = field(default_factory=list)
    controller_calls: int = 0


def closed_loop_rollout(model, scene: ws.Scene, clip: ws.Clip, T: int, controller: Callable,
                        n_chunks: int, k: int, sampler: SamplerConfig, rng: Rng) -> ClosedLoopResult:
    """Drive the model with a controller that only sees poses recovered from generated frames.

    Only the first T frames of ``clip`` are used. Raises
    :class:`DegenerateGeometryError` naming the chunk when pose recovery fails.
    """
    buf = HistoryBuffer(clip.latents[:T], clip.layout[:T], clip.frame_actions[:T])
    result = ClosedLoopResult(latents=np.zeros((0, clip.latents.shape[1]), np.float32))
    chunks = []
    for n in range(1, n_chunks + 1):
        try:
            pose = ws.recover_pose(buf.frames[0, -1], scene, clip.anchor_ids)
        except DegenerateGeometryError as e:
            raise DegenerateGeometryError(f"pose recovery failed before chunk {n}: {e}") from e
        actions, layout = controller(pose, scene, n, k)
        result.controller_calls += 1
        result.actions.append(np.asarray(actions))
        result.layouts.append(np.asarray(layout))
        result.poses.append(pose)
        chunk = ar_step(model, buf, np.asarray(layout)[None], np.asarray(actions)[None], sampler,
                        rng.child("chunk", n))
        chunks.append(chunk[0])
    if chunks:
        result.latents = np.concatenate(chunks, axis=0)
    return result
