"""Base conditional training and scheduled rollout recovery (SRR).

Base training fits the flow loss on clean ground-truth windows. SRR replaces
the condition frames with the model's own cached rollouts and blends rollout
frames into ground truth over a radius ``w`` around the chunk boundary ``s``.
Two schedules run over training: the rollout depth N(k) used for boundary
sampling decays, and the blend radius w(k) grows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .diffusion import SamplerConfig, flow_loss
from .errors import ContractViolation
from .rng import Rng
from .rollout import RolloutCache, refresh_cache


@dataclass(frozen=True)
class BaseConfig:
    T: int = 8
    chunk_sizes: tuple[int, ...] = (4, 16)
    steps: int = 2000
    batch: int = 16
    lr: float = 1e-3
    weight_decay: float = 1e-2
    cond_dropout: float = 0.1


@dataclass(frozen=True)
class SrrConfig:
    T: int = 8
    K: int = 4
    chunk_sizes: tuple[int, ...] = (4, 16)
    refresh_period: int = 200
    n_start: int = 3
    n_end: int = 1
    n_horizon: int = 800
    w_start: int = 0
    w_end: int = 2
    w_horizon: int = 800
    steps: int = 1000
    batch: int = 16
    lr: float = 1e-4
    weight_decay: float = 1e-5
    cond_dropout: float = 0.1
    pure_gt_target: bool = False
    rollout_steps: int = 16

    def __post_init__(self):
        if min(self.n_start, self.n_end) <= 0:
            raise ContractViolation("N(k) endpoints must be positive")
        if max(self.w_start, self.w_end) > min(self.K, self.T):
            raise ContractViolation("blend radius must not exceed K or T")

    @property
    def cache_depth(self) -> int:
        """Chunks per cached rollout: the largest N plus enough to hold the blend radius."""
        w_max = max(self.w_start, self.w_end)
        return max(self.n_start, self.n_end) + -(-w_max // self.K)


def schedule_value(start: float, end: float, horizon: int, step: int, integer: bool = False):
    """Linear ramp from ``start`` to ``end`` over ``horizon`` steps, clamped afterwards.

    Integer schedules round to nearest with exact halves going toward ``end``.
    """
    if horizon <= 0:
        raise ContractViolation("schedule horizon must be positive")
    frac = min(max(step / horizon, 0.0), 1.0)
    value = start + (end - start) * frac
    if not integer:
        return value
    lo = math.floor(value)
    if value - lo == 0.5:
        return lo + 1 if end > start else lo
    return int(round(value))


def n_schedule(config: SrrConfig, step: int) -> int:
    return schedule_value(config.n_start, config.n_end, config.n_horizon, step, integer=True)


def w_schedule(config: SrrConfig, step: int) -> int:
    return schedule_value(config.w_start, config.w_end, config.w_horizon, step, integer=True)


def boundary_choices(n_now: int, T: int, K: int) -> list[int]:
    """Chunk-aligned boundaries T + mK for ceil(N/2) <= m <= N."""
    return [T + m * K for m in range(math.ceil(n_now / 2), n_now + 1)]


def sample_boundary(n_now: int, T: int, K: int, w: int, rng: Rng, cache_depth: int | None = None) -> int:
    """Uniform draw over the upper half of the available chunk boundaries."""
    if n_now < 1:
        raise ContractViolation("N must be >= 1")
    depth = n_now if cache_depth is None else cache_depth
    choices = boundary_choices(n_now, T, K)
    cache_end = T + depth * K
    if choices[-1] + w > cache_end:
        raise ContractViolation(
            f"cache of {depth} chunks ends at frame {cache_end}; boundary {choices[-1]} + w={w} overflows"
        )
    return choices[int(rng.integers(0, len(choices)))]


def blend_coefficients(s: int, w: int) -> np.ndarray:
    """alpha_i = (s + w - i) / (2w) for i = s-w+1 .. s+w (empty for w = 0)."""
    if w == 0:
        return np.zeros(0)
    i = np.arange(s - w + 1, s + w + 1)
    return (s + w - i) / (2.0 * w)


def build_blended_sequence(z_hat, z_star, s: int, T: int, K: int, w: int) -> np.ndarray:
    """Frames s-T+1 .. s+K of the pred-to-GT bridge.

    ``z_hat`` and ``z_star`` are full sequences where row r holds frame r+1.
    Rollout frames up to s-w, a linear blend on s-w+1 .. s+w, ground truth after.
    """
    z_hat = np.asarray(z_hat)
    z_star = np.asarray(z_star)
    lo = s - T + 1
    if lo < 1 or len(z_hat) < s + w:
        raise ContractViolation(f"rollout covers {len(z_hat)} frames, need {lo}..{s + w}")
    if len(z_star) < s + K:
        raise ContractViolation(f"ground truth covers {len(z_star)} frames, need up to {s + K}")
    if w > K or w > T:
        raise ContractViolation(f"blend radius {w} exceeds K={K} or T={T}")
    out = np.empty((T + K, z_hat.shape[1]), dtype=np.result_type(z_hat, z_star))
    for j, i in enumerate(range(lo, s + K + 1)):
        if i <= s - w:
            out[j] = z_hat[i - 1]
        elif i <= s + w:
            a = (s + w - i) / (2.0 * w)
            # written around z* so equal inputs return z* exactly
            out[j] = z_star[i - 1] + a * (z_hat[i - 1] - z_star[i - 1])
        else:
            out[j] = z_star[i - 1]
    return out


# ---------------------------------------------------------------------------
# training steps


def _window_controls(clips, idx, lo: int, hi: int):
    layout = np.stack([clips[c].layout[a:b] for c, a, b in zip(idx, lo, hi)])
    actions = np.stack([clips[c].frame_actions[a:b] for c, a, b in zip(idx, lo, hi)])
    return layout, actions


def _dropout_mask(rng: Rng, b: int, p: float) -> np.ndarray:
    return (rng.random(b) >= p).astype(np.float32)


def _apply(model, optimizer, loss, update: bool) -> float:
    tn.backward(loss)
    if update:
        optimizer.step()
    optimizer.zero_grad()
    return loss.item()


def base_train_step(model, clips, optimizer, rng: Rng, config: BaseConfig = BaseConfig(), *,
                    K: int | None = None, clip_ids=None, starts=None, update: bool = True) -> float:
    """One optimizer step of the flow loss on random clean windows (T condition + K chunk)."""
    T = config.T
    wr = rng.child("window")
    if K is None:
        K = int(wr.choice(list(config.chunk_sizes)))
    if clip_ids is None:
        clip_ids = wr.integers(0, len(clips), size=config.batch)
    clip_ids = np.asarray(clip_ids)
    if starts is None:
        hi = np.array([clips[c].frames - (T + K) for c in clip_ids])
        if np.any(hi < 0):
            raise ContractViolation(f"clip shorter than T+K={T + K}")
        starts = np.floor(wr.random(len(clip_ids)) * (hi + 1)).astype(int)
    starts = np.asarray(starts)
    frames = np.stack([clips[c].latents[a:a + T + K] for c, a in zip(clip_ids, starts)])
    if frames.shape[1] != T + K:
        raise ContractViolation(f"clip shorter than T+K={T + K}")
    layout, actions = _window_controls(clips, clip_ids, starts, starts + T + K)
    mask = _dropout_mask(rng.child("dropout"), len(clip_ids), config.cond_dropout)
    loss = flow_loss(model, frames, T, layout, actions, rng.child("noise"), cond_mask=mask)
    return _apply(model, optimizer, loss, update)


def srr_train_step(model, cache: RolloutCache, clips, optimizer, config: SrrConfig, step: int,
                   rng: Rng, *, K: int | None = None, clip_ids=None, boundaries=None, w: int | None = None,
                   update: bool = True) -> float:
    """One SRR step: refresh the cache if due, build blended windows, fit the flow loss.

    Condition frames are the first T blended frames (fed clean); the chunk target
    is the blended chunk, or pure ground truth when ``config.pure_gt_target``.
    """
    refresh_cache(cache, model, clips, config.refresh_period, step,
                  SamplerConfig(config.rollout_steps), rng.child("cache"))
    T = config.T
    wr = rng.child("window")
    if K is None:
        K = int(wr.choice(list(config.chunk_sizes)))
    n_now = n_schedule(config, step)
    if w is None:
        w = w_schedule(config, step)
    if clip_ids is None:
        clip_ids = wr.integers(0, len(clips), size=config.batch)
    clip_ids = np.asarray(clip_ids)
    if boundaries is None:
        br = rng.child("boundary")
        boundaries = [sample_boundary(n_now, T, config.K, w, br, cache.depth) for _ in clip_ids]
    frames, targets = [], []
    for c, s in zip(clip_ids, boundaries):
        z_hat = cache.sequence(int(c), clips[c])
        z_star = clips[c].latents
        seq = build_blended_sequence(z_hat, z_star, s, T, K, w)
        frames.append(seq)
        targets.append(z_star[s:s + K] if config.pure_gt_target else seq[T:])
    frames = np.stack(frames)
    starts = np.asarray(boundaries) - T
    layout, actions = _window_controls(clips, clip_ids, starts, starts + T + K)
    mask = _dropout_mask(rng.child("dropout"), len(clip_ids), config.cond_dropout)
    target = np.stack(targets) if config.pure_gt_target else None
    loss = flow_loss(model, frames, T, layout, actions, rng.child("noise"), cond_mask=mask,
                     target=target)
    return _apply(model, optimizer, loss, update)
