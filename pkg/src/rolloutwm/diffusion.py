"""Linear flow-matching schedule, chunk-restricted v-loss and the Euler sampler.

Convention: t=0 is data and t=1 is noise, ``z_t = sigma(t) z0 + (1 - sigma(t)) eps``
with ``sigma(t) = 1 - t``; the network regresses ``v = z0 - eps``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import ContractViolation
from .rng import Rng
from .tensor import Tensor

TRAIN_LEVELS = np.arange(1, 33) / 32.0


def sigma(t):
    """Signal coefficient; sigma(0)=1, sigma(1)=0, strictly decreasing."""
    return 1.0 - np.asarray(t, dtype=np.float64)


def renoise(z0, eps, t):
    """sigma(t) * z0 + (1 - sigma(t)) * eps; t broadcasts against leading dims."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ContractViolation(f"noise level outside [0, 1]: {t}")
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise ContractViolation(f"renoise: shape mismatch {z0.shape} vs {eps.shape}")
    s = sigma(t)
    s = s.reshape(s.shape + (1,) * (z0.ndim - s.ndim))
    return (s * z0 + (1.0 - s) * eps).astype(z0.dtype)


def x0_from_v(z_t, v, t):
    """Clean estimate z_t + (1 - sigma(t)) * v (exact when v = z0 - eps)."""
    t = np.asarray(t, dtype=np.float64)
    c = 1.0 - sigma(t)
    z_t = np.asarray(z_t)
    c = c.reshape(c.shape + (1,) * (z_t.ndim - c.ndim))
    return (z_t + c * np.asarray(v)).astype(z_t.dtype)


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 16

    def __post_init__(self):
        if self.steps < 1:
            raise ContractViolation(f"sampler needs at least one step, got {self.steps}")

    def grid(self) -> np.ndarray:
        return np.linspace(1.0, 0.0, self.steps + 1)


def window_levels(batch: int, n_cond: int, n_chunk: int, t) -> np.ndarray:
    """Per-frame noise levels: condition frames at 0, chunk frames at ``t`` (scalar or per example)."""
    levels = np.zeros((batch, n_cond + n_chunk))
    levels[:, n_cond:] = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))[:, None]
    return levels


def flow_loss(model, frames, n_cond: int, layout, actions, rng: Rng | None = None, *,
              t=None, eps=None, cond_mask=None, target=None) -> Tensor:
    """Mean squared v-error over the chunk frames only.

    ``frames`` is (batch, n_cond + K, latent); the first ``n_cond`` frames are fed
    clean at t=0. ``t`` (per example) and ``eps`` (chunk-shaped) are drawn from
    ``rng`` when not given. ``target`` overrides the clean chunk used for the
    regression target (defaults to the chunk frames themselves).
    """
    frames = np.asarray(frames)
    if frames.ndim == 2:
        frames = frames[None]
    b, f, dz = frames.shape
    k = f - n_cond
    if n_cond < 0 or k < 1:
        raise ContractViolation(f"empty chunk: {f} frames with {n_cond} condition frames")
    if t is None:
        t = TRAIN_LEVELS[rng.integers(0, len(TRAIN_LEVELS), size=b)]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
    if eps is None:
        eps = rng.normal((b, k, dz), dtype=frames.dtype)
    chunk0 = frames[:, n_cond:]
    clean = chunk0 if target is None else np.asarray(target).reshape(b, k, dz)
    noisy = renoise(chunk0, eps, t)
    window = np.concatenate([frames[:, :n_cond], noisy], axis=1)
    v = model(window, window_levels(b, n_cond, k, t), layout, actions, cond_mask=cond_mask)
    diff = v[:, n_cond:] - Tensor(clean - eps)
    return tn.mean(diff * diff)


def euler_sample(model, history, layout, actions, k: int, sampler: SamplerConfig,
                 rng: Rng | None = None, *, noise=None, drop_conditions=False):
    """Generate ``k`` frames after ``history`` by integrating v from t=1 to t=0.

    ``history`` is (batch, T, latent) and is never modified; ``layout``/``actions``
    cover the T + k window. If ``history`` is a Tensor that requires grad (or grad
    mode is on and the model's params require grad), the returned chunk is a
    Tensor carrying the graph; otherwise a numpy array is returned.
    """
    if sampler.steps < 1:
        raise ContractViolation("sampler steps must be >= 1")
    hist = history if isinstance(history, Tensor) else Tensor(np.asarray(history))
    if hist.ndim == 2:
        hist = hist.reshape(1, *hist.shape)
    b, n_cond, dz = hist.shape
    if noise is None:
        noise = rng.normal((b, k, dz), dtype=hist.data.dtype)
    z = Tensor(np.asarray(noise).reshape(b, k, dz))
    grid = sampler.grid()
    for t_cur, t_next in zip(grid[:-1], grid[1:]):
        window = tn.concat([hist, z], axis=1)
        v = model(window, window_levels(b, n_cond, k, t_cur), layout, actions,
                  drop_conditions=drop_conditions)
        z = z + v[:, n_cond:] * float(t_cur - t_next)
    return z if z.requires_grad else z.data
