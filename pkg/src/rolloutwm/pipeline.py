"""Stage runners shared by the command line and the experiments."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import worldsim as ws
from .denoiser import Denoiser, DenoiserConfig
from .diffusion import SamplerConfig
from .metrics import DriftReport, drift_report
from .optim import AdamW
from .rng import Rng
from .rollout import RolloutCache, rollout_clips
from .srr import BaseConfig, SrrConfig, base_train_step, srr_train_step
from .trd import TrdConfig, trd_train_step

log = logging.getLogger(__name__)


@dataclass
class StageResult:
    model: Denoiser
    losses: list


def train_base(clips, config: BaseConfig, rng: Rng, model: Denoiser | None = None,
               model_config: DenoiserConfig = DenoiserConfig(), steps: int | None = None) -> StageResult:
    """Fit a fresh (or given) denoiser on clean windows."""
    if model is None:
        model = Denoiser.initialize(model_config, rng.child("init"))
    opt = AdamW(model.params, lr=config.lr, weight_decay=config.weight_decay)
    steps = config.steps if steps is None else steps
    losses = []
    for k in range(steps):
        losses.append(base_train_step(model, clips, opt, rng.child("step", k), config))
        if (k + 1) % 500 == 0:
            log.info("base step %d loss %.4f", k + 1, np.mean(losses[-500:]))
    return StageResult(model, losses)


def train_srr(model: Denoiser, clips, config: SrrConfig, rng: Rng, steps: int | None = None) -> StageResult:
    """Continue training a copy of ``model`` on rollout-corrupted histories."""
    model = model.copy()
    opt = AdamW(model.params, lr=config.lr, weight_decay=config.weight_decay)
    cache = RolloutCache(config.T, config.K, config.cache_depth)
    steps = config.steps if steps is None else steps
    losses = []
    for k in range(steps):
        losses.append(srr_train_step(model, cache, clips, opt, config, k, rng.child("step", k)))
        if (k + 1) % 250 == 0:
            log.info("srr step %d loss %.4f", k + 1, np.mean(losses[-250:]))
    return StageResult(model, losses)


def distill(teacher: Denoiser, clips, config: TrdConfig, rng: Rng, steps: int | None = None,
            student: Denoiser | None = None) -> StageResult:
    """Distill a student initialized from ``teacher``; the critic starts as a teacher copy."""
    teacher = teacher.copy(trainable=False)
    student = teacher.copy() if student is None else student.copy()
    critic = teacher.copy()
    s_opt = AdamW(student.params, lr=config.student_lr, weight_decay=config.weight_decay)
    c_opt = AdamW(critic.params, lr=config.critic_lr, weight_decay=config.weight_decay)
    steps = config.steps if steps is None else steps
    stats = []
    for k in range(steps):
        stats.append(trd_train_step(student, teacher, critic, clips, config, k, s_opt, c_opt,
                                    rng.child("step", k)))
        if (k + 1) % 100 == 0:
            log.info("trd step %d grad %.3g", k + 1, np.mean(stats[-1]["grad_norm"]))
    return StageResult(student, stats)


def open_loop_report(model: Denoiser, clips, T: int, K: int, n_chunks: int, sampler_steps: int,
                     rng: Rng, world: ws.WorldConfig = ws.WorldConfig(), cumulative: bool = True,
                     batch: int = 64) -> tuple[DriftReport, np.ndarray]:
    """Roll every clip open loop from its first T frames and score the result."""
    sampler = SamplerConfig(sampler_steps)
    parts = []
    for lo in range(0, len(clips), batch):
        parts.append(rollout_clips(model, clips[lo:lo + batch], T, n_chunks, K, sampler,
                                   rng.child("eval", lo)).latents)
    generated = np.concatenate(parts, axis=0)
    gt = np.stack([c.latents[T:T + n_chunks * K] for c in clips])
    scenes = [ws.scene_for(c, world) for c in clips]
    report = drift_report(generated, gt, scenes, [c.anchor_ids for c in clips], K, cumulative)
    return report, generated
