"""Seeded toy experiments: SRR vs base drift, TRD ablations and the closed-loop probe.

Every experiment derives its data and stage seeds the same way the command
line does, so ``rolloutwm`` runs and these functions agree for a given seed.
Trained teachers are memoized per seed within a process.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import worldsim as ws
from .config import RunConfig
from .diffusion import SamplerConfig
from .errors import DegenerateGeometryError
from .metrics import DriftReport
from .pipeline import distill, open_loop_report, train_base, train_srr
from .rng import Rng
from .rollout import PursuitController, closed_loop_rollout

log = logging.getLogger(__name__)

_TEACHERS: dict = {}


@dataclass
class Setup:
    config: RunConfig
    train: list
    test: list


def setup(seed: int, config: RunConfig | None = None) -> Setup:
    cfg = replace(config or RunConfig(), seed=seed)
    root = Rng(seed)
    train = ws.make_dataset(root.child("train").seed, cfg.data.train_clips, cfg.data.frames, cfg.world)
    test = ws.make_dataset(root.child("test").seed, cfg.data.test_clips, cfg.data.frames, cfg.world)
    return Setup(cfg, train, test)


def teachers(s: Setup):
    """(base, srr) models for a setup, trained once per process."""
    cfg = s.config
    key = (cfg.seed, cfg.data, cfg.world, cfg.model, cfg.base, cfg.srr)
    if key not in _TEACHERS:
        root = Rng(cfg.seed)
        base = train_base(s.train, cfg.base, root.child("base"), model_config=cfg.model).model
        srr = train_srr(base, s.train, cfg.srr, root.child("srr")).model
        _TEACHERS[key] = (base, srr)
    return _TEACHERS[key]


def evaluate(model, s: Setup, sampler_steps: int | None = None) -> DriftReport:
    e = s.config.eval
    steps = e.sampler_steps if sampler_steps is None else sampler_steps
    report, _ = open_loop_report(model, s.test, s.config.base.T, e.chunk, e.n_chunks, steps,
                                 Rng(s.config.seed).child("rollout"), s.config.world, e.cumulative)
    return report


@dataclass
class Comparison:
    seed: int
    reports: dict = field(default_factory=dict)

    def final(self, name: str) -> float:
        return self.reports[name].final_lfd

    def slope(self, name: str) -> float:
        return self.reports[name].slope()


def srr_comparison(seed: int, config: RunConfig | None = None) -> Comparison:
    """Open-loop drift of the base and SRR models on the held-out clips."""
    s = setup(seed, config)
    base, srr = teachers(s)
    out = Comparison(seed, {"base": evaluate(base, s), "srr": evaluate(srr, s)})
    log.info("seed %d: base %.4f srr %.4f", seed, out.final("base"), out.final("srr"))
    return out


def trd_ablation(seed: int, runs=(("srr", None), ("srr", 1), ("base", None)),
                 config: RunConfig | None = None) -> Comparison:
    """Distill one student per (teacher, rollout depth) and score it.

    A depth of ``None`` keeps the configured full depth. Report keys look like
    ``"srr:10"``.
    """
    s = setup(seed, config)
    base, srr = teachers(s)
    models = {"base": base, "srr": srr}
    trd = s.config.trd
    out = Comparison(seed)
    for teacher, depth in runs:
        cfg = trd if depth is None else replace(trd, n_chunks=depth)
        name = f"{teacher}:{cfg.n_chunks}"
        student = distill(models[teacher], s.train, cfg, Rng(seed).child("trd", name)).model
        out.reports[name] = evaluate(student, s, trd.student_steps)
        log.info("seed %d: %s %.4f", seed, name, out.final(name))
    return out


@dataclass
class ClosedLoopProbe:
    seed: int
    max_norm: float
    failures: int
    clips: int


def closed_loop_probe(seed: int, model=None, n_clips: int = 4, config: RunConfig | None = None,
                      bound: float = 1e3) -> ClosedLoopProbe:
    """Drive ``n_clips`` test scenes with pure pursuit; defaults to the SRR model.

    Pose-recovery failures are counted rather than raised; a clip whose
    latents exceed ``bound`` also counts as a failure.
    """
    s = setup(seed, config)
    if model is None:
        model = teachers(s)[1]
        steps = s.config.closed_loop.sampler_steps
    else:
        steps = s.config.trd.student_steps
    c = s.config.closed_loop
    controller = PursuitController(s.config.world)
    worst, failures = 0.0, 0
    for i, clip in enumerate(s.test[:n_clips]):
        try:
            res = closed_loop_rollout(model, ws.scene_for(clip, s.config.world), clip, s.config.base.T,
                                      controller, c.n_chunks, c.chunk, SamplerConfig(steps),
                                      Rng(seed).child("closed-loop", i))
        except DegenerateGeometryError as e:
            log.warning("seed %d clip %d: %s", seed, i, e)
            failures += 1
            continue
        norm = float(np.linalg.norm(res.latents, axis=-1).max())
        worst = max(worst, norm)
        failures += int(not np.isfinite(norm) or norm > bound)
    return ClosedLoopProbe(seed, worst, failures, n_clips)
