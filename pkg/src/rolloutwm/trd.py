"""Teacher rollout DMD: distilling a multi-step, long-chunk teacher into a few-step student.

The student rolls out short chunks autoregressively with gradients enabled.
Every D chunks the latest K^T generated frames form a supervision window: it is
renoised with a shared noise draw, scored by the frozen teacher (conditional
and, at low noise, unconditional for guidance) and by the critic, and the
resulting distribution-matching gradient is pushed back into the student at
once. The critic is then fit to the detached window, and history is detached
before the next window starts.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .diffusion import SamplerConfig, euler_sample, flow_loss, renoise, window_levels, x0_from_v
from .errors import ConfigError
from .rng import Rng
from .tensor import Tensor


@dataclass(frozen=True)
class TrdConfig:
    T: int = 8
    k_student: int = 4
    k_teacher: int = 16
    student_steps: int = 4
    teacher_steps: int = 16
    n_chunks: int = 10
    dmd_interval: int | None = None
    cfg_scale: float = 6.0
    cfg_plateau: float = 1000.0
    cfg_plateau_end: int = 100
    cfg_zero_step: int = 400
    student_lr: float = 3e-6
    critic_lr: float = 3e-4
    weight_decay: float = 0.1
    steps: int = 400
    batch: int = 8

    def __post_init__(self):
        for name in ("T", "k_student", "k_teacher", "student_steps", "teacher_steps", "n_chunks"):
            if getattr(self, name) < 1:
                raise ConfigError(f"TrdConfig.{name} must be >= 1")
        if self.student_steps > self.teacher_steps:
            raise ConfigError("student steps must not exceed teacher steps")
        if self.cfg_scale < 1.0:
            raise ConfigError("CFG scale must be >= 1")
        if self.cfg_zero_step < self.cfg_plateau_end:
            raise ConfigError("CFG threshold must reach zero after its plateau ends")
        if self.k_teacher % self.k_student:
            warnings.warn("teacher chunk is not a multiple of the student chunk", stacklevel=2)
        if self.interval * self.k_student < self.k_teacher:
            raise ConfigError(
                f"DMD interval {self.interval} x {self.k_student} frames underflows the "
                f"{self.k_teacher}-frame supervision window"
            )

    @property
    def interval(self) -> int:
        if self.dmd_interval is not None:
            return self.dmd_interval
        return max(1, -(-self.k_teacher // self.k_student))

    @property
    def teacher_nfe_per_window(self) -> int:
        """Guided teacher sampling of one window: cond and uncond at every step."""
        return self.teacher_steps * 2

    def windows(self) -> list[tuple[int, int, int]]:
        """(firing chunk, lo, hi) with frame positions counted from 0 including the history.

        A rollout shorter than one interval fires once at its last chunk over
        everything it generated.
        """
        T, ks, D = self.T, self.k_student, self.interval
        if self.n_chunks < D:
            n = self.n_chunks
            hi = T + n * ks
            return [(n, T, hi)]
        out = []
        for n in range(D, self.n_chunks + 1, D):
            hi = T + n * ks
            out.append((n, hi - self.k_teacher, hi))
        return out


def cfg_threshold(step: int, plateau: float = 1000.0, plateau_end: int = 100, zero_step: int = 400) -> float:
    """Plateau until ``plateau_end``, linear decay to 0 at ``zero_step``, 0 afterwards."""
    if step <= plateau_end:
        return float(plateau)
    if step >= zero_step:
        return 0.0
    return float(plateau) * (zero_step - step) / (zero_step - plateau_end)


def _values(v) -> np.ndarray:
    return np.asarray(v.data if isinstance(v, Tensor) else v)


def score_x0(model, z_tau, tau: float, history, layout, actions, drop_conditions: bool = False) -> np.ndarray:
    """Predicted clean window x0 = z_tau + (1 - sigma(tau)) v from one forward pass."""
    z_tau = np.asarray(z_tau)
    history = np.asarray(history)
    b, n_cond = history.shape[:2]
    k = z_tau.shape[1]
    window = np.concatenate([history, z_tau], axis=1)
    with tn.no_grad():
        v = model(window, window_levels(b, n_cond, k, tau), layout, actions,
                  drop_conditions=drop_conditions)
    return x0_from_v(z_tau, _values(v)[:, n_cond:], tau)


def trd_direction(teacher, critic, x, history, layout, actions, tau: float, tau_th: float,
                  alpha: float, rng: Rng | None = None, *, eps=None):
    """Unnormalized gradient (fake_c - real_c) - 1{tau <= tau_th} (alpha - 1)(real_c - real_u).

    All score evaluations share one noise draw. ``tau_th`` is on the 0..1000 scale.
    Returns the direction and the number of teacher forward passes used.
    """
    x = np.asarray(x)
    if eps is None:
        eps = rng.normal(x.shape, dtype=x.dtype)
    z_tau = renoise(x, eps, tau)
    fake = score_x0(critic, z_tau, tau, history, layout, actions)
    real_c = score_x0(teacher, z_tau, tau, history, layout, actions)
    g = fake - real_c
    passes = 1
    if tau * 1000.0 <= tau_th:
        real_u = score_x0(teacher, z_tau, tau, history, layout, actions, drop_conditions=True)
        g = g - (alpha - 1.0) * (real_c - real_u)
        passes = 2
    return g, passes


def trd_gradient(teacher, critic, x, history, layout, actions, tau: float, tau_th: float,
                 alpha: float, rng: Rng | None = None, *, eps=None) -> np.ndarray:
    """The direction normalized by element count."""
    g, _ = trd_direction(teacher, critic, x, history, layout, actions, tau, tau_th, alpha, rng, eps=eps)
    return g / g.size


def dmd_surrogate(x: Tensor, grad: np.ndarray) -> Tensor:
    """0.5 ||x - sg(x - grad)||^2, whose gradient with respect to x is ``grad``."""
    target = Tensor(x.data - grad.astype(x.data.dtype))
    diff = x - target
    return tn.sum(diff * diff) * 0.5


def critic_step(critic, window, history, layout, actions, optimizer, rng: Rng) -> float:
    """Fit the critic's flow loss on a detached student window treated as data."""
    frames = np.concatenate([np.asarray(history), np.asarray(window)], axis=1)
    loss = flow_loss(critic, frames, np.asarray(history).shape[1], layout, actions, rng)
    tn.backward(loss)
    optimizer.step()
    optimizer.zero_grad()
    return loss.item()


def student_rollout(student, history, layout, actions, config: TrdConfig, rng: Rng, on_window=None):
    """Roll ``config.n_chunks`` student chunks, calling ``on_window`` at every firing chunk.

    Chunks inside an upcoming supervision window carry the student graph;
    all others are generated without it. ``on_window(window, hist, lo, hi)``
    gets the window as a Tensor plus the preceding T frames as an array; the
    sequence is detached right after it returns. Returns all generated frames.
    """
    T, ks = config.T, config.k_student
    history = np.asarray(history)
    sampler = SamplerConfig(config.student_steps)
    windows = config.windows()
    fire = {n: (lo, hi) for n, lo, hi in windows}
    seq = Tensor(history)
    for n in range(1, config.n_chunks + 1):
        a = T + (n - 1) * ks
        live = any(lo <= a < hi for _, lo, hi in windows)
        ctrl = (layout[:, a - T:a + ks], actions[:, a - T:a + ks])
        if live:
            chunk = euler_sample(student, seq[:, a - T:a], *ctrl, ks, sampler, rng.child("chunk", n))
        else:
            with tn.no_grad():
                chunk = euler_sample(student, seq[:, a - T:a], *ctrl, ks, sampler, rng.child("chunk", n))
        seq = tn.concat([seq, tn.as_tensor(chunk)], axis=1)
        if n in fire:
            lo, hi = fire[n]
            if on_window is not None:
                on_window(seq[:, lo:hi], seq.data[:, lo - T:lo], lo, hi)
            seq = seq.detach()
    return seq.data[:, T:]


def trd_train_step(student, teacher, critic, clips, config: TrdConfig, step: int,
                   student_opt, critic_opt, rng: Rng, clip_ids=None) -> dict:
    """One distillation rollout with a DMD update at every supervision window."""
    T = config.T
    need = T + config.n_chunks * config.k_student
    if clip_ids is None:
        clip_ids = rng.child("clips").integers(0, len(clips), size=config.batch)
    history = np.stack([clips[c].latents[:T] for c in clip_ids])
    layout = np.stack([clips[c].layout[:need] for c in clip_ids])
    actions = np.stack([clips[c].frame_actions[:need] for c in clip_ids])
    tau_th = cfg_threshold(step, config.cfg_plateau, config.cfg_plateau_end, config.cfg_zero_step)
    taus = SamplerConfig(config.student_steps).grid()[:-1]
    stats = {"fired": 0, "critic_loss": [], "grad_norm": [], "teacher_passes": [],
             "student_nfe_per_chunk": config.student_steps, "tau_th": tau_th}

    def on_window(window, hist, lo, hi):
        i = stats["fired"]
        wr = rng.child("window", i)
        tau = float(taus[int(wr.integers(0, len(taus)))])
        lay, act = layout[:, lo - T:hi], actions[:, lo - T:hi]
        g, passes = trd_direction(teacher, critic, window.data, hist, lay, act, tau, tau_th,
                                  config.cfg_scale, wr.child("eps"))
        g = g / g.size
        tn.backward(dmd_surrogate(window, g))
        student_opt.step()
        student_opt.zero_grad()
        stats["critic_loss"].append(
            critic_step(critic, window.data, hist, lay, act, critic_opt, wr.child("critic")))
        stats["grad_norm"].append(float(np.linalg.norm(g)))
        stats["teacher_passes"].append(passes)
        stats["fired"] += 1

    calls = student.calls
    student_rollout(student, history, layout, actions, config, rng.child("rollout"), on_window)
    stats["student_calls"] = student.calls - calls
    return stats
