"""Tiny bidirectional transformer that predicts the flow velocity per frame.

Inputs per frame: a latent, a noise level (0 for clean condition frames),
layout tokens and a residual action (dx, dy, dyaw). Layout enters additively
through a zero-initialized projector before every block; the action drives
AdaLN-style shift/scale/gate modulation through a per-block zero-initialized
projector, so a freshly initialized model ignores both controls.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tn
from .errors import ContractViolation
from .rng import Rng
from .tensor import Tensor


@dataclass(frozen=True)
class DenoiserConfig:
    latent_dim: int = 8
    width: int = 64
    layers: int = 2
    heads: int = 4
    max_frames: int = 64
    layout_dim: int = 6
    mlp_ratio: int = 4
    time_embed_dim: int = 64
    action_embed_dim: int = 16
    action_scale: float = 30.0
    action_max_period: float = 100.0

    def __post_init__(self):
        for name in ("latent_dim", "width", "layers", "heads", "max_frames", "layout_dim",
                     "mlp_ratio", "time_embed_dim", "action_embed_dim"):
            if getattr(self, name) <= 0:
                raise ContractViolation(f"DenoiserConfig.{name} must be positive")
        if self.width % self.heads:
            raise ContractViolation(f"width {self.width} not divisible by heads {self.heads}")
        if self.time_embed_dim % 2 or self.action_embed_dim % 2:
            raise ContractViolation("embedding dims must be even")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        d, dz = self.width, self.latent_dim
        shapes = {
            "embed.w": (dz, d),
            "embed.b": (d,),
            "pos": (self.max_frames, d),
            "time.w1": (self.time_embed_dim, d),
            "time.b1": (d,),
            "time.w2": (d, d),
            "time.b2": (d,),
        }
        for i in range(self.layers):
            p = f"block{i}."
            shapes |= {
                p + "layout.w": (self.layout_dim, d),
                p + "layout.b": (d,),
                p + "action.w": (3 * self.action_embed_dim, 6 * d),
                p + "action.b": (6 * d,),
                p + "attn.wq": (d, d),
                p + "attn.wk": (d, d),
                p + "attn.wv": (d, d),
                p + "attn.wo": (d, d),
                p + "mlp.w1": (d, self.mlp_ratio * d),
                p + "mlp.b1": (self.mlp_ratio * d,),
                p + "mlp.w2": (self.mlp_ratio * d, d),
                p + "mlp.b2": (d,),
            }
        shapes |= {"out.w": (d, dz), "out.b": (dz,)}
        return shapes

    def param_count(self) -> int:
        return int(sum(np.prod(s) for s in self.param_shapes().values()))

    def digest(self) -> bytes:
        return hashlib.sha256(repr(sorted(asdict(self).items())).encode()).digest()


ZERO_INIT = ("layout.w", "layout.b", "action.w", "action.b")


def init_params(config: DenoiserConfig, rng: Rng) -> dict[str, Tensor]:
    params = {}
    for name, shape in config.param_shapes().items():
        if name.endswith(ZERO_INIT) or len(shape) == 1:
            data = np.zeros(shape, dtype=np.float32)
        elif name == "pos":
            data = 0.1 * rng.normal(shape)
        elif name == "out.w":
            data = 0.02 * rng.normal(shape)
        else:
            data = rng.normal(shape) / np.sqrt(shape[0])
        params[name] = Tensor(data.astype(np.float32), requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# control injection


def inject_layout(hidden: Tensor, layout: np.ndarray, params: dict, block: int) -> Tensor:
    """hidden + f_zero(layout) for one block."""
    if layout.shape[:-1] != hidden.shape[:-1]:
        raise ContractViolation(f"layout frames {layout.shape} vs hidden {hidden.shape}")
    p = f"block{block}.layout."
    return hidden + (Tensor(layout) @ params[p + "w"] + params[p + "b"])


def embed_actions(action: np.ndarray, config: DenoiserConfig) -> np.ndarray:
    """Sinusoidal features of each action channel, concatenated per frame."""
    emb = tn.sinusoidal_embedding(
        np.asarray(action) * config.action_scale, config.action_embed_dim, config.action_max_period
    )
    return emb.reshape(*emb.shape[:-2], -1)


def action_modulation(action_features: np.ndarray, params: dict, block: int, width: int):
    """Six per-frame modulation tensors: (shift, scale, gate) for attention then MLP."""
    p = f"block{block}.action."
    mods = Tensor(action_features) @ params[p + "w"] + params[p + "b"]
    return tuple(mods[..., i * width:(i + 1) * width] for i in range(6))


def modulate(hidden: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return tn.layernorm(hidden) * (scale + 1.0) + shift


def adaln_action(hidden: Tensor, action: np.ndarray, params: dict, block: int,
                 config: DenoiserConfig, sublayer) -> Tensor:
    """Apply one gated residual sublayer under action modulation.

    ``sublayer`` is 0 for attention-side channels or 1 for MLP-side channels;
    returns ``hidden + gate * f(modulate(hidden))``.
    """
    mods = action_modulation(embed_actions(action, config), params, block, config.width)
    shift, scale, gate = mods[3 * sublayer:3 * sublayer + 3]
    x = modulate(hidden, shift, scale)
    f = _attention if sublayer == 0 else _mlp
    return hidden + gate * f(x, params, block, config)


# ---------------------------------------------------------------------------
# blocks


def _attention(x: Tensor, params: dict, block: int, config: DenoiserConfig) -> Tensor:
    p = f"block{block}.attn."
    b, f, d = x.shape
    h = config.heads
    dh = d // h

    def heads(w):
        return (x @ params[p + w]).reshape(b, f, h, dh).transpose(0, 2, 1, 3)

    q, k, v = heads("wq"), heads("wk"), heads("wv")
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    o = tn.softmax(scores) @ v
    return o.transpose(0, 2, 1, 3).reshape(b, f, d) @ params[p + "wo"]


def _mlp(x: Tensor, params: dict, block: int, config: DenoiserConfig) -> Tensor:
    p = f"block{block}.mlp."
    return tn.silu(x @ params[p + "w1"] + params[p + "b1"]) @ params[p + "w2"] + params[p + "b2"]


def _noise_embedding(t: np.ndarray, params: dict, config: DenoiserConfig) -> Tensor:
    feats = Tensor(tn.sinusoidal_embedding(np.asarray(t) * 1000.0, config.time_embed_dim))
    hidden = tn.silu(feats @ params["time.w1"] + params["time.b1"])
    return hidden @ params["time.w2"] + params["time.b2"]


class Denoiser:
    """Parameters plus the forward pass; also counts calls and window sizes."""

    def __init__(self, config: DenoiserConfig, params: dict[str, Tensor]):
        expected = config.param_shapes()
        if set(params) != set(expected):
            raise ContractViolation("parameter names do not match the config")
        for k, shape in expected.items():
            if params[k].shape != shape:
                raise ContractViolation(f"param {k}: shape {params[k].shape}, expected {shape}")
        self.config = config
        self.params = params
        self.calls = 0
        self.max_frames_seen = 0

    @classmethod
    def initialize(cls, config: DenoiserConfig, rng: Rng) -> "Denoiser":
        return cls(config, init_params(config, rng))

    def copy(self, trainable: bool = True) -> "Denoiser":
        return Denoiser(
            self.config,
            {k: Tensor(p.data.copy(), requires_grad=trainable) for k, p in self.params.items()},
        )

    def astype(self, dtype) -> "Denoiser":
        with tn.precision(dtype):
            return Denoiser(
                self.config, {k: Tensor(p.data, requires_grad=True) for k, p in self.params.items()}
            )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k].data).tobytes())
        return h.hexdigest()

    def reset_stats(self) -> None:
        self.calls = 0
        self.max_frames_seen = 0

    def __call__(self, z, t_levels, layout, action, cond_mask=None, drop_conditions=False):
        return self.forward(z, t_levels, layout, action, cond_mask, drop_conditions)

    def forward(self, z, t_levels, layout, action, cond_mask=None, drop_conditions=False) -> Tensor:
        """Predict v for every frame of a (batch, frames, latent) window.

        ``cond_mask`` (batch,) scales the controls per example; ``drop_conditions``
        zeroes layout and action features for the whole batch.
        """
        cfg = self.config
        z = tn.as_tensor(z)
        unbatched = z.ndim == 2
        if unbatched:
            z = z.reshape(1, *z.shape)
        b, f, dz = z.shape
        if dz != cfg.latent_dim:
            raise ContractViolation(f"latent dim {dz} != {cfg.latent_dim}")
        if f > cfg.max_frames:
            raise ContractViolation(f"window of {f} frames exceeds max_frames {cfg.max_frames}")
        t_levels = np.broadcast_to(np.asarray(t_levels, dtype=np.float64), (b, f))
        layout = np.broadcast_to(np.asarray(layout, dtype=tn.default_dtype()), (b, f, cfg.layout_dim))
        action = np.broadcast_to(np.asarray(action, dtype=np.float64), (b, f, 3))
        self.calls += 1
        self.max_frames_seen = max(self.max_frames_seen, f)

        p = self.params
        act = embed_actions(action, cfg)
        if drop_conditions:
            act = np.zeros_like(act)
            layout = np.zeros_like(layout)
        elif cond_mask is not None:
            m = np.asarray(cond_mask, dtype=act.dtype).reshape(b, 1, 1)
            act = act * m
            layout = layout * m
        h = z @ p["embed.w"] + p["embed.b"] + _noise_embedding(t_levels, p, cfg) + p["pos"][:f]
        for i in range(cfg.layers):
            h = inject_layout(h, layout, p, i)
            s1, c1, g1, s2, c2, g2 = action_modulation(act, p, i, cfg.width)
            h = h + g1 * _attention(modulate(h, s1, c1), p, i, cfg)
            h = h + g2 * _mlp(modulate(h, s2, c2), p, i, cfg)
        out = tn.layernorm(h) @ p["out.w"] + p["out.b"]
        return out.reshape(f, dz) if unbatched else out
