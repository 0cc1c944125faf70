"""Shared oracles for the test suite."""

import numpy as np

from rolloutwm import tensor as tn
from rolloutwm.denoiser import Denoiser, DenoiserConfig
from rolloutwm.rng import Rng
from rolloutwm.tensor import Tensor

SMALL_MODEL = DenoiserConfig(width=16, layers=2, heads=2, max_frames=12, time_embed_dim=8,
                             action_embed_dim=4)


def rel_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def numeric_grad(fn, arrays, index, h=1e-6):
    """Central differences of scalar fn(*arrays) with respect to arrays[index], in float64."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    x = arrays[index]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = fn(*arrays)
        x[i] = old - h
        down = fn(*arrays)
        x[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def analytic_grads(op, arrays, weights, dtype):
    """Gradients of sum(op(*inputs) * weights) computed by the tape at ``dtype``."""
    with tn.precision(dtype):
        inputs = [Tensor(a, requires_grad=True) for a in arrays]
        out = op(*inputs)
        loss = tn.sum(out * Tensor(weights))
        tn.backward(loss)
    return [t.grad for t in inputs]


def scalar_loss(op, weights):
    def fn(*arrays):
        with tn.precision(np.float64), tn.no_grad():
            out = op(*[Tensor(a) for a in arrays])
            return float(np.sum(out.data * weights))
    return fn


def random_model(config=SMALL_MODEL, seed=0, scale=0.3) -> Denoiser:
    """Initialized model with every parameter (including zero-init ones) perturbed."""
    model = Denoiser.initialize(config, Rng(seed))
    rng = np.random.default_rng(seed + 1)
    for p in model.params.values():
        p.data = (p.data + scale * rng.standard_normal(p.shape) / np.sqrt(max(p.shape[0], 1))).astype(np.float32)
    return model


def random_window(config=SMALL_MODEL, batch=2, frames=6, seed=0):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((batch, frames, config.latent_dim))
    t = np.concatenate([np.zeros((batch, frames // 2)), np.full((batch, frames - frames // 2), 0.4)], axis=1)
    layout = rng.standard_normal((batch, frames, config.layout_dim))
    action = 0.05 * rng.standard_normal((batch, frames, 3))
    return z, t, layout, action
